//! Whole-image inference and dataset evaluation.

use crate::dataset::{Normalization, SegSample};
use crate::error::{Error, Result};
use crate::metrics::{argmax_labels, ConfusionMatrix, IouReport};
use crate::model::SegNet;
use crate::nn::Mode;
use crate::raster::Raster;
use crate::tensor::{Real, Tensor};

/// Normalizes an RGB `[0,1]` raster into `1×3×H'×W'`, zero-padding the
/// bottom and right edges up to multiples of 32.
pub fn padded_input<T: Real>(image: &Raster<f32>, norm: &Normalization) -> Result<Tensor<T>> {
    if image.channels() != 3 {
        return Err(Error::Shape(format!(
            "expected an RGB image, got {} channels",
            image.channels()
        )));
    }
    let (w, h) = (image.width(), image.height());
    let (ph, pw) = (h.div_ceil(32).max(1) * 32, w.div_ceil(32).max(1) * 32);
    Ok(Tensor::from_fn4([1, 3, ph, pw], |_, c, y, x| {
        if y < h && x < w {
            T::lit(((image.get(x, y, c) - norm.mean[c]) / norm.std[c]) as f64)
        } else {
            T::zero()
        }
    }))
}

/// Class map for one image. Pixels where `valid_mask` is zero get `fill`.
pub fn predict_labels<T: Real>(
    model: &mut SegNet<T>,
    image: &Raster<f32>,
    norm: &Normalization,
    valid_mask: Option<&Raster<u8>>,
    fill: u8,
) -> Result<Raster<u8>> {
    let (w, h) = (image.width(), image.height());
    if let Some(m) = valid_mask {
        if (m.width(), m.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "mask {}×{} does not match image {w}×{h}",
                m.width(),
                m.height()
            )));
        }
    }
    let x = padded_input::<T>(image, norm)?;
    let pw = x.shape()[3];
    let labels = argmax_labels(&model.forward(&x, Mode::Eval)?)?;
    Ok(Raster::from_fn(w, h, 1, |px, py, p| {
        let blind = valid_mask.is_some_and(|m| m.get(px, py, 0) == 0);
        p[0] = if blind { fill } else { labels[py * pw + px] };
    }))
}

/// Accumulates a confusion matrix over `samples` (blind pixels ignored).
pub fn evaluate<'a, T: Real>(
    model: &mut SegNet<T>,
    samples: impl IntoIterator<Item = Result<std::borrow::Cow<'a, SegSample>>>,
    norm: &Normalization,
    ignore_id: u8,
) -> Result<ConfusionMatrix> {
    let k = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for s in samples {
        let s = s?;
        let pred = predict_labels(model, &s.image, norm, None, 0)?;
        let gt = s.effective_label(ignore_id);
        cm.update(pred.data(), gt.data(), ignore_id)
            .map_err(|e| Error::Dataset(format!("{}: {e}", s.id)))?;
    }
    Ok(cm)
}

/// [`evaluate`] followed by the IoU report.
pub fn evaluate_report<'a, T: Real>(
    model: &mut SegNet<T>,
    samples: impl IntoIterator<Item = Result<std::borrow::Cow<'a, SegSample>>>,
    norm: &Normalization,
    ignore_id: u8,
    class_names: &[String],
) -> Result<IouReport> {
    Ok(evaluate(model, samples, norm, ignore_id)?.iou(class_names))
}
