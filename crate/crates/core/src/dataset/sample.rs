use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::ClassCatalog;
use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::tensor::{Real, Tensor};

/// An image with its per-pixel class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub id: String,
    /// `H×W×3`, values in `[0, 1]`.
    pub image: Raster<f32>,
    /// `H×W×1` class ids (or the ignore id).
    pub label: Raster<u8>,
    /// `H×W×1`, nonzero where the pixel saw the scene.
    pub valid_mask: Option<Raster<u8>>,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Raster<f32>, label: Raster<u8>) -> Result<Self> {
        let s = SegSample {
            id: id.into(),
            image,
            label,
            valid_mask: None,
        };
        s.check_shapes()?;
        Ok(s)
    }

    pub fn from_u8(id: impl Into<String>, image: &Raster<u8>, label: Raster<u8>) -> Result<Self> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!(
                "expected an RGB image, got {} channels",
                image.channels()
            )));
        }
        SegSample::new(id, image.map(|v| v as f32 / 255.0), label)
    }

    pub fn width(&self) -> usize {
        self.label.width()
    }

    pub fn height(&self) -> usize {
        self.label.height()
    }

    fn check_shapes(&self) -> Result<()> {
        if let Some(msg) = size_mismatch(self) {
            return Err(Error::Shape(msg));
        }
        Ok(())
    }

    /// Labels with blind pixels replaced by `ignore_id`.
    pub fn effective_label(&self, ignore_id: u8) -> Raster<u8> {
        match &self.valid_mask {
            None => self.label.clone(),
            Some(m) => {
                let mut out = self.label.clone();
                for (l, &v) in out.data_mut().iter_mut().zip(m.data()) {
                    if v == 0 {
                        *l = ignore_id;
                    }
                }
                out
            }
        }
    }
}

fn size_mismatch(s: &SegSample) -> Option<String> {
    let (w, h) = (s.label.width(), s.label.height());
    if s.label.channels() != 1 {
        return Some(format!(
            "label has {} channels, expected 1",
            s.label.channels()
        ));
    }
    if (s.image.width(), s.image.height()) != (w, h) {
        return Some(format!(
            "image is {}×{} but label is {w}×{h}",
            s.image.width(),
            s.image.height()
        ));
    }
    if s.image.channels() != 3 {
        return Some(format!(
            "image has {} channels, expected 3",
            s.image.channels()
        ));
    }
    if let Some(m) = &s.valid_mask {
        if (m.width(), m.height()) != (w, h) {
            return Some(format!(
                "valid mask is {}×{} but label is {w}×{h}",
                m.width(),
                m.height()
            ));
        }
    }
    None
}

/// Findings of [`validate_sample`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub size_mismatch: Option<String>,
    /// Pixel count per class id.
    pub class_counts: Vec<u64>,
    pub ignored_pixels: u64,
    /// Label values that are neither a class nor the ignore id, with counts.
    pub invalid_values: BTreeMap<u8, u64>,
}

impl SampleReport {
    pub fn is_ok(&self) -> bool {
        self.size_mismatch.is_none() && self.invalid_values.is_empty()
    }
}

pub fn validate_sample(s: &SegSample, catalog: &ClassCatalog) -> SampleReport {
    let mut class_counts = vec![0u64; catalog.num_classes()];
    let mut ignored = 0;
    let mut invalid = BTreeMap::new();
    for &v in s.label.data() {
        if let Some(c) = class_counts.get_mut(v as usize) {
            *c += 1;
        } else if Some(v) == catalog.ignore_id {
            ignored += 1;
        } else {
            *invalid.entry(v).or_insert(0) += 1;
        }
    }
    SampleReport {
        id: s.id.clone(),
        width: s.width(),
        height: s.height(),
        size_mismatch: size_mismatch(s),
        class_counts,
        ignored_pixels: ignored,
        invalid_values: invalid,
    }
}

/// Per-channel input normalization applied when batching.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    /// ImageNet statistics, matching pretrained encoders.
    fn default() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Converts a `[0,1]` RGB raster into a `1×3×H×W` tensor.
    pub fn to_tensor<T: Real>(&self, image: &Raster<f32>) -> Tensor<T> {
        let (w, h) = (image.width(), image.height());
        Tensor::from_fn4([1, 3, h, w], |_, c, y, x| {
            T::lit(((image.get(x, y, c) - self.mean[c]) / self.std[c]) as f64)
        })
    }
}

/// Stacks equally sized samples into an `N×3×H×W` input and a flat label
/// vector (blind pixels become `ignore_id`).
pub fn collate<T: Real>(
    samples: &[&SegSample],
    norm: &Normalization,
    ignore_id: u8,
) -> Result<(Tensor<T>, Vec<u8>)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Dataset("cannot collate an empty batch".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut labels = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.width(), s.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {w}×{h} and {}×{} samples",
                s.width(),
                s.height()
            )));
        }
        data.extend(norm.to_tensor::<T>(&s.image).into_data());
        labels.extend_from_slice(s.effective_label(ignore_id).data());
    }
    Ok((Tensor::from_vec(&[samples.len(), 3, h, w], data)?, labels))
}
