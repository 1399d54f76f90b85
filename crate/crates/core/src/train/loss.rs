use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Value and logit gradient of the mean pixel-wise cross-entropy.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    /// Gradient with respect to the logits; zero at ignored pixels.
    pub grad: Tensor<T>,
    pub scored_pixels: usize,
    /// Set when every pixel was ignored; the loss is then defined as 0.
    pub all_ignored: bool,
}

/// Softmax cross-entropy averaged over pixels whose label is not `ignore_id`.
/// `labels` is `N×H×W` flattened.
pub fn cross_entropy<T: Real>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore_id: u8,
) -> Result<LossOutput<T>> {
    let (n, k, h, w) = logits.try_dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::Shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l != ignore_id && l as usize >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside 0..{k}"
        )));
    }
    let scored = labels.iter().filter(|&&l| l != ignore_id).count();
    let mut grad = Tensor::zeros(logits.shape());
    if scored == 0 {
        return Ok(LossOutput {
            loss: 0.0,
            grad,
            scored_pixels: 0,
            all_ignored: true,
        });
    }
    let inv = 1.0 / scored as f64;
    let mut total = 0.0f64;
    let mut probs = vec![0.0f64; k];
    for b in 0..n {
        let z = logits.item(b);
        let g = grad.item_mut(b);
        for i in 0..hw {
            let label = labels[b * hw + i];
            if label == ignore_id {
                continue;
            }
            let max = (0..k)
                .map(|c| z[c * hw + i].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (c, p) in probs.iter_mut().enumerate() {
                *p = (z[c * hw + i].as_f64() - max).exp();
                sum += *p;
            }
            total += sum.ln() + max - z[label as usize * hw + i].as_f64();
            for (c, p) in probs.iter().enumerate() {
                let onehot = if c == label as usize { 1.0 } else { 0.0 };
                g[c * hw + i] = T::lit((p / sum - onehot) * inv);
            }
        }
    }
    Ok(LossOutput {
        loss: total * inv,
        grad,
        scored_pixels: scored,
        all_ignored: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let logits = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let out = cross_entropy(&logits, &[0, 1, 2, 0], 255).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_give_near_zero() {
        let logits = Tensor::<f64>::from_fn4(
            [1, 3, 1, 4],
            |_, c, _, x| if c == x % 3 { 60.0 } else { 0.0 },
        );
        let out = cross_entropy(&logits, &[0, 1, 2, 0], 255).unwrap();
        assert!(out.loss < 1e-20);
    }

    #[test]
    fn everything_ignored() {
        let logits = Tensor::<f32>::zeros(&[1, 3, 1, 2]);
        let out = cross_entropy(&logits, &[255, 255], 255).unwrap();
        assert!(out.all_ignored);
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.grad.sum(), 0.0);
    }

    #[test]
    fn invalid_label_rejected() {
        let logits = Tensor::<f32>::zeros(&[1, 3, 1, 2]);
        assert!(cross_entropy(&logits, &[0, 3], 255).is_err());
        assert!(cross_entropy(&logits, &[0], 255).is_err());
    }
}
