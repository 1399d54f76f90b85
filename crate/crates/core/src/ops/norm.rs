//! Batch normalization and rectification kernels.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Saved state for [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel batch statistics: `(mean, biased variance)`.
pub fn channel_stats<T: Real>(x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (n, c, h, w) = x.dims4();
    let hw = h * w;
    let count = T::lit((n * hw) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            s += x.item(b)[ch * hw..(ch + 1) * hw].iter().copied().sum::<T>();
        }
        let m = s / count;
        let mut v = T::zero();
        for b in 0..n {
            v += x.item(b)[ch * hw..(ch + 1) * hw]
                .iter()
                .map(|&e| (e - m) * (e - m))
                .sum::<T>();
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

/// `gamma·(x − mean)/sqrt(var + eps) + beta` with the given statistics.
pub fn batch_norm_apply<T: Real>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, h, w) = x.try_dims4()?;
    if [mean.len(), var.len(), gamma.len(), beta.len()] != [c; 4] {
        return Err(Error::Shape(format!(
            "batch norm over {c} channels with mismatched parameters"
        )));
    }
    let hw = h * w;
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    for b in 0..n {
        let xs = x.item(b);
        let ns = normalized.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                ns[i] = (xs[i] - mean[ch]) * inv_std[ch];
            }
        }
        let ys = y.item_mut(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                ys[i] = ns[i] * gamma[ch] + beta[ch];
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Gradients `(input, gamma, beta)` of batch normalization that used batch
/// statistics in the forward pass.
pub fn batch_norm_backward<T: Real>(
    grad_out: &Tensor<T>,
    cache: &BatchNormCache<T>,
    gamma: &[T],
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (n, c, h, w) = grad_out.dims4();
    let hw = h * w;
    let m = T::lit((n * hw) as f64);
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        let gy = grad_out.item(b);
        let xn = cache.normalized.item(b);
        for ch in 0..c {
            for i in ch * hw..(ch + 1) * hw {
                dbeta[ch] += gy[i];
                dgamma[ch] += gy[i] * xn[i];
            }
        }
    }
    let mut gx = Tensor::zeros(grad_out.shape());
    for b in 0..n {
        let gy = grad_out.item(b);
        let xn = cache.normalized.item(b);
        let gs = gx.item_mut(b);
        for ch in 0..c {
            let k = gamma[ch] * cache.inv_std[ch] / m;
            for i in ch * hw..(ch + 1) * hw {
                gs[i] = k * (m * gy[i] - dbeta[ch] - xn[i] * dgamma[ch]);
            }
        }
    }
    (gx, dgamma, dbeta)
}

/// Rectifier that lets NaN through so divergence stays visible.
pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v < T::zero() { T::zero() } else { v })
}

/// Gradient of [`relu`], given its output.
pub fn relu_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_propagates_nan() {
        let x = Tensor::<f32>::from_vec(&[3], vec![-1.0, f32::NAN, 2.0]).unwrap();
        let y = relu(&x);
        assert_eq!((y.data()[0], y.data()[2]), (0.0, 2.0));
        assert!(y.data()[1].is_nan());
    }

    #[test]
    fn batch_norm_backward_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn4([2, 2, 3, 3], |n, c, y, x| {
            ((n * 17 + c * 5 + y * 3 + x * 7) % 13) as f64 * 0.3
        });
        let gamma = [1.3, -0.7];
        let beta = [0.2, 0.1];
        let gy = Tensor::<f64>::from_fn4([2, 2, 3, 3], |n, c, y, x| {
            ((n + c * 2 + y * 5 + x) % 7) as f64 - 3.0
        });
        let loss = |x: &Tensor<f64>| {
            let (m, v) = channel_stats(x);
            let (y, _) = batch_norm_apply(x, &m, &v, &gamma, &beta, 1e-5).unwrap();
            y.data()
                .iter()
                .zip(gy.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (m, v) = channel_stats(&x);
        let (_, cache) = batch_norm_apply(&x, &m, &v, &gamma, &beta, 1e-5).unwrap();
        let (gx, _, _) = batch_norm_backward(&gy, &cache, &gamma);
        for i in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[i] += 1e-6;
            let mut q = x.clone();
            q.data_mut()[i] -= 1e-6;
            let fd = (loss(&p) - loss(&q)) / 2e-6;
            assert!((fd - gx.data()[i]).abs() < 1e-6, "{fd} vs {}", gx.data()[i]);
        }
    }
}
