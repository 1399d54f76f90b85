//! Bilinear resizing with half-pixel centers (`align_corners = false`).
//!
//! Source coordinate of output index `o` is `(o + 0.5)·in/out − 0.5`, clamped
//! at zero; the upper neighbour is clamped to the last row or column. A 1×1
//! source therefore broadcasts.

use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Resizes every plane of `x` to `out_h × out_w`.
pub fn resize_bilinear<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.try_dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let mut y = Tensor::zeros(&[n, c, out_h, out_w]);
    for (src, dst) in x
        .data()
        .chunks(h * w)
        .zip(y.data_mut().chunks_mut(out_h * out_w))
    {
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * fx;
                let bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * fx;
                dst[oy * out_w + ox] = top + (bot - top) * fy;
            }
        }
    }
    Ok(y)
}

/// Adjoint of [`resize_bilinear`]: scatters `grad_out` back onto an input of
/// spatial size `in_h × in_w`.
pub fn resize_bilinear_backward<T: Real>(
    grad_out: &Tensor<T>,
    in_h: usize,
    in_w: usize,
) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = grad_out.try_dims4()?;
    if (oh, ow) == (in_h, in_w) {
        return Ok(grad_out.clone());
    }
    let ty = axis_taps(in_h, oh);
    let tx = axis_taps(in_w, ow);
    let mut gx = Tensor::zeros(&[n, c, in_h, in_w]);
    for (src, dst) in grad_out
        .data()
        .chunks(oh * ow)
        .zip(gx.data_mut().chunks_mut(in_h * in_w))
    {
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::lit(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::lit(b.frac);
                let g = src[oy * ow + ox];
                let top = g * (T::one() - fy);
                let bot = g * fy;
                dst[a.lo * in_w + b.lo] += top * (T::one() - fx);
                dst[a.lo * in_w + b.hi] += top * fx;
                dst[a.hi * in_w + b.lo] += bot * (T::one() - fx);
                dst[a.hi * in_w + b.hi] += bot * fx;
            }
        }
    }
    Ok(gx)
}

/// Bilinear ×2 upsampling.
pub fn upsample2<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, _, h, w) = x.try_dims4()?;
    resize_bilinear(x, 2 * h, 2 * w)
}
