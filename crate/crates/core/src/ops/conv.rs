//! 2-D convolution via chunked im2col and GEMM.
//!
//! Columns are materialized for a bounded number of output pixels at a time
//! so that full-resolution panoramas do not need a multi-gigabyte im2col
//! buffer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Mat, Real, Tensor};

/// Upper bound on elements in one im2col chunk.
const CHUNK_ELEMS: usize = 1 << 21;

/// Kernel, stride and zero-padding of a convolution or pooling window,
/// as `(vertical, horizontal)` pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn square(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvGeometry {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
        }
    }

    /// `floor((size + 2·padding − kernel)/stride) + 1` per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let axis = |size: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            if s == 0 {
                return None;
            }
            let span = size + 2 * p;
            if span < k {
                None
            } else {
                Some((span - k) / s + 1)
            }
        };
        match (
            axis(h, self.kernel.0, self.stride.0, self.padding.0),
            axis(w, self.kernel.1, self.stride.1, self.padding.1),
        ) {
            (Some(oh), Some(ow)) if oh >= 1 && ow >= 1 => Ok((oh, ow)),
            _ => Err(Error::Shape(format!(
                "window {:?} does not fit a {h}×{w} input",
                self
            ))),
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

struct Layout {
    cin: usize,
    h: usize,
    w: usize,
    ow: usize,
}

fn fill_cols<T: Real>(
    x: &[T],
    l: &Layout,
    g: &ConvGeometry,
    p0: usize,
    len: usize,
    cols: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    for c in 0..l.cin {
        let plane = &x[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * len..(row + 1) * len];
                let (mut oy, mut ox) = (p0 / l.ow, p0 % l.ow);
                for d in dst.iter_mut() {
                    let iy = (oy * sh + ky) as isize - ph;
                    let ix = (ox * sw + kx) as isize - pw;
                    *d = if iy >= 0 && ix >= 0 && (iy as usize) < l.h && (ix as usize) < l.w {
                        plane[iy as usize * l.w + ix as usize]
                    } else {
                        T::zero()
                    };
                    ox += 1;
                    if ox == l.ow {
                        ox = 0;
                        oy += 1;
                    }
                }
            }
        }
    }
}

fn scatter_cols<T: Real>(
    cols: &[T],
    l: &Layout,
    g: &ConvGeometry,
    p0: usize,
    len: usize,
    gx: &mut [T],
) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = (g.padding.0 as isize, g.padding.1 as isize);
    for c in 0..l.cin {
        let plane = &mut gx[c * l.h * l.w..(c + 1) * l.h * l.w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * len..(row + 1) * len];
                let (mut oy, mut ox) = (p0 / l.ow, p0 % l.ow);
                for &v in src {
                    let iy = (oy * sh + ky) as isize - ph;
                    let ix = (ox * sw + kx) as isize - pw;
                    if iy >= 0 && ix >= 0 && (iy as usize) < l.h && (ix as usize) < l.w {
                        plane[iy as usize * l.w + ix as usize] += v;
                    }
                    ox += 1;
                    if ox == l.ow {
                        ox = 0;
                        oy += 1;
                    }
                }
            }
        }
    }
}

fn check_weight<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeometry,
) -> Result<(usize, usize)> {
    let (_, cin, _, _) = x.try_dims4()?;
    let ws = weight.shape();
    if ws.len() != 4 || ws[1] != cin || (ws[2], ws[3]) != g.kernel {
        return Err(Error::Shape(format!(
            "weight {ws:?} incompatible with input channels {cin} and kernel {:?}",
            g.kernel
        )));
    }
    Ok((ws[0], cin * g.kernel.0 * g.kernel.1))
}

fn chunk_len(k: usize, total: usize) -> usize {
    (CHUNK_ELEMS / k.max(1)).max(64).min(total.max(1))
}

/// Cross-correlation of `x` (`N×Cin×H×W`) with `weight` (`Cout×Cin×kh×kw`).
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.try_dims4()?;
    let (cout, k) = check_weight(x, weight, g)?;
    let (oh, ow) = g.output_size(h, w)?;
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::Shape(format!(
                "bias has {} entries, want {cout}",
                b.numel()
            )));
        }
    }
    let l = Layout { cin, h, w, ow };
    let ohw = oh * ow;
    let mut y = Tensor::zeros(&[n, cout, oh, ow]);
    let wmat = Mat::dense(weight.data(), cout, k);
    let mut cols = Vec::new();
    for b in 0..n {
        let xb = x.item(b);
        let yb = y.item_mut(b);
        if g.is_pointwise() {
            gemm(T::one(), wmat, Mat::dense(xb, cin, ohw), T::zero(), yb, ohw);
        } else {
            let chunk = chunk_len(k, ohw);
            cols.resize(k * chunk, T::zero());
            let mut p0 = 0;
            while p0 < ohw {
                let len = chunk.min(ohw - p0);
                fill_cols(xb, &l, g, p0, len, &mut cols[..k * len]);
                gemm(
                    T::one(),
                    wmat,
                    Mat::dense(&cols[..k * len], k, len),
                    T::zero(),
                    &mut yb[p0..],
                    ohw,
                );
                p0 += len;
            }
        }
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                yb[co * ohw..(co + 1) * ohw]
                    .iter_mut()
                    .for_each(|v| *v += bv);
            }
        }
    }
    Ok(y)
}

/// Gradients of [`conv2d`] with respect to its inputs.
#[derive(Debug)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Backward pass of [`conv2d`]. The input gradient is only formed when
/// `need_input` is set.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let (n, cin, h, w) = x.try_dims4()?;
    let (cout, k) = check_weight(x, weight, g)?;
    let (oh, ow) = g.output_size(h, w)?;
    if grad_out.shape() != [n, cout, oh, ow] {
        return Err(Error::Shape(format!(
            "output gradient {:?}, expected {:?}",
            grad_out.shape(),
            [n, cout, oh, ow]
        )));
    }
    let l = Layout { cin, h, w, ow };
    let ohw = oh * ow;
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[cout]);
    let mut gx = need_input.then(|| Tensor::zeros(x.shape()));
    let wt = Mat::dense_t(weight.data(), cout, k);
    let mut cols = Vec::new();
    let mut gcols = Vec::new();
    for b in 0..n {
        let xb = x.item(b);
        let gyb = grad_out.item(b);
        for (co, gbv) in gb.data_mut().iter_mut().enumerate() {
            *gbv += gyb[co * ohw..(co + 1) * ohw].iter().copied().sum::<T>();
        }
        if g.is_pointwise() {
            // gW += gY · Xᵀ
            gemm(
                T::one(),
                Mat::dense(gyb, cout, ohw),
                Mat::dense_t(xb, cin, ohw),
                T::one(),
                gw.data_mut(),
                k,
            );
            if let Some(gx) = gx.as_mut() {
                gemm(
                    T::one(),
                    wt,
                    Mat::dense(gyb, cout, ohw),
                    T::zero(),
                    gx.item_mut(b),
                    ohw,
                );
            }
            continue;
        }
        let chunk = chunk_len(k, ohw);
        cols.resize(k * chunk, T::zero());
        if need_input {
            gcols.resize(k * chunk, T::zero());
        }
        let mut p0 = 0;
        while p0 < ohw {
            let len = chunk.min(ohw - p0);
            fill_cols(xb, &l, g, p0, len, &mut cols[..k * len]);
            let gy_chunk = Mat {
                data: &gyb[p0..],
                rows: cout,
                cols: len,
                row_stride: ohw,
                col_stride: 1,
            };
            gemm(
                T::one(),
                gy_chunk,
                Mat::dense_t(&cols[..k * len], k, len),
                T::one(),
                gw.data_mut(),
                k,
            );
            if let Some(gx) = gx.as_mut() {
                gemm(
                    T::one(),
                    wt,
                    gy_chunk,
                    T::zero(),
                    &mut gcols[..k * len],
                    len,
                );
                scatter_cols(&gcols[..k * len], &l, g, p0, len, gx.item_mut(b));
            }
            p0 += len;
        }
    }
    Ok(ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}
