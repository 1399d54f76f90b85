//! Average, max and global pooling.

use crate::error::{Error, Result};
use crate::ops::ConvGeometry;
use crate::tensor::{Real, Tensor};

fn check_window(g: &ConvGeometry) -> Result<()> {
    let ok_axis = |k: usize, s: usize, p: usize| s >= 1 && k >= s && 2 * p <= k;
    if !ok_axis(g.kernel.0, g.stride.0, g.padding.0)
        || !ok_axis(g.kernel.1, g.stride.1, g.padding.1)
    {
        return Err(Error::InvalidArgument(format!(
            "pooling window {g:?} needs kernel ≥ stride ≥ 1 and padding ≤ kernel/2"
        )));
    }
    Ok(())
}

/// Half-open in-bounds tap range of output index `o` along one axis.
#[inline]
fn taps(o: usize, k: usize, s: usize, p: usize, size: usize) -> (usize, usize) {
    let start = (o * s) as isize - p as isize;
    let end = start + k as isize;
    (start.max(0) as usize, (end.min(size as isize)) as usize)
}

/// Average pooling. With `exclude_pad` each window is divided by the number
/// of in-bounds taps; otherwise by the full kernel area.
pub fn avg_pool2d<T: Real>(
    x: &Tensor<T>,
    g: &ConvGeometry,
    exclude_pad: bool,
) -> Result<Tensor<T>> {
    check_window(g)?;
    let (n, c, h, w) = x.try_dims4()?;
    let (oh, ow) = g.output_size(h, w)?;
    let area = T::lit((g.kernel.0 * g.kernel.1) as f64);
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let ys = y.data_mut();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        let dst = &mut ys[plane * oh * ow..(plane + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = taps(oy, g.kernel.0, g.stride.0, g.padding.0, h);
            for ox in 0..ow {
                let (x0, x1) = taps(ox, g.kernel.1, g.stride.1, g.padding.1, w);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    acc += src[iy * w + x0..iy * w + x1].iter().copied().sum::<T>();
                }
                let denom = if exclude_pad {
                    T::lit(((y1 - y0) * (x1 - x0)) as f64)
                } else {
                    area
                };
                dst[oy * ow + ox] = acc / denom;
            }
        }
    }
    Ok(y)
}

/// Backward pass of [`avg_pool2d`] for an input of shape `input_shape`.
pub fn avg_pool2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
    g: &ConvGeometry,
    exclude_pad: bool,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = (
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    );
    let (oh, ow) = g.output_size(h, w)?;
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(Error::Shape(format!(
            "pool gradient {:?} does not match output {:?}",
            grad_out.shape(),
            [n, c, oh, ow]
        )));
    }
    let area = T::lit((g.kernel.0 * g.kernel.1) as f64);
    let mut gx = Tensor::zeros(input_shape);
    let gxs = gx.data_mut();
    for plane in 0..n * c {
        let src = &grad_out.data()[plane * oh * ow..(plane + 1) * oh * ow];
        let dst = &mut gxs[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = taps(oy, g.kernel.0, g.stride.0, g.padding.0, h);
            for ox in 0..ow {
                let (x0, x1) = taps(ox, g.kernel.1, g.stride.1, g.padding.1, w);
                let denom = if exclude_pad {
                    T::lit(((y1 - y0) * (x1 - x0)) as f64)
                } else {
                    area
                };
                let share = src[oy * ow + ox] / denom;
                for iy in y0..y1 {
                    dst[iy * w + x0..iy * w + x1]
                        .iter_mut()
                        .for_each(|v| *v += share);
                }
            }
        }
    }
    Ok(gx)
}

/// Max pooling; also returns the flat in-plane argmax of every output.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, g: &ConvGeometry) -> Result<(Tensor<T>, Vec<u32>)> {
    check_window(g)?;
    let (n, c, h, w) = x.try_dims4()?;
    let (oh, ow) = g.output_size(h, w)?;
    let mut y = Tensor::zeros(&[n, c, oh, ow]);
    let mut arg = vec![0u32; n * c * oh * ow];
    let ys = y.data_mut();
    for plane in 0..n * c {
        let src = &x.data()[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = taps(oy, g.kernel.0, g.stride.0, g.padding.0, h);
            for ox in 0..ow {
                let (x0, x1) = taps(ox, g.kernel.1, g.stride.1, g.padding.1, w);
                let mut best = T::neg_infinity();
                let mut best_idx = y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let v = src[iy * w + ix];
                        // NaN wins so it is never silently dropped
                        if v > best || v.is_nan() {
                            best = v;
                            best_idx = iy * w + ix;
                        }
                    }
                }
                let o = plane * oh * ow + oy * ow + ox;
                ys[o] = best;
                arg[o] = best_idx as u32;
            }
        }
    }
    Ok((y, arg))
}

pub fn max_pool2d_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Tensor<T> {
    let (_, _, oh, ow) = grad_out.dims4();
    let plane_in = input_shape[2] * input_shape[3];
    let mut gx = Tensor::zeros(input_shape);
    let gxs = gx.data_mut();
    for (o, (&gv, &a)) in grad_out.data().iter().zip(argmax).enumerate() {
        let plane = o / (oh * ow);
        gxs[plane * plane_in + a as usize] += gv;
    }
    gx
}

/// Mean over each `H×W` plane, producing `N×C×1×1`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.try_dims4()?;
    let hw = h * w;
    let inv = T::one() / T::lit(hw as f64);
    let data = x
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Real>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(hw as f64);
    let mut gx = Tensor::zeros(input_shape);
    for (plane, &gv) in gx.data_mut().chunks_mut(hw).zip(grad_out.data()) {
        plane.iter_mut().for_each(|v| *v = gv * inv);
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_is_preserved_with_exclude_pad() {
        let x = Tensor::<f64>::full(&[1, 2, 16, 16], 3.25);
        for (k, s, p) in [(5, 2, 2), (9, 4, 4), (17, 8, 8)] {
            let y = avg_pool2d(&x, &ConvGeometry::square(k, s, p), true).unwrap();
            assert!(y.data().iter().all(|&v| (v - 3.25).abs() < 1e-12));
        }
        // include-pad averaging darkens the border
        let y = avg_pool2d(&x, &ConvGeometry::square(5, 2, 2), false).unwrap();
        assert!(y.at4(0, 0, 0, 0) < 3.25);
    }

    #[test]
    fn ramp_block_means() {
        let x = Tensor::<f64>::from_fn4([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        let y = avg_pool2d(&x, &ConvGeometry::square(2, 2, 0), true).unwrap();
        // hand-computed: mean of {0,1,4,5}=2.5, {2,3,6,7}=4.5, {8,9,12,13}=10.5, {10,11,14,15}=12.5
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn rejects_bad_windows() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8]);
        assert!(avg_pool2d(&x, &ConvGeometry::square(2, 3, 0), true).is_err());
        assert!(avg_pool2d(&x, &ConvGeometry::square(3, 1, 2), true).is_err());
        assert!(avg_pool2d(&x, &ConvGeometry::square(17, 8, 0), true).is_err());
    }

    #[test]
    fn avg_pool_backward_is_adjoint() {
        // <pool(x), g> == <x, pool_backward(g)>
        let g = ConvGeometry::square(5, 2, 2);
        let x = Tensor::<f64>::from_fn4([1, 2, 9, 7], |_, c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 11) as f64 - 5.0
        });
        let y = avg_pool2d(&x, &g, true).unwrap();
        let gy = y.map(|v| v * 0.3 + 1.0);
        let gx = avg_pool2d_backward(&gy, x.shape(), &g, true).unwrap();
        let lhs: f64 = y.data().iter().zip(gy.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = Tensor::<f64>::from_fn4([1, 1, 4, 4], |_, _, y, x| (y * 4 + x) as f64);
        let g = ConvGeometry::square(3, 2, 1);
        let (y, arg) = max_pool2d(&x, &g).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let gx = max_pool2d_backward(&Tensor::full(&[1, 1, 2, 2], 1.0), &arg, x.shape());
        assert_eq!(gx.sum(), 4.0);
        assert_eq!(gx.at4(0, 0, 3, 3), 1.0);
    }
}
