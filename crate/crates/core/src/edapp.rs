//! Efficient Deep Aggregation Pyramid Pooling (EDAPP).
//!
//! A cascade of context branches over the same input `x`:
//!
//! ```text
//! y₁   = C1×1(x)
//! y_k  = C1×3(C3×1(UP(C1×1(P_k(x))) + y_{k−1}))      1 < k < n
//! y_n  = C3×3(UP(C1×1(P_global(x))) + y_{n−1})
//! out  = C1×1_compress(C1×1_blend(concat(y₁..y_n))) + C1×1_skip(x)
//! ```
//!
//! `P_k` is exclusive-padding average pooling with kernel `2ᵏ+1` and stride
//! `2ᵏ⁻¹` (5/2, 9/4, 17/8 by default), `UP` is bilinear resizing back to the
//! input resolution. Every convolution is preceded by batch-norm and a
//! rectifier unless the head is built in linear mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, Mode, Module, Param, PreActConv};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

/// One intermediate average-pooling branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolSpec {
    fn geometry(&self) -> ConvGeometry {
        ConvGeometry::square(self.kernel, self.stride, self.padding)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdappConfig {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub out_channels: usize,
    #[serde(default = "default_pool_specs")]
    pub pool_specs: Vec<PoolSpec>,
    #[serde(default = "default_true")]
    pub include_global: bool,
    /// Drop batch-norm and rectifiers so every branch is linear in `x`.
    #[serde(default)]
    pub linear: bool,
}

fn default_true() -> bool {
    true
}

/// Kernels 5, 9, 17 with strides 2, 4, 8 and "same"-style padding.
pub fn default_pool_specs() -> Vec<PoolSpec> {
    (2..=4)
        .map(|k| {
            let kernel = (1 << k) + 1;
            PoolSpec {
                kernel,
                stride: 1 << (k - 1),
                padding: kernel / 2,
            }
        })
        .collect()
}

impl EdappConfig {
    pub fn new(in_channels: usize, branch_channels: usize, out_channels: usize) -> Self {
        EdappConfig {
            in_channels,
            branch_channels,
            out_channels,
            pool_specs: default_pool_specs(),
            include_global: true,
            linear: false,
        }
    }

    /// Total branch count `n`, including the unpooled and global branches.
    pub fn num_branches(&self) -> usize {
        1 + self.pool_specs.len() + usize::from(self.include_global)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "EDAPP channel widths must be positive".into(),
            ));
        }
        for (k, p) in self.pool_specs.iter().enumerate() {
            if p.kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "EDAPP branch {}: kernel {} is not odd",
                    k + 2,
                    p.kernel
                )));
            }
            if p.stride == 0 || p.kernel < p.stride || 2 * p.padding > p.kernel {
                return Err(Error::Config(format!(
                    "EDAPP branch {}: pooling {p:?} needs kernel ≥ stride ≥ 1 and padding ≤ kernel/2",
                    k + 2
                )));
            }
        }
        Ok(())
    }

    /// Errors when some pooling branch does not fit an `h×w` input.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        for (k, p) in self.pool_specs.iter().enumerate() {
            if p.geometry().output_size(h, w).is_err() {
                return Err(Error::Shape(format!(
                    "EDAPP branch {} (avg-pool kernel {}, stride {}, padding {}) does not fit a {h}×{w} input",
                    k + 2,
                    p.kernel,
                    p.stride,
                    p.padding
                )));
            }
        }
        Ok(())
    }
}

/// Average pooling with a square window.
pub fn avg_pool<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
    exclude_pad: bool,
) -> Result<Tensor<T>> {
    ops::avg_pool2d(
        x,
        &ConvGeometry::square(kernel, stride, padding),
        exclude_pad,
    )
}

const GEOM_3X1: ConvGeometry = ConvGeometry {
    kernel: (3, 1),
    stride: (1, 1),
    padding: (1, 0),
};
const GEOM_1X3: ConvGeometry = ConvGeometry {
    kernel: (1, 3),
    stride: (1, 1),
    padding: (0, 1),
};

/// A 3×1 convolution followed by a 1×3 convolution, both zero-padded to
/// keep the spatial size. `w31` is `C×C×3×1`, `w13` is `C×C×1×3`.
pub fn separable_blend<T: Real>(
    x: &Tensor<T>,
    w31: &Tensor<T>,
    w13: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, c, _, _) = x.try_dims4()?;
    if w31.shape() != [c, c, 3, 1] || w13.shape() != [c, c, 1, 3] {
        return Err(Error::Shape(format!(
            "separable blend over {c} channels needs {:?} and {:?} kernels, got {:?} and {:?}",
            [c, c, 3, 1],
            [c, c, 1, 3],
            w31.shape(),
            w13.shape()
        )));
    }
    let mid = ops::conv2d(x, w31, None, &GEOM_3X1)?;
    ops::conv2d(&mid, w13, None, &GEOM_1X3)
}

#[derive(Clone, Debug)]
struct PoolBranch<T> {
    spec: PoolSpec,
    proj: PreActConv<T>,
    conv3x1: PreActConv<T>,
    conv1x3: PreActConv<T>,
}

#[derive(Clone, Debug)]
struct GlobalBranch<T> {
    proj: PreActConv<T>,
    conv3x3: PreActConv<T>,
}

#[derive(Clone, Debug)]
struct Cache {
    input_shape: Vec<usize>,
    pooled_shapes: Vec<(usize, usize)>,
}

/// The EDAPP head with its parameters.
#[derive(Clone, Debug)]
pub struct Edapp<T> {
    cfg: EdappConfig,
    scale0: PreActConv<T>,
    pools: Vec<PoolBranch<T>>,
    global: Option<GlobalBranch<T>>,
    blend: PreActConv<T>,
    compress: PreActConv<T>,
    skip: PreActConv<T>,
    cache: Option<Cache>,
}

impl<T: Real> Edapp<T> {
    pub fn new<R: Rng>(cfg: &EdappConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (cin, cb, cout, lin) = (
            cfg.in_channels,
            cfg.branch_channels,
            cfg.out_channels,
            cfg.linear,
        );
        let pw = ConvGeometry::square(1, 1, 0);
        let scale0 = PreActConv::new(cin, cb, pw, false, lin, rng);
        let pools = cfg
            .pool_specs
            .iter()
            .map(|&spec| PoolBranch {
                spec,
                proj: PreActConv::new(cin, cb, pw, false, lin, rng),
                conv3x1: PreActConv::new(cb, cb, GEOM_3X1, false, lin, rng),
                conv1x3: PreActConv::new(cb, cb, GEOM_1X3, false, lin, rng),
            })
            .collect();
        let global = cfg.include_global.then(|| GlobalBranch {
            proj: PreActConv::new(cin, cb, pw, false, lin, rng),
            conv3x3: PreActConv::new(cb, cb, ConvGeometry::square(3, 1, 1), false, lin, rng),
        });
        let n = cfg.num_branches();
        Ok(Edapp {
            cfg: cfg.clone(),
            scale0,
            pools,
            global,
            blend: PreActConv::new(n * cb, 2 * cb, pw, false, lin, rng),
            compress: PreActConv::new(2 * cb, cout, pw, false, lin, rng),
            skip: PreActConv::new(cin, cout, pw, false, lin, rng),
            cache: None,
        })
    }

    pub fn config(&self) -> &EdappConfig {
        &self.cfg
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.try_dims4()?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "EDAPP expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        self.cfg.check_input(h, w)?;
        let mut ys = vec![self.scale0.forward(x, mode)?];
        let mut pooled_shapes = Vec::new();
        for b in &mut self.pools {
            let pooled = ops::avg_pool2d(x, &b.spec.geometry(), true)?;
            let (_, _, ph, pw) = pooled.dims4();
            pooled_shapes.push((ph, pw));
            let up = ops::resize_bilinear(&b.proj.forward(&pooled, mode)?, h, w)?;
            let fused = up.add(ys.last().expect("non-empty"))?;
            let y = b.conv1x3.forward(&b.conv3x1.forward(&fused, mode)?, mode)?;
            ys.push(y);
        }
        if let Some(g) = &mut self.global {
            let pooled = ops::global_avg_pool(x)?;
            let up = ops::resize_bilinear(&g.proj.forward(&pooled, mode)?, h, w)?;
            let fused = up.add(ys.last().expect("non-empty"))?;
            ys.push(g.conv3x3.forward(&fused, mode)?);
        }
        let refs: Vec<&Tensor<T>> = ys.iter().collect();
        let cat = Tensor::concat_channels(&refs)?;
        let mut out = self
            .compress
            .forward(&self.blend.forward(&cat, mode)?, mode)?;
        out.add_assign(&self.skip.forward(x, mode)?)?;
        if mode == Mode::Train {
            self.cache = Some(Cache {
                input_shape: x.shape().to_vec(),
                pooled_shapes,
            });
        }
        Ok(out)
    }

    /// Backpropagates `grad` (shaped like the output) and returns the input
    /// gradient.
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::InvalidArgument("EDAPP backward without a training forward".into())
        })?;
        let (h, w) = (cache.input_shape[2], cache.input_shape[3]);
        let mut gx = self.skip.backward(grad)?;
        let gcat = self.blend.backward(&self.compress.backward(grad)?)?;
        let sizes = vec![self.cfg.branch_channels; self.cfg.num_branches()];
        let mut gys = gcat.split_channels(&sizes)?;

        // Walk the cascade from the last branch; `carry` is the gradient that
        // flows into y_{k−1} through the residual sum in branch k.
        let mut carry: Option<Tensor<T>> = None;
        if let Some(g) = &mut self.global {
            let gy = gys.pop().expect("global branch gradient");
            let gfused = g.conv3x3.backward(&gy)?;
            let gproj = ops::resize_bilinear_backward(&gfused, 1, 1)?;
            let gpooled = g.proj.backward(&gproj)?;
            gx.add_assign(&ops::global_avg_pool_backward(&gpooled, &cache.input_shape))?;
            carry = Some(gfused);
        }
        for (b, &(ph, pw)) in self.pools.iter_mut().zip(&cache.pooled_shapes).rev() {
            let mut gy = gys.pop().expect("pool branch gradient");
            if let Some(c) = &carry {
                gy.add_assign(c)?;
            }
            let gfused = b.conv3x1.backward(&b.conv1x3.backward(&gy)?)?;
            let gproj = ops::resize_bilinear_backward(&gfused, ph, pw)?;
            let gpooled = b.proj.backward(&gproj)?;
            gx.add_assign(&ops::avg_pool2d_backward(
                &gpooled,
                &cache.input_shape,
                &b.spec.geometry(),
                true,
            )?)?;
            carry = Some(gfused);
        }
        let mut gy0 = gys.pop().expect("first branch gradient");
        if let Some(c) = &carry {
            gy0.add_assign(c)?;
        }
        gx.add_assign(&self.scale0.backward(&gy0)?)?;
        debug_assert_eq!((h, w), (gx.dims4().2, gx.dims4().3));
        Ok(gx)
    }

    /// `(path, element count)` for every trainable tensor.
    pub fn param_table(&self) -> Vec<(String, usize)> {
        let mut rows = Vec::new();
        self.visit("", &mut |p, t| {
            if t.trainable {
                rows.push((p.to_string(), t.value.numel()))
            }
        });
        rows
    }
}

impl<T: Real> Module<T> for Edapp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.scale0.visit(&join(prefix, "scale0"), f);
        for b in &self.pools {
            let p = join(prefix, &format!("pool{}", b.spec.kernel));
            b.proj.visit(&join(&p, "proj"), f);
            b.conv3x1.visit(&join(&p, "conv3x1"), f);
            b.conv1x3.visit(&join(&p, "conv1x3"), f);
        }
        if let Some(g) = &self.global {
            let p = join(prefix, "global");
            g.proj.visit(&join(&p, "proj"), f);
            g.conv3x3.visit(&join(&p, "conv3x3"), f);
        }
        self.blend.visit(&join(prefix, "blend"), f);
        self.compress.visit(&join(prefix, "compress"), f);
        self.skip.visit(&join(prefix, "skip"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.scale0.visit_mut(&join(prefix, "scale0"), f);
        for b in &mut self.pools {
            let p = join(prefix, &format!("pool{}", b.spec.kernel));
            b.proj.visit_mut(&join(&p, "proj"), f);
            b.conv3x1.visit_mut(&join(&p, "conv3x1"), f);
            b.conv1x3.visit_mut(&join(&p, "conv1x3"), f);
        }
        if let Some(g) = &mut self.global {
            let p = join(prefix, "global");
            g.proj.visit_mut(&join(&p, "proj"), f);
            g.conv3x3.visit_mut(&join(&p, "conv3x3"), f);
        }
        self.blend.visit_mut(&join(prefix, "blend"), f);
        self.compress.visit_mut(&join(prefix, "compress"), f);
        self.skip.visit_mut(&join(prefix, "skip"), f);
    }
}

/// Runs the head in the given mode.
pub fn edapp_forward<T: Real>(x: &Tensor<T>, head: &mut Edapp<T>, mode: Mode) -> Result<Tensor<T>> {
    head.forward(x, mode)
}
