//! Feature encoders producing four stages at strides 4, 8, 16 and 32.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{join, ConvBn, Mode, Module, Param};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EncoderVariant {
    #[serde(rename = "resnet18")]
    Resnet18,
    /// Small convolutional stack for fast tests.
    #[serde(rename = "tiny-test")]
    TinyTest,
}

impl EncoderVariant {
    /// Channel counts of the four stages.
    pub fn stage_channels(self) -> [usize; 4] {
        match self {
            EncoderVariant::Resnet18 => [64, 128, 256, 512],
            EncoderVariant::TinyTest => [16, 32, 64, 128],
        }
    }
}

impl std::str::FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet18" => Ok(EncoderVariant::Resnet18),
            "tiny-test" => Ok(EncoderVariant::TinyTest),
            other => Err(Error::InvalidArgument(format!(
                "unknown encoder {other:?} (expected resnet18 or tiny-test)"
            ))),
        }
    }
}

/// Stage strides relative to the input.
pub const STAGE_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Debug)]
pub struct TinyEncoder<T> {
    stem: ConvBn<T>,
    stages: Vec<[ConvBn<T>; 2]>,
}

impl<T: Real> TinyEncoder<T> {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let widths = EncoderVariant::TinyTest.stage_channels();
        let mut stem = ConvBn::new(3, widths[0], ConvGeometry::square(3, 2, 1), true, rng);
        stem.conv.input_grad = false;
        let mut cin = widths[0];
        let stages = widths
            .iter()
            .map(|&w| {
                let s = [
                    ConvBn::new(cin, w, ConvGeometry::square(3, 2, 1), true, rng),
                    ConvBn::new(w, w, ConvGeometry::square(3, 1, 1), true, rng),
                ];
                cin = w;
                s
            })
            .collect();
        TinyEncoder { stem, stages }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 4]> {
        let mut h = self.stem.forward(x, mode)?;
        let mut outs = Vec::with_capacity(4);
        for [a, b] in &mut self.stages {
            h = b.forward(&a.forward(&h, mode)?, mode)?;
            outs.push(h.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }

    fn backward(&mut self, grads: [Option<Tensor<T>>; 4]) -> Result<()> {
        let mut carry: Option<Tensor<T>> = None;
        for ([a, b], g) in self.stages.iter_mut().zip(grads).rev() {
            let g = sum_grads(carry.take(), g)?;
            carry = Some(a.backward(&b.backward(&g)?)?);
        }
        self.stem.backward(&carry.expect("four stages"))?;
        Ok(())
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (k, pair) in self.stages.iter().enumerate() {
            for (i, unit) in pair.iter().enumerate() {
                unit.visit(&join(prefix, &format!("stage{}.{i}", k + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.visit_mut(&join(prefix, "stem"), f);
        for (k, pair) in self.stages.iter_mut().enumerate() {
            for (i, unit) in pair.iter_mut().enumerate() {
                unit.visit_mut(&join(prefix, &format!("stage{}.{i}", k + 1)), f);
            }
        }
    }
}

fn sum_grads<T: Real>(a: Option<Tensor<T>>, b: Option<Tensor<T>>) -> Result<Tensor<T>> {
    match (a, b) {
        (Some(mut a), Some(b)) => {
            a.add_assign(&b)?;
            Ok(a)
        }
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => Err(Error::InvalidArgument(
            "encoder stage received no gradient".into(),
        )),
    }
}

/// Residual unit with two 3×3 convolutions.
#[derive(Clone, Debug)]
struct BasicBlock<T> {
    c1: ConvBn<T>,
    c2: ConvBn<T>,
    downsample: Option<ConvBn<T>>,
    out: Option<Tensor<T>>,
}

impl<T: Real> BasicBlock<T> {
    fn new<R: Rng>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        BasicBlock {
            c1: ConvBn::new(cin, cout, ConvGeometry::square(3, stride, 1), true, rng),
            c2: ConvBn::new(cout, cout, ConvGeometry::square(3, 1, 1), false, rng),
            downsample: (stride != 1 || cin != cout)
                .then(|| ConvBn::new(cin, cout, ConvGeometry::square(1, stride, 0), false, rng)),
            out: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = self.c2.forward(&self.c1.forward(x, mode)?, mode)?;
        match &mut self.downsample {
            Some(d) => y.add_assign(&d.forward(x, mode)?)?,
            None => y.add_assign(x)?,
        }
        let y = ops::relu(&y);
        if mode == Mode::Train {
            self.out = Some(y.clone());
        }
        Ok(y)
    }

    fn backward(&mut self, grad: &Tensor<T>) -> Result<Tensor<T>> {
        let out = self.out.take().ok_or_else(|| {
            Error::InvalidArgument("residual block backward without forward".into())
        })?;
        let g = ops::relu_backward(grad, &out);
        let mut gx = self.c1.backward(&self.c2.backward(&g)?)?;
        match &mut self.downsample {
            Some(d) => gx.add_assign(&d.backward(&g)?)?,
            None => gx.add_assign(&g)?,
        }
        Ok(gx)
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.c1.conv.visit(&join(prefix, "conv1"), f);
        self.c1.bn.visit(&join(prefix, "bn1"), f);
        self.c2.conv.visit(&join(prefix, "conv2"), f);
        self.c2.bn.visit(&join(prefix, "bn2"), f);
        if let Some(d) = &self.downsample {
            d.conv.visit(&join(prefix, "downsample.0"), f);
            d.bn.visit(&join(prefix, "downsample.1"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.c1.conv.visit_mut(&join(prefix, "conv1"), f);
        self.c1.bn.visit_mut(&join(prefix, "bn1"), f);
        self.c2.conv.visit_mut(&join(prefix, "conv2"), f);
        self.c2.bn.visit_mut(&join(prefix, "bn2"), f);
        if let Some(d) = &mut self.downsample {
            d.conv.visit_mut(&join(prefix, "downsample.0"), f);
            d.bn.visit_mut(&join(prefix, "downsample.1"), f);
        }
    }
}

const MAXPOOL: ConvGeometry = ConvGeometry {
    kernel: (3, 3),
    stride: (2, 2),
    padding: (1, 1),
};

/// ResNet-18 trunk. Parameter names follow the common `conv1`, `bn1`,
/// `layerK.i.*` layout so published weights can be loaded by name.
#[derive(Clone, Debug)]
pub struct ResNet18<T> {
    stem: ConvBn<T>,
    layers: Vec<[BasicBlock<T>; 2]>,
    pool_cache: Option<(Vec<u32>, Vec<usize>)>,
}

impl<T: Real> ResNet18<T> {
    fn new<R: Rng>(rng: &mut R) -> Self {
        let mut stem = ConvBn::new(3, 64, ConvGeometry::square(7, 2, 3), true, rng);
        stem.conv.input_grad = false;
        let mut cin = 64;
        let layers = EncoderVariant::Resnet18
            .stage_channels()
            .iter()
            .enumerate()
            .map(|(k, &w)| {
                let stride = if k == 0 { 1 } else { 2 };
                let l = [
                    BasicBlock::new(cin, w, stride, rng),
                    BasicBlock::new(w, w, 1, rng),
                ];
                cin = w;
                l
            })
            .collect();
        ResNet18 {
            stem,
            layers,
            pool_cache: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 4]> {
        let s = self.stem.forward(x, mode)?;
        let (mut h, arg) = ops::max_pool2d(&s, &MAXPOOL)?;
        if mode == Mode::Train {
            self.pool_cache = Some((arg, s.shape().to_vec()));
        }
        let mut outs = Vec::with_capacity(4);
        for [a, b] in &mut self.layers {
            h = b.forward(&a.forward(&h, mode)?, mode)?;
            outs.push(h.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }

    fn backward(&mut self, grads: [Option<Tensor<T>>; 4]) -> Result<()> {
        let mut carry: Option<Tensor<T>> = None;
        for ([a, b], g) in self.layers.iter_mut().zip(grads).rev() {
            let g = sum_grads(carry.take(), g)?;
            carry = Some(a.backward(&b.backward(&g)?)?);
        }
        let (arg, shape) = self
            .pool_cache
            .take()
            .ok_or_else(|| Error::InvalidArgument("encoder backward without forward".into()))?;
        let g = ops::max_pool2d_backward(&carry.expect("four stages"), &arg, &shape);
        self.stem.backward(&g)?;
        Ok(())
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.stem.conv.visit(&join(prefix, "conv1"), f);
        self.stem.bn.visit(&join(prefix, "bn1"), f);
        for (k, layer) in self.layers.iter().enumerate() {
            for (i, block) in layer.iter().enumerate() {
                block.visit(&join(prefix, &format!("layer{}.{i}", k + 1)), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.stem.conv.visit_mut(&join(prefix, "conv1"), f);
        self.stem.bn.visit_mut(&join(prefix, "bn1"), f);
        for (k, layer) in self.layers.iter_mut().enumerate() {
            for (i, block) in layer.iter_mut().enumerate() {
                block.visit_mut(&join(prefix, &format!("layer{}.{i}", k + 1)), f);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub enum Encoder<T> {
    Tiny(TinyEncoder<T>),
    Resnet18(ResNet18<T>),
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng>(variant: EncoderVariant, rng: &mut R) -> Self {
        match variant {
            EncoderVariant::TinyTest => Encoder::Tiny(TinyEncoder::new(rng)),
            EncoderVariant::Resnet18 => Encoder::Resnet18(ResNet18::new(rng)),
        }
    }

    /// Stage features at strides 4, 8, 16, 32.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 4]> {
        match self {
            Encoder::Tiny(e) => e.forward(x, mode),
            Encoder::Resnet18(e) => e.forward(x, mode),
        }
    }

    /// Consumes one optional gradient per stage output. The input gradient
    /// is not formed.
    pub fn backward(&mut self, grads: [Option<Tensor<T>>; 4]) -> Result<()> {
        match self {
            Encoder::Tiny(e) => e.backward(grads),
            Encoder::Resnet18(e) => e.backward(grads),
        }
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        match self {
            Encoder::Tiny(e) => e.visit(prefix, f),
            Encoder::Resnet18(e) => e.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        match self {
            Encoder::Tiny(e) => e.visit_mut(prefix, f),
            Encoder::Resnet18(e) => e.visit_mut(prefix, f),
        }
    }
}
