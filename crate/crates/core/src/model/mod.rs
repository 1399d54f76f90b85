//! The segmentation network: encoder, 1×1 lateral projections, EDAPP
//! context head and a bilinear decoder.
//!
//! ```text
//! image ─ encoder ─┬─ s4 ─ lateral4 ──────────────────────────┐
//!                  ├─ s8 ─ lateral8 ─────────────────┐        │
//!                  ├─ s16 ─ lateral16 ────────┐      │        │
//!                  └─ s32 ─ EDAPP ─ ×2 ─ (+) step ─ (+) step ─ (+) fuse ─ classifier ─ ×4
//! ```
//!
//! Each decoder step adds the lateral feature, applies a 3×3 convolution
//! block, and upsamples ×2. The last fusion at stride 4 skips the upsample;
//! logits are computed there and resized to the input.

mod checkpoint;
pub mod encoder;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use encoder::{Encoder, EncoderVariant, STAGE_STRIDES};

use crate::edapp::{Edapp, EdappConfig};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Mode, Module, Param, PreActConv};
use crate::ops::{self, ConvGeometry};
use crate::tensor::{Real, Tensor};
use crate::util::sha256_hex;

/// Parameter paths starting with this prefix belong to the encoder group.
pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub decoder_channels: usize,
    pub edapp: EdappConfig,
    pub encoder_variant: EncoderVariant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained_encoder: Option<PathBuf>,
}

impl ModelConfig {
    /// Full-size network on a ResNet-18 trunk.
    pub fn resnet18(num_classes: usize) -> Self {
        Self::with_encoder(EncoderVariant::Resnet18, num_classes, 128, 128)
    }

    /// Small network for tests and quick experiments.
    pub fn tiny(num_classes: usize) -> Self {
        Self::with_encoder(EncoderVariant::TinyTest, num_classes, 16, 16)
    }

    fn with_encoder(
        variant: EncoderVariant,
        num_classes: usize,
        decoder: usize,
        branch: usize,
    ) -> Self {
        let top = variant.stage_channels()[3];
        ModelConfig {
            num_classes,
            decoder_channels: decoder,
            edapp: EdappConfig::new(top, branch, decoder),
            encoder_variant: variant,
            pretrained_encoder: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "num_classes must be ≥ 2, got {}",
                self.num_classes
            )));
        }
        if self.decoder_channels < 8 {
            return Err(Error::Config(format!(
                "decoder_channels must be ≥ 8, got {}",
                self.decoder_channels
            )));
        }
        self.edapp.validate()?;
        let top = self.encoder_variant.stage_channels()[3];
        if self.edapp.in_channels != top {
            return Err(Error::Config(format!(
                "edapp.in_channels must equal the encoder's last stage width {top}, got {}",
                self.edapp.in_channels
            )));
        }
        if self.edapp.out_channels != self.decoder_channels {
            return Err(Error::Config(format!(
                "edapp.out_channels ({}) must equal decoder_channels ({}) so the context feature can be fused",
                self.edapp.out_channels, self.decoder_channels
            )));
        }
        Ok(())
    }

    /// SHA-256 of the architecture, ignoring where pretrained weights come from.
    pub fn hash(&self) -> String {
        let arch = ModelConfig {
            pretrained_encoder: None,
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&arch).expect("serializable"))
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Strides with a registered lateral projection.
pub const LATERAL_STRIDES: [usize; 3] = [4, 8, 16];

#[derive(Clone, Debug)]
struct ForwardCache {
    height: usize,
    width: usize,
}

/// The full network, generic over the scalar type.
#[derive(Clone, Debug)]
pub struct SegNet<T> {
    cfg: ModelConfig,
    encoder: Encoder<T>,
    edapp: Edapp<T>,
    /// Indexed like [`LATERAL_STRIDES`].
    laterals: [Conv2d<T>; 3],
    /// Fusion blocks at strides 16, 8 and 4.
    decoder: [PreActConv<T>; 3],
    classifier: PreActConv<T>,
    cache: Option<ForwardCache>,
}

/// Builds a randomly initialized network (and loads pretrained encoder
/// weights when the config names a file). The same seed gives the same
/// parameters.
pub fn build_model<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<SegNet<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(cfg.encoder_variant, &mut rng);
    let edapp = Edapp::new(&cfg.edapp, &mut rng)?;
    let widths = cfg.encoder_variant.stage_channels();
    let d = cfg.decoder_channels;
    let pw = ConvGeometry::square(1, 1, 0);
    let laterals = [0, 1, 2].map(|k| Conv2d::new(widths[k], d, pw, true, &mut rng));
    let decoder = [0, 1, 2]
        .map(|_| PreActConv::new(d, d, ConvGeometry::square(3, 1, 1), false, false, &mut rng));
    let classifier = PreActConv::new(d, cfg.num_classes, pw, true, false, &mut rng);
    let mut model = SegNet {
        cfg: cfg.clone(),
        encoder,
        edapp,
        laterals,
        decoder,
        classifier,
        cache: None,
    };
    if let Some(path) = &cfg.pretrained_encoder {
        model.load_pretrained_encoder(path)?;
    }
    Ok(model)
}

/// Adds `deep` and `lateral` and applies the convolution block, without
/// upsampling.
pub fn decoder_fuse<T: Real>(
    block: &mut PreActConv<T>,
    deep: &Tensor<T>,
    lateral: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    if deep.shape() != lateral.shape() {
        return Err(Error::Shape(format!(
            "decoder inputs differ: deep {:?} vs lateral {:?}",
            deep.shape(),
            lateral.shape()
        )));
    }
    block.forward(&deep.add(lateral)?, mode)
}

/// One decoder step: additive fusion, convolution block, bilinear ×2.
pub fn decoder_step<T: Real>(
    block: &mut PreActConv<T>,
    deep: &Tensor<T>,
    lateral: &Tensor<T>,
    mode: Mode,
) -> Result<Tensor<T>> {
    ops::upsample2(&decoder_fuse(block, deep, lateral, mode)?)
}

impl<T: Real> SegNet<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder_mut(&mut self) -> &mut Encoder<T> {
        &mut self.encoder
    }

    pub fn edapp_mut(&mut self) -> &mut Edapp<T> {
        &mut self.edapp
    }

    /// Decoder block `k` (strides 16, 8, 4 for k = 0, 1, 2).
    pub fn decoder_block_mut(&mut self, k: usize) -> Option<&mut PreActConv<T>> {
        self.decoder.get_mut(k)
    }

    /// Runs the encoder alone.
    pub fn encode(&mut self, x: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 4]> {
        self.check_input(x)?;
        self.encoder.forward(x, mode)
    }

    /// Projects the encoder feature at `stride` to `decoder_channels`.
    pub fn lateral_project(
        &mut self,
        stride: usize,
        feature: &Tensor<T>,
        mode: Mode,
    ) -> Result<Tensor<T>> {
        let k = LATERAL_STRIDES
            .iter()
            .position(|&s| s == stride)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                "no lateral projection registered for stride {stride} (have {LATERAL_STRIDES:?})"
            ))
            })?;
        self.laterals[k].forward(feature, mode)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.try_dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!(
                "expected a 3-channel image batch, got {c} channels"
            )));
        }
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            let up = |v: usize| v.div_ceil(32).max(1) * 32;
            return Err(Error::Shape(format!(
                "input {h}×{w} is not divisible by 32; pad it to {}×{}",
                up(h),
                up(w)
            )));
        }
        Ok(())
    }

    /// Per-pixel class logits `N×K×H×W`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let (_, _, h, w) = x.dims4();
        let stages = self.encoder.forward(x, mode)?;
        let context = self.edapp.forward(&stages[3], mode)?;
        let mut deep = ops::upsample2(&context)?;
        for (k, lat_idx) in [2usize, 1].into_iter().enumerate() {
            let lateral = self.laterals[lat_idx].forward(&stages[lat_idx], mode)?;
            deep = decoder_step(&mut self.decoder[k], &deep, &lateral, mode)?;
        }
        let lateral = self.laterals[0].forward(&stages[0], mode)?;
        let fused = decoder_fuse(&mut self.decoder[2], &deep, &lateral, mode)?;
        let logits = self.classifier.forward(&fused, mode)?;
        if mode == Mode::Train {
            self.cache = Some(ForwardCache {
                height: h,
                width: w,
            });
        }
        ops::resize_bilinear(&logits, h, w)
    }

    /// Accumulates parameter gradients for `grad` (shaped like the logits of
    /// the last training-mode forward).
    pub fn backward(&mut self, grad: &Tensor<T>) -> Result<()> {
        let ForwardCache {
            height: h,
            width: w,
        } = self.cache.take().ok_or_else(|| {
            Error::InvalidArgument("backward without a training-mode forward".into())
        })?;
        let g = ops::resize_bilinear_backward(grad, h / 4, w / 4)?;
        let g = self.decoder[2].backward(&self.classifier.backward(&g)?)?;
        let g4 = self.laterals[0].backward(&g)?;
        let mut g_deep = g;
        let mut lateral_grads = vec![g4];
        for (k, (lat_idx, stride)) in [(1usize, 8usize), (2, 16)].into_iter().enumerate() {
            let up = ops::resize_bilinear_backward(&g_deep, h / stride, w / stride)?;
            let g = self.decoder[1 - k].backward(&up)?;
            lateral_grads.push(self.laterals[lat_idx].backward(&g)?);
            g_deep = g;
        }
        let g_ctx = ops::resize_bilinear_backward(&g_deep, h / 32, w / 32)?;
        let g32 = self.edapp.backward(&g_ctx)?;
        let [g4, g8, g16]: [Tensor<T>; 3] = lateral_grads.try_into().expect("three laterals");
        self.encoder
            .backward([Some(g4), Some(g8), Some(g16), Some(g32)])
    }

    /// Trainable parameter paths split into `(encoder, head)`.
    pub fn param_groups(&self) -> (Vec<String>, Vec<String>) {
        let mut enc = Vec::new();
        let mut head = Vec::new();
        self.visit("", &mut |p, t| {
            if t.trainable {
                if p.starts_with(ENCODER_PREFIX) {
                    enc.push(p.to_string());
                } else {
                    head.push(p.to_string());
                }
            }
        });
        (enc, head)
    }

    /// Every parameter and buffer as `f32`.
    pub fn state_dict(&self) -> BTreeMap<String, Tensor<f32>> {
        let mut out = BTreeMap::new();
        self.visit("", &mut |p, t| {
            out.insert(p.to_string(), t.value.cast());
        });
        out
    }

    /// Replaces every parameter and buffer. Fails without modifying the
    /// model when paths or shapes disagree, listing the offending paths.
    pub fn load_state_dict(&mut self, state: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        let mut known = std::collections::BTreeSet::new();
        self.visit("", &mut |p, t| {
            known.insert(p.to_string());
            match state.get(p) {
                None => missing.push(p.to_string()),
                Some(v) if v.shape() != t.value.shape() => mismatched.push(format!(
                    "{p} (model {:?}, file {:?})",
                    t.value.shape(),
                    v.shape()
                )),
                Some(_) => {}
            }
        });
        let unexpected: Vec<&String> = state.keys().filter(|k| !known.contains(*k)).collect();
        if !(missing.is_empty() && mismatched.is_empty() && unexpected.is_empty()) {
            return Err(Error::Checkpoint(state_mismatch(
                &mismatched,
                &missing,
                &unexpected,
            )));
        }
        self.visit_mut("", &mut |p, t| t.value = state[p].cast());
        Ok(())
    }

    /// Loads encoder weights from a flat tensor file. Paths may carry the
    /// `encoder.` prefix or not; entries that are not encoder parameters
    /// (e.g. a classification head) are ignored.
    pub fn load_pretrained_encoder(&mut self, path: &Path) -> Result<()> {
        let ck = Checkpoint::read(path)?;
        let lookup = |p: &str| {
            let bare = p.strip_prefix(ENCODER_PREFIX).unwrap_or(p);
            ck.tensors.get(p).or_else(|| ck.tensors.get(bare))
        };
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        self.encoder.visit(
            ENCODER_PREFIX.trim_end_matches('.'),
            &mut |p, t| match lookup(p) {
                None => missing.push(p.to_string()),
                Some(v) if v.shape() != t.value.shape() => mismatched.push(format!(
                    "{p} (model {:?}, file {:?})",
                    t.value.shape(),
                    v.shape()
                )),
                Some(_) => {}
            },
        );
        if !(missing.is_empty() && mismatched.is_empty()) {
            return Err(Error::Checkpoint(format!(
                "pretrained encoder {}: {}",
                path.display(),
                state_mismatch(&mismatched, &missing, &[])
            )));
        }
        self.encoder
            .visit_mut(ENCODER_PREFIX.trim_end_matches('.'), &mut |p, t| {
                t.value = lookup(p).expect("checked").cast()
            });
        Ok(())
    }
}

fn state_mismatch(mismatched: &[String], missing: &[String], unexpected: &[&String]) -> String {
    let mut parts = Vec::new();
    if !mismatched.is_empty() {
        parts.push(format!("shape mismatch at {}", mismatched.join(", ")));
    }
    if !missing.is_empty() {
        parts.push(format!("missing {}", missing.join(", ")));
    }
    if !unexpected.is_empty() {
        let names: Vec<&str> = unexpected.iter().map(|s| s.as_str()).collect();
        parts.push(format!("unexpected {}", names.join(", ")));
    }
    parts.join("; ")
}

impl<T: Real> Module<T> for SegNet<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.encoder.visit(&join(prefix, "encoder"), f);
        self.edapp.visit(&join(prefix, "edapp"), f);
        for (l, s) in self.laterals.iter().zip(LATERAL_STRIDES) {
            l.visit(&join(prefix, &format!("lateral{s}")), f);
        }
        for (k, d) in self.decoder.iter().enumerate() {
            d.visit(&join(prefix, &format!("decoder.{k}")), f);
        }
        self.classifier.visit(&join(prefix, "classifier"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.encoder.visit_mut(&join(prefix, "encoder"), f);
        self.edapp.visit_mut(&join(prefix, "edapp"), f);
        for (l, s) in self.laterals.iter_mut().zip(LATERAL_STRIDES) {
            l.visit_mut(&join(prefix, &format!("lateral{s}")), f);
        }
        for (k, d) in self.decoder.iter_mut().enumerate() {
            d.visit_mut(&join(prefix, &format!("decoder.{k}")), f);
        }
        self.classifier.visit_mut(&join(prefix, "classifier"), f);
    }
}

/// Writes the model's weights with `meta`.
pub fn save_checkpoint<T: Real>(
    model: &SegNet<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    Checkpoint {
        model: Some(model.cfg.clone()),
        config_hash: Some(model.cfg.hash()),
        meta: meta.clone(),
        tensors: model.state_dict(),
        optimizer: BTreeMap::new(),
    }
    .write(path)
}

/// Rebuilds a model from a checkpoint.
///
/// With `expected`, the checkpoint's config hash must match unless
/// `allow_config_mismatch` is set, in which case the model is built from
/// `expected` and the weights must still fit it.
pub fn load_checkpoint<T: Real>(
    path: &Path,
    expected: Option<&ModelConfig>,
    allow_config_mismatch: bool,
) -> Result<(SegNet<T>, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    let cfg = match (expected, &ck.model) {
        (Some(want), stored) => {
            let stored_hash = ck
                .config_hash
                .clone()
                .or_else(|| stored.as_ref().map(|c| c.hash()));
            if stored_hash.as_deref() != Some(want.hash().as_str()) && !allow_config_mismatch {
                return Err(Error::Checkpoint(format!(
                    "{}: model config hash {} does not match the requested config {}",
                    path.display(),
                    stored_hash.unwrap_or_else(|| "<none>".into()),
                    want.hash()
                )));
            }
            want.clone()
        }
        (None, Some(stored)) => stored.clone(),
        (None, None) => {
            return Err(Error::Checkpoint(format!(
                "{} carries no model config; pass one explicitly",
                path.display()
            )))
        }
    };
    let mut model = build_model(
        &ModelConfig {
            pretrained_encoder: None,
            ..cfg
        },
        0,
    )?;
    model.load_state_dict(&ck.tensors)?;
    Ok((model, ck))
}
