//! Random scale, horizontal flip and crop, applied jointly to image, labels
//! and blind-area mask.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{SegSample, DEFAULT_IGNORE_ID};
use crate::error::{Error, Result};
use crate::raster::{Raster, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Scale factor drawn uniformly from `[lo, hi]`.
    pub scale_range: (f64, f64),
    pub hflip_prob: f64,
    /// Output `(height, width)`.
    pub crop: (usize, usize),
    /// Label used where the crop extends past the scaled image.
    pub ignore_id: u8,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            scale_range: (0.5, 2.0),
            hflip_prob: 0.5,
            crop: (512, 512),
            ignore_id: DEFAULT_IGNORE_ID,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo.is_finite() && hi.is_finite()) || lo <= 0.0 || hi < lo {
            return Err(Error::Config(format!(
                "scale range must satisfy 0 < lo ≤ hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!(
                "hflip_prob {} outside [0, 1]",
                self.hflip_prob
            )));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// The geometric transform drawn for one sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub scale: f64,
    pub scaled_width: usize,
    pub scaled_height: usize,
    pub flipped: bool,
    /// Top-left corner of the crop in the scaled (and padded) frame.
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_width: usize,
    pub crop_height: usize,
}

fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((dst as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
}

fn resize_nearest<P: Sample>(r: &Raster<P>, w: usize, h: usize) -> Raster<P> {
    let xs: Vec<usize> = (0..w).map(|x| nearest_index(x, r.width(), w)).collect();
    let ys: Vec<usize> = (0..h).map(|y| nearest_index(y, r.height(), h)).collect();
    Raster::from_fn(w, h, r.channels(), |x, y, p| {
        p.copy_from_slice(r.pixel(xs[x], ys[y]))
    })
}

/// Half-pixel bilinear resize of an `f32` raster.
pub fn resize_bilinear_raster(r: &Raster<f32>, w: usize, h: usize) -> Raster<f32> {
    if (w, h) == (r.width(), r.height()) {
        return r.clone();
    }
    let taps = |dst: usize, src_len: usize, dst_len: usize| {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(src_len - 1);
        (lo, (lo + 1).min(src_len - 1), (s - lo as f64) as f32)
    };
    let xs: Vec<_> = (0..w).map(|x| taps(x, r.width(), w)).collect();
    let ys: Vec<_> = (0..h).map(|y| taps(y, r.height(), h)).collect();
    Raster::from_fn(w, h, r.channels(), |x, y, p| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        for (c, v) in p.iter_mut().enumerate() {
            let top = r.get(x0, y0, c) * (1.0 - fx) + r.get(x1, y0, c) * fx;
            let bot = r.get(x0, y1, c) * (1.0 - fx) + r.get(x1, y1, c) * fx;
            *v = top * (1.0 - fy) + bot * fy;
        }
    })
}

fn crop_padded<P: Sample>(r: &Raster<P>, rec: &AugmentRecord, pad: P) -> Raster<P> {
    Raster::from_fn(rec.crop_width, rec.crop_height, r.channels(), |x, y, p| {
        let (sx, sy) = (x + rec.crop_x, y + rec.crop_y);
        if sx < r.width() && sy < r.height() {
            p.copy_from_slice(r.pixel(sx, sy));
        } else {
            p.fill(pad);
        }
    })
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

/// Draws a transform for a `width×height` sample.
pub fn draw_record(
    width: usize,
    height: usize,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<AugmentRecord> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = cfg.scale_range;
    let scale = if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    };
    let flipped = rng.random::<f64>() < cfg.hflip_prob;
    let (sw, sh) = (scaled_len(width, scale), scaled_len(height, scale));
    let (ch, cw) = cfg.crop;
    let crop_x = if sw > cw {
        rng.random_range(0..=sw - cw)
    } else {
        0
    };
    let crop_y = if sh > ch {
        rng.random_range(0..=sh - ch)
    } else {
        0
    };
    Ok(AugmentRecord {
        scale,
        scaled_width: sw,
        scaled_height: sh,
        flipped,
        crop_x,
        crop_y,
        crop_width: cw,
        crop_height: ch,
    })
}

/// Applies a recorded transform to a label map (nearest sampling, padding
/// with `ignore_id`).
pub fn apply_label_transform(label: &Raster<u8>, rec: &AugmentRecord, ignore_id: u8) -> Raster<u8> {
    let mut scaled = resize_nearest(label, rec.scaled_width, rec.scaled_height);
    if rec.flipped {
        scaled = scaled.flip_horizontal();
    }
    crop_padded(&scaled, rec, ignore_id)
}

/// Applies a recorded transform to the whole sample.
pub fn apply_record(s: &SegSample, rec: &AugmentRecord, ignore_id: u8) -> SegSample {
    let mut image = resize_bilinear_raster(&s.image, rec.scaled_width, rec.scaled_height);
    if rec.flipped {
        image = image.flip_horizontal();
    }
    let valid_mask = s.valid_mask.as_ref().map(|m| {
        let mut m = resize_nearest(m, rec.scaled_width, rec.scaled_height);
        if rec.flipped {
            m = m.flip_horizontal();
        }
        crop_padded(&m, rec, 0)
    });
    SegSample {
        id: s.id.clone(),
        image: crop_padded(&image, rec, 0.0),
        label: apply_label_transform(&s.label, rec, ignore_id),
        valid_mask,
    }
}

/// Random scale, flip and crop of one sample, deterministic in `seed`.
pub fn augment(
    s: &SegSample,
    seed: u64,
    cfg: &AugmentConfig,
) -> Result<(SegSample, AugmentRecord)> {
    let rec = draw_record(s.width(), s.height(), seed, cfg)?;
    Ok((apply_record(s, &rec, cfg.ignore_id), rec))
}
