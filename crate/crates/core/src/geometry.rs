//! Annular-to-panoramic unfolding.
//!
//! A panoramic annular lens images the full azimuth onto a ring on the
//! sensor. Unfolding maps that ring onto a rectangle whose rows index radius
//! and whose columns index azimuth:
//!
//! ```text
//! i = (r − r_inner)/(r_outer − r_inner) · height
//! j = θ/(2π) · width
//! ```
//!
//! Conventions:
//!
//! * Raw-image pixel `(px, py)` has its center at `(px, py)`; `y` points down.
//! * The angle is measured from the `+x` axis, counterclockwise on screen
//!   (`y = cy − r·sinθ`) unless `clockwise` is set (`y = cy + r·sinθ`).
//!   Column `j` sees angle `theta_offset + 2π·j/width`.
//! * Unfolded pixel `(row, col)` samples the continuous coordinate
//!   `(i, j) = (row + 0.5, col + 0.5)`. Row 0 is the inner radius unless the
//!   map is built with `flip_rows`.

use std::f64::consts::TAU;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{Raster, Sample};
use crate::util::sha256_hex;

/// Geometry of the annulus on the raw sensor image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PalCalibration {
    pub center_x: f64,
    pub center_y: f64,
    pub r_inner: f64,
    pub r_outer: f64,
    #[serde(default)]
    pub theta_offset: f64,
    #[serde(default)]
    pub clockwise: bool,
}

impl PalCalibration {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("center_x", self.center_x),
            ("center_y", self.center_y),
            ("r_inner", self.r_inner),
            ("r_outer", self.r_outer),
            ("theta_offset", self.theta_offset),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(Error::Calibration(format!(
                    "{name} must be finite, got {v}"
                )));
            }
        }
        if self.r_inner <= 0.0 {
            return Err(Error::Calibration(format!(
                "r_inner must be > 0 (0 < r_inner < r_outer), got {}",
                self.r_inner
            )));
        }
        if self.r_inner >= self.r_outer {
            return Err(Error::Calibration(format!(
                "r_inner ({}) must be < r_outer ({}) (0 < r_inner < r_outer)",
                self.r_inner, self.r_outer
            )));
        }
        if !(0.0..TAU).contains(&self.theta_offset) {
            return Err(Error::Calibration(format!(
                "theta_offset must lie in [0, 2π), got {}",
                self.theta_offset
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let c: PalCalibration =
            serde_json::from_str(s).map_err(|e| Error::Calibration(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s)
    }

    /// Stable digest of the calibration, used to key cached sample maps.
    pub fn checksum(&self) -> String {
        sha256_hex(
            serde_json::to_string(self)
                .expect("plain struct")
                .as_bytes(),
        )
    }

    fn sin_sign(&self) -> f64 {
        if self.clockwise {
            1.0
        } else {
            -1.0
        }
    }

    /// Polar coordinates `(r, θ)` of a raw-image point in this calibration's
    /// angular convention (θ in `[0, 2π)`, before the offset).
    pub fn to_polar(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.center_x;
        let dy = (y - self.center_y) * self.sin_sign();
        (dx.hypot(dy), normalize_angle(dy.atan2(dx)))
    }

    /// Raw-image point at polar coordinates `(r, θ)`.
    pub fn from_polar(&self, r: f64, theta: f64) -> (f64, f64) {
        (
            self.center_x + r * theta.cos(),
            self.center_y + self.sin_sign() * r * theta.sin(),
        )
    }
}

fn normalize_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU
    if t >= TAU {
        0.0
    } else {
        t
    }
}

fn check_out_dims(out_w: usize, out_h: usize) -> Result<()> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "unfolded size must be positive, got {out_w}×{out_h}"
        )));
    }
    Ok(())
}

/// Maps polar coordinates on the annulus to unfolded coordinates `(i, j)`.
///
/// `theta` is the raw-image angle in the calibration's convention; the
/// angular offset is subtracted and the result wrapped into `[0, 2π)`.
pub fn annular_to_unfolded(
    r: f64,
    theta: f64,
    calib: &PalCalibration,
    out_w: usize,
    out_h: usize,
) -> Result<(f64, f64)> {
    if !r.is_finite() || !theta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite polar coordinate (r={r}, θ={theta})"
        )));
    }
    check_out_dims(out_w, out_h)?;
    let i = (r - calib.r_inner) / (calib.r_outer - calib.r_inner) * out_h as f64;
    let phi = normalize_angle(theta - calib.theta_offset);
    let mut j = phi / TAU * out_w as f64;
    if j >= out_w as f64 {
        j = 0.0;
    }
    Ok((i, j))
}

/// Inverse of [`annular_to_unfolded`], returning the raw-image point.
pub fn unfolded_to_annular(
    i: f64,
    j: f64,
    calib: &PalCalibration,
    out_w: usize,
    out_h: usize,
) -> Result<(f64, f64)> {
    check_out_dims(out_w, out_h)?;
    if !i.is_finite() || !j.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "non-finite unfolded coordinate ({i}, {j})"
        )));
    }
    let r = calib.r_inner + i / out_h as f64 * (calib.r_outer - calib.r_inner);
    let theta = calib.theta_offset + TAU * j / out_w as f64;
    Ok(calib.from_polar(r, theta))
}

/// Unfolded coordinates of a raw-image point.
pub fn image_to_unfolded(
    x: f64,
    y: f64,
    calib: &PalCalibration,
    out_w: usize,
    out_h: usize,
) -> Result<(f64, f64)> {
    let (r, theta) = calib.to_polar(x, y);
    annular_to_unfolded(r, theta, calib, out_w, out_h)
}

/// Whether a raw-image point falls on a sensor pixel.
#[inline]
pub fn inside_raw(x: f64, y: f64, raw_w: usize, raw_h: usize) -> bool {
    x >= -0.5 && y >= -0.5 && x < raw_w as f64 - 0.5 && y < raw_h as f64 - 0.5
}

/// Precomputed per-pixel source coordinates for unfolding.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMap {
    pub width: usize,
    pub height: usize,
    pub raw_width: usize,
    pub raw_height: usize,
    pub flip_rows: bool,
    pub calibration: PalCalibration,
    pub src_x: Vec<f64>,
    pub src_y: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct MapHeader {
    width: usize,
    height: usize,
    raw_width: usize,
    raw_height: usize,
    flip_rows: bool,
    calibration: PalCalibration,
    calibration_checksum: String,
}

const MAP_MAGIC: &[u8; 8] = b"PALMAP01";

impl SampleMap {
    /// Builds the map with row 0 at the inner radius.
    pub fn build(
        calib: &PalCalibration,
        out_w: usize,
        out_h: usize,
        raw_w: usize,
        raw_h: usize,
    ) -> Result<Self> {
        Self::build_with(calib, out_w, out_h, raw_w, raw_h, false)
    }

    pub fn build_with(
        calib: &PalCalibration,
        out_w: usize,
        out_h: usize,
        raw_w: usize,
        raw_h: usize,
        flip_rows: bool,
    ) -> Result<Self> {
        calib.validate()?;
        check_out_dims(out_w, out_h)?;
        if raw_w == 0 || raw_h == 0 {
            return Err(Error::InvalidArgument(format!(
                "raw image size {raw_w}×{raw_h} is empty"
            )));
        }
        if !inside_raw(calib.center_x, calib.center_y, raw_w, raw_h) {
            return Err(Error::Calibration(format!(
                "annulus center ({}, {}) lies outside the {raw_w}×{raw_h} raw image",
                calib.center_x, calib.center_y
            )));
        }
        let n = out_w * out_h;
        let mut src_x = Vec::with_capacity(n);
        let mut src_y = Vec::with_capacity(n);
        let mut valid = Vec::with_capacity(n);
        for row in 0..out_h {
            let i = if flip_rows {
                (out_h - row) as f64 - 0.5
            } else {
                row as f64 + 0.5
            };
            for col in 0..out_w {
                let (x, y) = unfolded_to_annular(i, col as f64 + 0.5, calib, out_w, out_h)?;
                let (r, _) = calib.to_polar(x, y);
                let on_ring = r >= calib.r_inner && r <= calib.r_outer;
                src_x.push(x);
                src_y.push(y);
                valid.push(on_ring && inside_raw(x, y, raw_w, raw_h));
            }
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Calibration(format!(
                "annulus r ∈ [{}, {}] around ({}, {}) lies entirely outside the {raw_w}×{raw_h} raw image",
                calib.r_inner, calib.r_outer, calib.center_x, calib.center_y
            )));
        }
        Ok(SampleMap {
            width: out_w,
            height: out_h,
            raw_width: raw_w,
            raw_height: raw_h,
            flip_rows,
            calibration: *calib,
            src_x,
            src_y,
            valid,
        })
    }

    /// Continuous unfolded coordinate sampled by pixel `(row, col)`.
    pub fn pixel_coordinate(&self, row: usize, col: usize) -> (f64, f64) {
        let i = if self.flip_rows {
            (self.height - row) as f64 - 0.5
        } else {
            row as f64 + 0.5
        };
        (i, col as f64 + 0.5)
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid.iter().filter(|&&v| v).count() as f64 / self.valid.len() as f64
    }

    /// Validity as a single-channel raster (255 valid, 0 blind).
    pub fn mask_raster(&self) -> Raster<u8> {
        let data = self
            .valid
            .iter()
            .map(|&v| if v { 255 } else { 0 })
            .collect();
        Raster::from_vec(self.width, self.height, 1, data).expect("sized")
    }

    /// Writes the map as `magic · u64 header length · JSON header · f64 src_x
    /// · f64 src_y · u8 valid`, all little-endian.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = MapHeader {
            width: self.width,
            height: self.height,
            raw_width: self.raw_width,
            raw_height: self.raw_height,
            flip_rows: self.flip_rows,
            calibration: self.calibration,
            calibration_checksum: self.calibration.checksum(),
        };
        let header = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(16 + header.len() + self.valid.len() * 17);
        buf.extend_from_slice(MAP_MAGIC);
        buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header);
        for v in self.src_x.iter().chain(&self.src_y) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend(self.valid.iter().map(|&v| v as u8));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    /// Loads a cached map, rejecting it when it was built for a different
    /// calibration.
    pub fn load(path: &Path, expected: Option<&PalCalibration>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let corrupt = |what: &str| Error::InvalidArgument(format!("{}: {what}", path.display()));
        if bytes.len() < 16 || &bytes[..8] != MAP_MAGIC {
            return Err(corrupt("not a sample-map file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: MapHeader = serde_json::from_slice(body)?;
        if header.calibration.checksum() != header.calibration_checksum {
            return Err(corrupt("calibration checksum mismatch"));
        }
        if let Some(c) = expected {
            if c.checksum() != header.calibration_checksum {
                return Err(corrupt("map was built for a different calibration"));
            }
        }
        let n = header.width * header.height;
        let data = &bytes[16 + hlen..];
        if data.len() != n * 17 {
            return Err(corrupt("truncated map data"));
        }
        let read_f64 =
            |k: usize| f64::from_le_bytes(data[k * 8..k * 8 + 8].try_into().expect("8 bytes"));
        Ok(SampleMap {
            width: header.width,
            height: header.height,
            raw_width: header.raw_width,
            raw_height: header.raw_height,
            flip_rows: header.flip_rows,
            calibration: header.calibration,
            src_x: (0..n).map(read_f64).collect(),
            src_y: (n..2 * n).map(read_f64).collect(),
            valid: data[16 * n..].iter().map(|&b| b != 0).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for Interpolation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Interpolation::Nearest),
            "bilinear" => Ok(Interpolation::Bilinear),
            other => Err(Error::InvalidArgument(format!(
                "unknown interpolation {other:?} (expected nearest or bilinear)"
            ))),
        }
    }
}

/// Raw sensor image containing the annulus.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnularImage<P>(pub Raster<P>);

/// Rectangular panorama produced by [`unfold_image`].
#[derive(Clone, Debug, PartialEq)]
pub struct UnfoldedImage<P>(pub Raster<P>);

/// Resamples the annulus through `map`. Blind pixels receive `fill` in every
/// channel. Bilinear sampling clamps at the sensor border.
pub fn unfold_image<P: Sample>(
    img: &AnnularImage<P>,
    map: &SampleMap,
    interp: Interpolation,
    fill: P,
) -> Result<UnfoldedImage<P>> {
    let src = &img.0;
    if (src.width(), src.height()) != (map.raw_width, map.raw_height) {
        return Err(Error::Shape(format!(
            "image is {}×{} but the sample map was built for {}×{}",
            src.width(),
            src.height(),
            map.raw_width,
            map.raw_height
        )));
    }
    if !matches!(src.channels(), 1 | 3) {
        return Err(Error::Shape(format!(
            "expected 1 or 3 channels, got {}",
            src.channels()
        )));
    }
    let c = src.channels();
    let (w, h) = (src.width(), src.height());
    let mut out = Raster::filled(map.width, map.height, c, fill);
    for k in 0..map.width * map.height {
        if !map.valid[k] {
            continue;
        }
        let (x, y) = (map.src_x[k], map.src_y[k]);
        let dst = out.pixel_mut(k % map.width, k / map.width);
        match interp {
            Interpolation::Nearest => {
                let px = (x.round().max(0.0) as usize).min(w - 1);
                let py = (y.round().max(0.0) as usize).min(h - 1);
                dst.copy_from_slice(src.pixel(px, py));
            }
            Interpolation::Bilinear => {
                let xc = x.clamp(0.0, (w - 1) as f64);
                let yc = y.clamp(0.0, (h - 1) as f64);
                let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
                let (fx, fy) = (xc - x0 as f64, yc - y0 as f64);
                for (ch, d) in dst.iter_mut().enumerate() {
                    let top = src.get(x0, y0, ch).to_f64() * (1.0 - fx)
                        + src.get(x1, y0, ch).to_f64() * fx;
                    let bot = src.get(x0, y1, ch).to_f64() * (1.0 - fx)
                        + src.get(x1, y1, ch).to_f64() * fx;
                    *d = P::from_f64(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Ok(UnfoldedImage(out))
}
