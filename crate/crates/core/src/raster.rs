//! Interleaved `H×W×C` pixel buffers and PNG I/O.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageBuffer, RgbImage};

use crate::error::{Error, Result};

/// Channel value type of a [`Raster`].
pub trait Sample: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    /// Converts back, rounding and saturating for integer types.
    fn from_f64(v: f64) -> Self;
}

impl Sample for u8 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

impl Sample for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// Row-major, channel-interleaved image.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster<P> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<P>,
}

impl<P: Sample> Raster<P> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![P::default(); width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: P) -> Self {
        Raster {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<P>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "empty raster {width}×{height}×{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "raster {width}×{height}×{channels} needs {} samples, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(Raster {
            width,
            height,
            channels,
            data,
        })
    }

    /// Builds a raster from a per-pixel closure returning all channels.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [P]),
    ) -> Self {
        let mut r = Raster::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                f(x, y, r.pixel_mut(x, y));
            }
        }
        r
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[P] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [P] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[P] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [P] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> P {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn map<Q: Sample>(&self, f: impl Fn(P) -> Q) -> Raster<Q> {
        Raster {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Mirrors columns: `x → W−1−x`.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.pixel_mut(self.width - 1 - x, y)
                    .copy_from_slice(self.pixel(x, y));
            }
        }
        out
    }
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a PNG as 8-bit gray (1 channel) or RGB (3 channels).
/// Alpha is dropped and 16-bit samples are reduced.
pub fn load_png(path: &Path) -> Result<Raster<u8>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA8(_)
    );
    if gray {
        let g = img.to_luma8();
        Raster::from_vec(g.width() as usize, g.height() as usize, 1, g.into_raw())
    } else {
        let rgb = img.to_rgb8();
        Raster::from_vec(
            rgb.width() as usize,
            rgb.height() as usize,
            3,
            rgb.into_raw(),
        )
    }
}

pub fn save_png(raster: &Raster<u8>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let (w, h) = (raster.width as u32, raster.height as u32);
    match raster.channels {
        1 => {
            let img: GrayImage = ImageBuffer::from_raw(w, h, raster.data.clone()).expect("sized");
            img.save(path).map_err(|e| image_err(path, e))
        }
        3 => {
            let img: RgbImage = ImageBuffer::from_raw(w, h, raster.data.clone()).expect("sized");
            img.save(path).map_err(|e| image_err(path, e))
        }
        c => Err(Error::InvalidArgument(format!(
            "cannot write a {c}-channel PNG"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Raster::from_fn(5, 3, 1, |x, y, p| p[0] = (x * 40 + y) as u8);
        let rgb = Raster::from_fn(4, 2, 3, |x, y, p| {
            p.copy_from_slice(&[x as u8, y as u8, 200]);
        });
        let gp = dir.path().join("g.png");
        let cp = dir.path().join("sub/c.png");
        save_png(&gray, &gp).unwrap();
        save_png(&rgb, &cp).unwrap();
        assert_eq!(load_png(&gp).unwrap(), gray);
        assert_eq!(load_png(&cp).unwrap(), rgb);
    }

    #[test]
    fn missing_png_names_path() {
        let err = load_png(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }

    #[test]
    fn flip_is_involution() {
        let r = Raster::from_fn(7, 2, 3, |x, y, p| p[0] = (x + 10 * y) as u8);
        assert_eq!(r.flip_horizontal().get(0, 1, 0), 16);
        assert_eq!(r.flip_horizontal().flip_horizontal(), r);
    }
}
