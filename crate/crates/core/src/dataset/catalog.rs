use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

/// Label value excluded from loss and metrics.
pub const DEFAULT_IGNORE_ID: u8 = 255;

/// Color used for ignored and blind pixels.
pub const IGNORE_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
    pub color: [u8; 3],
}

/// Ordered class list with display colors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub entries: Vec<ClassEntry>,
    #[serde(default = "default_ignore")]
    pub ignore_id: Option<u8>,
}

fn default_ignore() -> Option<u8> {
    Some(DEFAULT_IGNORE_ID)
}

impl Default for ClassCatalog {
    /// Track (green), field (red), others (gray).
    fn default() -> Self {
        let entry = |id, name: &str, color| ClassEntry {
            id,
            name: name.to_string(),
            color,
        };
        ClassCatalog {
            entries: vec![
                entry(0, "track", [0, 255, 0]),
                entry(1, "field", [255, 0, 0]),
                entry(2, "others", [128, 128, 128]),
            ],
            ignore_id: Some(DEFAULT_IGNORE_ID),
        }
    }
}

impl ClassCatalog {
    pub fn new(entries: Vec<ClassEntry>, ignore_id: Option<u8>) -> Result<Self> {
        let c = ClassCatalog { entries, ignore_id };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.len() < 2 {
            return Err(Error::Config(
                "a class catalog needs at least two classes".into(),
            ));
        }
        let mut names = HashSet::new();
        let mut colors = HashSet::new();
        for (k, e) in self.entries.iter().enumerate() {
            if e.id as usize != k {
                return Err(Error::Config(format!(
                    "class ids must be 0..K−1 in order; entry {k} has id {}",
                    e.id
                )));
            }
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate class name {:?}", e.name)));
            }
            if !colors.insert(e.color) {
                return Err(Error::Config(format!(
                    "duplicate class color {:?}",
                    e.color
                )));
            }
            if self.ignore_id.is_some() && e.color == IGNORE_COLOR {
                return Err(Error::Config(format!(
                    "class {:?} uses the reserved ignore color {:?}",
                    e.name, IGNORE_COLOR
                )));
            }
        }
        if let Some(ig) = self.ignore_id {
            if (ig as usize) < self.entries.len() {
                return Err(Error::Config(format!(
                    "ignore id {ig} collides with a class id"
                )));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.name.clone()).collect()
    }

    /// Whether `v` is a class id or the ignore id.
    pub fn is_known(&self, v: u8) -> bool {
        (v as usize) < self.entries.len() || Some(v) == self.ignore_id
    }

    /// Renders a label map in catalog colors. Ignored and unknown values
    /// become black.
    pub fn colorize(&self, label: &Raster<u8>) -> Raster<u8> {
        Raster::from_fn(label.width(), label.height(), 3, |x, y, p| {
            let v = label.get(x, y, 0) as usize;
            let color = self.entries.get(v).map(|e| e.color).unwrap_or(IGNORE_COLOR);
            p.copy_from_slice(&color);
        })
    }

    /// Inverse of [`ClassCatalog::colorize`]; black decodes to the ignore id
    /// when one is configured.
    pub fn decode_color(&self, rgb: &Raster<u8>) -> Result<Raster<u8>> {
        if rgb.channels() != 3 {
            return Err(Error::Shape(format!(
                "color labels need 3 channels, got {}",
                rgb.channels()
            )));
        }
        let mut out = Raster::new(rgb.width(), rgb.height(), 1);
        for y in 0..rgb.height() {
            for x in 0..rgb.width() {
                let px = rgb.pixel(x, y);
                let color = [px[0], px[1], px[2]];
                let id = match self.entries.iter().find(|e| e.color == color) {
                    Some(e) => e.id,
                    None => match self.ignore_id {
                        Some(ig) if color == IGNORE_COLOR => ig,
                        _ => return Err(Error::UnknownColor { color, x, y }),
                    },
                };
                out.pixel_mut(x, y)[0] = id;
            }
        }
        Ok(out)
    }
}
