//! Synthetic aerial-style scenes: a field enclosed by a running track on a
//! cluttered background. Region boundaries lie on an 8-pixel grid.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ClassCatalog, DatasetManifest, ManifestEntry, SegSample, Split};
use crate::error::Result;
use crate::raster::{save_png, Raster};

const TRACK: u8 = 0;
const FIELD: u8 = 1;
const OTHERS: u8 = 2;

const BASE_COLORS: [[f32; 3]; 3] = [[0.78, 0.36, 0.30], [0.22, 0.62, 0.26], [0.46, 0.46, 0.52]];

/// One synthetic sample of `width×height` pixels.
pub fn synthetic_sample(id: &str, width: usize, height: usize, seed: u64) -> SegSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells_x = (width / 8).max(1);
    let cells_y = (height / 8).max(1);
    let mut pick = |lo: usize, hi: usize| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    // outer track rectangle in cell units; the field is everything one cell inside it
    let fx0 = pick(1, cells_x / 4);
    let fy0 = pick(1, cells_y / 4);
    let fx1 = pick((fx0 + 3).max(3 * cells_x / 4), cells_x.saturating_sub(1));
    let fy1 = pick((fy0 + 3).max(3 * cells_y / 4), cells_y.saturating_sub(1));
    let label = Raster::from_fn(width, height, 1, |x, y, p| {
        let (cx, cy) = (x / 8, y / 8);
        let outer = cx >= fx0 && cx < fx1 && cy >= fy0 && cy < fy1;
        let inner = cx > fx0 && cx + 1 < fx1 && cy > fy0 && cy + 1 < fy1;
        p[0] = if inner {
            FIELD
        } else if outer {
            TRACK
        } else {
            OTHERS
        };
    });
    let mut noise = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let image = Raster::from_fn(width, height, 3, |x, y, p| {
        let base = BASE_COLORS[label.get(x, y, 0) as usize];
        for (c, v) in p.iter_mut().enumerate() {
            *v = (base[c] + noise.random_range(-0.06f32..0.06)).clamp(0.0, 1.0);
        }
    });
    SegSample::new(id, image, label).expect("consistent sizes")
}

/// Writes a dataset of synthetic samples with `manifest.json` under `root`.
pub fn write_fixture(
    root: &Path,
    n_train: usize,
    n_test: usize,
    width: usize,
    height: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for k in 0..n_train + n_test {
        let id = format!("{k:04}");
        let s = synthetic_sample(
            &id,
            width,
            height,
            seed.wrapping_mul(1000).wrapping_add(k as u64),
        );
        let image: PathBuf = Path::new("images").join(format!("{id}.png"));
        let label: PathBuf = Path::new("labels").join(format!("{id}.png"));
        save_png(
            &s.image.map(|v| (v * 255.0).round() as u8),
            &root.join(&image),
        )?;
        save_png(&s.label, &root.join(&label))?;
        entries.push(ManifestEntry {
            id,
            image,
            label,
            mask: None,
            split: if k < n_train {
                Split::Train
            } else {
                Split::Test
            },
        });
    }
    let m = DatasetManifest {
        root: root.to_path_buf(),
        catalog: ClassCatalog::default(),
        entries,
    };
    m.write()?;
    Ok(m)
}
