use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassCatalog, SegSample};
use crate::error::{Error, Result};
use crate::raster::load_png;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// One manifest row. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestFile {
    #[serde(default)]
    classes: Option<ClassCatalog>,
    samples: Vec<ManifestEntry>,
}

/// Validated list of samples under a dataset root.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub catalog: ClassCatalog,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn validate(&self) -> Result<()> {
        self.catalog.validate()?;
        let mut seen: HashMap<&str, Split> = HashMap::new();
        for e in &self.entries {
            if let Some(prev) = seen.insert(&e.id, e.split) {
                return Err(Error::Dataset(if prev == e.split {
                    format!("duplicate sample id {:?}", e.id)
                } else {
                    format!("sample id {:?} appears in both train and test splits", e.id)
                }));
            }
            for rel in [Some(&e.image), Some(&e.label), e.mask.as_ref()]
                .into_iter()
                .flatten()
            {
                let p = self.root.join(rel);
                if !p.is_file() {
                    return Err(Error::MissingFile(p));
                }
            }
        }
        Ok(())
    }

    /// Writes `manifest.json` under the root.
    pub fn write(&self) -> Result<()> {
        let file = ManifestFile {
            classes: Some(self.catalog.clone()),
            samples: self.entries.clone(),
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    /// Reads the image, label and optional mask of one entry.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<SegSample> {
        let image = load_png(&self.root.join(&entry.image))?;
        let image = if image.channels() == 1 {
            crate::raster::Raster::from_fn(image.width(), image.height(), 3, |x, y, p| {
                p.fill(image.get(x, y, 0))
            })
        } else {
            image
        };
        let label = load_png(&self.root.join(&entry.label))?;
        if label.channels() != 1 {
            return Err(Error::Dataset(format!(
                "{}: labels must be single-channel PNGs holding class ids",
                entry.label.display()
            )));
        }
        let mut s = SegSample::from_u8(&entry.id, &image, label)
            .map_err(|e| Error::Dataset(format!("{}: {e}", entry.id)))?;
        if let Some(m) = &entry.mask {
            let mask = load_png(&self.root.join(m))?;
            if (mask.width(), mask.height(), mask.channels()) != (s.width(), s.height(), 1) {
                return Err(Error::Dataset(format!("{}: mask size mismatch", entry.id)));
            }
            s.valid_mask = Some(mask);
        }
        Ok(s)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SegSample>> {
        self.split(split).map(|e| self.load_sample(e)).collect()
    }
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == "png") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                stems.push(s.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads `root/manifest.json`, or, when absent, scans
/// `root/{train,test}/{images,labels}/*.png` pairing files by name.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest = if manifest_path.is_file() {
        let text =
            std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let file: ManifestFile = serde_json::from_str(&text)
            .map_err(|e| Error::Dataset(format!("{}: {e}", manifest_path.display())))?;
        DatasetManifest {
            root: root.to_path_buf(),
            catalog: file.classes.unwrap_or_default(),
            entries: file.samples,
        }
    } else {
        let mut entries = Vec::new();
        for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
            let images = root.join(name).join("images");
            if !images.is_dir() {
                continue;
            }
            for stem in png_stems(&images)? {
                entries.push(ManifestEntry {
                    id: stem.clone(),
                    image: Path::new(name).join("images").join(format!("{stem}.png")),
                    label: Path::new(name).join("labels").join(format!("{stem}.png")),
                    mask: None,
                    split,
                });
            }
        }
        if entries.is_empty() {
            return Err(Error::Dataset(format!(
                "{} has neither {MANIFEST_FILE} nor train/ and test/ image directories",
                root.display()
            )));
        }
        DatasetManifest {
            root: root.to_path_buf(),
            catalog: ClassCatalog::default(),
            entries,
        }
    };
    manifest.validate()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::write_fixture;

    #[test]
    fn fixture_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 12, 2, 32, 32, 7).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(m.entries.len(), 14);
        assert_eq!(m.count(Split::Train), 12);
        assert_eq!(m.count(Split::Test), 2);
    }

    #[test]
    fn missing_label_is_named() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 2, 1, 32, 32, 7).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        let victim = dir.path().join(&m.entries[1].label);
        std::fs::remove_file(&victim).unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert!(err.to_string().contains(victim.to_str().unwrap()), "{err}");
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 2, 1, 32, 32, 7).unwrap();
        let mut m = load_manifest(dir.path()).unwrap();
        let mut dup = m.entries[0].clone();
        dup.split = Split::Test;
        m.entries.push(dup);
        assert!(m.validate().unwrap_err().to_string().contains("both"));
        m.entries.last_mut().unwrap().split = Split::Train;
        assert!(m.validate().unwrap_err().to_string().contains("duplicate"));
    }

    #[test]
    fn directory_layout_without_manifest() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 3, 1, 32, 32, 1).unwrap();
        let m = load_manifest(dir.path()).unwrap();
        // move into the split layout
        let layout = tempfile::tempdir().unwrap();
        for e in &m.entries {
            let split = if e.split == Split::Train {
                "train"
            } else {
                "test"
            };
            for (kind, rel) in [("images", &e.image), ("labels", &e.label)] {
                let d = layout.path().join(split).join(kind);
                std::fs::create_dir_all(&d).unwrap();
                std::fs::copy(dir.path().join(rel), d.join(format!("{}.png", e.id))).unwrap();
            }
        }
        let scanned = load_manifest(layout.path()).unwrap();
        assert_eq!(scanned.count(Split::Train), 3);
        assert_eq!(scanned.count(Split::Test), 1);
        let s = scanned.load_sample(&scanned.entries[0]).unwrap();
        assert_eq!(s.width(), 32);
    }

    #[test]
    fn full_scale_manifest_shape() {
        // 420 + 42 entries referencing a shared pair of files
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), 1, 0, 8, 8, 0).unwrap();
        let base = load_manifest(dir.path()).unwrap();
        let template = base.entries[0].clone();
        let entries = (0..462)
            .map(|k| ManifestEntry {
                id: format!("{k:04}"),
                split: if k < 420 { Split::Train } else { Split::Test },
                ..template.clone()
            })
            .collect();
        let m = DatasetManifest { entries, ..base };
        m.write().unwrap();
        let m = load_manifest(dir.path()).unwrap();
        assert_eq!(
            (m.count(Split::Train), m.count(Split::Test), m.entries.len()),
            (420, 42, 462)
        );
    }
}
