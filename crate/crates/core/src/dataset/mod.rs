//! Segmentation datasets: unfolded panoramas paired with class-id masks.
//!
//! On disk a dataset is `root/images/*.png`, `root/labels/*.png`
//! (single-channel, pixel value = class id) and `root/manifest.json`.

mod augment;
mod catalog;
mod manifest;
mod sample;
pub mod synth;

pub use augment::{
    apply_label_transform, apply_record, augment, draw_record, resize_bilinear_raster,
    AugmentConfig, AugmentRecord,
};
pub use catalog::{ClassCatalog, ClassEntry, DEFAULT_IGNORE_ID, IGNORE_COLOR};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use sample::{collate, validate_sample, Normalization, SampleReport, SegSample};
