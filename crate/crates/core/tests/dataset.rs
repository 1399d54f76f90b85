use std::collections::BTreeSet;

use palseg::dataset::synth::{synthetic_sample, write_fixture};
use palseg::dataset::{
    apply_label_transform, augment, collate, load_manifest, validate_sample, AugmentConfig,
    ClassCatalog, Normalization, SegSample, Split,
};
use palseg::raster::{save_png, Raster};
use proptest::prelude::*;

#[test]
fn fixture_round_trips_through_png() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 3, 2, 64, 32, 7).unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert_eq!((m.count(Split::Train), m.count(Split::Test)), (3, 2));
    let ids: BTreeSet<_> = m.entries.iter().map(|e| e.id.clone()).collect();
    assert_eq!(ids.len(), m.entries.len());

    let loaded = m.load_split(Split::Train).unwrap();
    for (k, s) in loaded.iter().enumerate() {
        let want = synthetic_sample(&s.id, 64, 32, 7000 + k as u64);
        assert_eq!(s.label, want.label);
        let err = s
            .image
            .data()
            .iter()
            .zip(want.image.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6, "quantization error {err}");
        assert!(validate_sample(s, &m.catalog).is_ok());
    }
}

#[test]
fn missing_and_corrupt_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let m = write_fixture(dir.path(), 2, 0, 32, 32, 1).unwrap();
    let label = dir.path().join(&m.entries[1].label);
    std::fs::remove_file(&label).unwrap();
    let msg = load_manifest(dir.path()).unwrap_err().to_string();
    assert!(msg.contains("0001"), "{msg}");

    std::fs::write(&label, b"not a png").unwrap();
    let m = load_manifest(dir.path()).unwrap();
    assert!(m.load_sample(&m.entries[1]).is_err());
}

#[test]
fn validation_reports_out_of_catalog_values() {
    let mut s = synthetic_sample("x", 16, 16, 0);
    s.label.data_mut()[5] = 3;
    s.label.data_mut()[6] = 255;
    let r = validate_sample(&s, &ClassCatalog::default());
    assert!(!r.is_ok());
    assert_eq!(r.invalid_values.get(&3), Some(&1));
    assert_eq!(r.ignored_pixels, 1);
    assert_eq!(r.class_counts.iter().sum::<u64>(), 254);
}

#[test]
fn mask_file_marks_blind_pixels_ignored() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = write_fixture(dir.path(), 1, 0, 32, 32, 2).unwrap();
    let mask = Raster::<u8>::from_fn(32, 32, 1, |x, _, p| p[0] = if x < 4 { 0 } else { 255 });
    save_png(&mask, &dir.path().join("mask.png")).unwrap();
    m.entries[0].mask = Some("mask.png".into());
    m.write().unwrap();
    let s = load_manifest(dir.path())
        .unwrap()
        .load_split(Split::Train)
        .unwrap()
        .remove(0);
    let (_, labels) = collate::<f32>(&[&s], &Normalization::default(), 255).unwrap();
    for (k, &l) in labels.iter().enumerate() {
        assert_eq!(l == 255, k % 32 < 4);
    }
}

#[test]
fn collate_rejects_mixed_sizes() {
    let a = synthetic_sample("a", 32, 32, 0);
    let b = synthetic_sample("b", 64, 32, 0);
    assert!(collate::<f32>(&[&a, &b], &Normalization::default(), 255).is_err());
    let (x, l) = collate::<f32>(&[&a, &a], &Normalization::default(), 255).unwrap();
    assert_eq!(x.shape(), [2, 3, 32, 32]);
    assert_eq!(l.len(), 2 * 32 * 32);
}

fn small_sample() -> impl Strategy<Value = SegSample> {
    (8usize..80, 8usize..80, any::<u64>())
        .prop_map(|(w, h, seed)| synthetic_sample("p", w, h, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_labels_and_geometry(s in small_sample(), seed in any::<u64>(), crop in 1usize..5) {
        let cfg = AugmentConfig { crop: (crop * 16, crop * 16), ..AugmentConfig::default() };
        let (out, rec) = augment(&s, seed, &cfg).unwrap();
        prop_assert!((0.5..=2.0).contains(&rec.scale));
        prop_assert_eq!((out.width(), out.height()), (crop * 16, crop * 16));
        prop_assert_eq!((out.image.width(), out.image.height()), (crop * 16, crop * 16));
        let src: BTreeSet<u8> = s.label.data().iter().copied().collect();
        let got: BTreeSet<u8> = out.label.data().iter().copied().collect();
        prop_assert!(got.iter().all(|v| src.contains(v) || *v == 255));
        prop_assert_eq!(&apply_label_transform(&s.label, &rec, 255), &out.label);
        let (again, rec2) = augment(&s, seed, &cfg).unwrap();
        prop_assert_eq!(rec, rec2);
        prop_assert_eq!(again, out);
    }

    #[test]
    fn colors_round_trip(w in 1usize..24, h in 1usize..24, seed in any::<u64>()) {
        let mut state = seed;
        let label = Raster::<u8>::from_fn(w, h, 1, |_, _, p| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            p[0] = [0, 1, 2, 255][(state >> 62) as usize];
        });
        let cat = ClassCatalog::default();
        prop_assert_eq!(cat.decode_color(&cat.colorize(&label)).unwrap(), label);
    }
}
