use std::fs;

use dsfer_core::data::{
    changed_fraction, iterate_batches, load_dataset, save_dataset, split, split_sizes, synth_generate, Part,
};
use dsfer_core::Error;
use image::{GrayImage, RgbImage};

#[test]
fn save_load_round_trip_within_one_level() {
    let samples = synth_generate(3, 6, 32, 0.5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(dir.path(), &samples).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.len(), samples.len());
    for (a, b) in samples.iter().zip(&loaded) {
        assert_eq!(a.id, b.id);
        assert!(a.image_t1.max_abs_diff(&b.image_t1) <= 0.5 / 255.0 + 1e-12);
        assert!(a.image_t2.max_abs_diff(&b.image_t2) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(a.label, b.label);
    }
}

fn write_pair(root: &std::path::Path, name: &str, size: (u32, u32), label_size: (u32, u32), label_value: u8) {
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(root.join(sub)).unwrap();
    }
    RgbImage::new(size.0, size.1).save(root.join("A").join(name)).unwrap();
    RgbImage::new(size.0, size.1).save(root.join("B").join(name)).unwrap();
    GrayImage::from_pixel(label_size.0, label_size.1, image::Luma([label_value]))
        .save(root.join("label").join(name))
        .unwrap();
}

#[test]
fn labels_are_binarized() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "white.png", (4, 4), (4, 4), 255);
    write_pair(dir.path(), "black.png", (4, 4), (4, 4), 0);
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded[0].id, "black");
    assert_eq!(loaded[0].changed_pixels(), 0);
    assert_eq!(loaded[1].changed_pixels(), 16);
}

#[test]
fn mismatched_dimensions_name_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "tile_7.png", (8, 8), (8, 6), 0);
    match load_dataset(dir.path()) {
        Err(Error::Sample { id, reason }) => {
            assert_eq!(id, "tile_7");
            assert!(reason.contains("dimension mismatch"), "{reason}");
            assert!(reason.contains("8x6"), "{reason}");
        }
        other => panic!("expected a sample error, got {other:?}"),
    }
}

#[test]
fn missing_counterpart_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_pair(dir.path(), "x.png", (4, 4), (4, 4), 0);
    fs::remove_file(dir.path().join("B/x.png")).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::Sample { id, .. } if id == "x"), "{err}");
    assert!(err.to_string().contains("missing file"), "{err}");
}

#[test]
fn synth_is_deterministic_per_seed() {
    let a = synth_generate(42, 5, 32, 0.5).unwrap();
    let b = synth_generate(42, 5, 32, 0.5).unwrap();
    let c = synth_generate(43, 5, 32, 0.5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // Prefixes agree: each sample depends only on (seed, index).
    assert_eq!(synth_generate(42, 3, 32, 0.5).unwrap(), a[..3]);
}

#[test]
fn clean_synth_labels_equal_difference_support() {
    for s in synth_generate(1, 20, 32, 0.0).unwrap() {
        let plane = 32 * 32;
        for p in 0..plane {
            let differs = (0..3).any(|c| s.image_t1.data()[c * plane + p] != s.image_t2.data()[c * plane + p]);
            assert_eq!(s.label.data()[p] == 1.0, differs, "{} pixel {p}", s.id);
        }
    }
}

#[test]
fn synth_change_fraction_is_moderate() {
    let samples = synth_generate(0, 1000, 32, 0.5).unwrap();
    let f = changed_fraction(&samples);
    assert!((0.03..=0.25).contains(&f), "changed fraction {f}");
    assert!(samples.iter().all(|s| s.changed_pixels() > 0));
}

#[test]
fn synth_rejects_bad_arguments() {
    assert!(synth_generate(0, 1, 30, 0.5).is_err());
    assert!(synth_generate(0, 1, 32, 1.5).is_err());
}

#[test]
fn split_is_deterministic_and_disjoint() {
    let samples = synth_generate(0, 50, 16, 0.5).unwrap();
    let a = split(&samples, [0.7, 0.1, 0.2], 9).unwrap();
    let b = split(&samples, [0.7, 0.1, 0.2], 9).unwrap();
    assert_eq!(a, b);
    assert_eq!([a.train.len(), a.val.len(), a.test.len()], [35, 5, 10]);
    let mut all: Vec<&String> = a.train.iter().chain(&a.val).chain(&a.test).collect();
    all.sort();
    all.dedup();
    assert_eq!(all.len(), 50);
    assert_ne!(a, split(&samples, [0.7, 0.1, 0.2], 10).unwrap());
    assert_eq!(split_sizes(3, [0.5, 0.25, 0.25]).unwrap().iter().sum::<usize>(), 3);
}

#[test]
fn batches_cover_the_part_and_reject_bad_sizes() {
    let samples = synth_generate(0, 20, 16, 0.5).unwrap();
    let s = split(&samples, [0.5, 0.25, 0.25], 0).unwrap();
    let batches = iterate_batches(&s, Part::Train, 3, 1, 0).unwrap();
    assert_eq!(batches.len(), 3);
    assert!(batches.iter().all(|b| b.len() == 3));
    assert_eq!(batches, iterate_batches(&s, Part::Train, 3, 1, 0).unwrap());
    assert_ne!(batches, iterate_batches(&s, Part::Train, 3, 1, 1).unwrap());
    assert!(iterate_batches(&s, Part::Train, 0, 1, 0).is_err());
    assert!(iterate_batches(&s, Part::Val, 6, 1, 0).is_err());
}
