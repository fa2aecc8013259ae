use std::collections::HashSet;
use std::fs;
use std::path::Path;

use sma_core::data::{generate_synthetic, load_samples, measure_aperture, split_grouped, write_dataset, DatasetManifest, GeneratorConfig};
use sma_core::format::{read_tensor_file, write_tensor_file};
use sma_core::metrics::{balanced_accuracy, ConfusionMatrix};
use sma_core::Tensor;

fn small(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        num_eyes: 6,
        sequences_per_eye: 6,
        ..GeneratorConfig::default()
    }
}

fn tree_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn aperture_measurement_tracks_ground_truth_without_noise() {
    let cfg = GeneratorConfig {
        noise_sigma: 0.0,
        ..small(3)
    };
    let ds = generate_synthetic(&cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (sample, geom) in ds.samples.iter().zip(&ds.geometry) {
        if geom.contact_blob {
            continue;
        }
        for (t, &truth) in geom.apertures.iter().enumerate() {
            let measured = measure_aperture(sample.slice(t), sample.size, geom.apex);
            worst = worst.max((measured - truth).abs());
        }
    }
    assert!(worst < 3.0, "worst aperture error {worst:.2} degrees");
}

#[test]
fn threshold_classifier_separates_default_classes() {
    let ds = generate_synthetic(&GeneratorConfig::default()).unwrap();
    let mut truth = Vec::new();
    let mut predicted = Vec::new();
    for (sample, geom) in ds.samples.iter().zip(&ds.geometry) {
        let mean = (0..sample.seq_len)
            .map(|t| measure_aperture(sample.slice(t), sample.size, geom.apex))
            .sum::<f64>()
            / sample.seq_len as f64;
        predicted.push(if mean < 12.0 {
            2
        } else if mean < 45.0 {
            1
        } else {
            0
        });
        truth.push(sample.label);
    }
    let cm = ConfusionMatrix::from_predictions(&truth, &predicted, 3).unwrap();
    let b = balanced_accuracy(&cm).unwrap();
    assert!(b >= 0.95, "threshold classifier b_acc {b}");
}

#[test]
fn same_seed_writes_identical_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    write_dataset(&generate_synthetic(&small(5)).unwrap(), a.path()).unwrap();
    write_dataset(&generate_synthetic(&small(5)).unwrap(), b.path()).unwrap();
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let c = tempfile::tempdir().unwrap();
    let m = write_dataset(&generate_synthetic(&small(6)).unwrap(), c.path()).unwrap();
    assert_ne!(tree_bytes(a.path()), tree_bytes(c.path()));
    assert_eq!(m.entries.len(), 36);
}

#[test]
fn written_dataset_reloads_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_synthetic(&small(7)).unwrap();
    write_dataset(&ds, dir.path()).unwrap();
    let manifest = DatasetManifest::read(dir.path()).unwrap();
    let loaded = load_samples(&manifest, 3).unwrap();
    assert_eq!(loaded.len(), ds.samples.len());
    for (a, b) in loaded.iter().zip(&ds.samples) {
        assert_eq!(a.pixels, b.pixels);
        assert_eq!((a.label, a.eye_id), (b.label, b.eye_id));
    }
    let binary = load_samples(&manifest, 2).unwrap();
    assert!(binary.iter().all(|s| s.label < 2));
}

#[test]
fn grouped_split_never_shares_eyes() {
    let ds = generate_synthetic(&GeneratorConfig::default()).unwrap();
    for seed in 0..100 {
        let (train, test) = split_grouped(&ds.manifest, 0.5, seed).unwrap();
        let a: HashSet<u32> = train.entries.iter().map(|e| e.eye_id).collect();
        let b: HashSet<u32> = test.entries.iter().map(|e| e.eye_id).collect();
        assert!(a.is_disjoint(&b), "seed {seed}");
        assert_eq!(a.len() + b.len(), 20);
        assert_eq!(train.entries.len() + test.entries.len(), ds.manifest.entries.len());
    }
}

#[test]
fn tensor_file_roundtrip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::<f32>::from_fn(&[2, 3, 4], |i| (i as f32 * 0.731).sin() * 1e3).unwrap();
    let (p, q) = (dir.path().join("a.smat"), dir.path().join("b.smat"));
    write_tensor_file(&p, &t).unwrap();
    let back = read_tensor_file(&p).unwrap();
    write_tensor_file(&q, &back).unwrap();
    assert_eq!(fs::read(&p).unwrap(), fs::read(&q).unwrap());
    assert_eq!(back.data(), t.data());
}
