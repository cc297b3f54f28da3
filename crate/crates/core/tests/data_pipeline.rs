mod common;

use std::collections::HashMap;
use std::path::Path;

use dbdenoise::data::*;
use dbdenoise::error::PgmError;
use dbdenoise::metrics::psnr;
use dbdenoise::{Error, Tensor};

fn flat_image(w: usize, h: usize, value: u8) -> GrayImage {
    GrayImage::new(w, h, vec![value; w * h]).unwrap()
}

fn textured(w: usize, h: usize, seed: usize) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|i| ((i * 31 + seed * 17) % 251) as u8).collect()).unwrap()
}

fn write_dir(dir: &Path, images: &[(&str, GrayImage)]) {
    for (name, img) in images {
        write_pgm(img, dir.join(name)).unwrap();
    }
}

#[test]
fn awgn_statistics_at_sigma_25() {
    let clean = flat_image(256, 256, 128).to_tensor::<f64>();
    let noisy = add_awgn(&clean, NoiseSpec::new(25.0, 2024).unwrap()).unwrap();
    let noise: Vec<f64> = noisy.data().iter().zip(clean.data()).map(|(a, b)| a - b).collect();
    let n = noise.len() as f64;
    let mean = noise.iter().sum::<f64>() / n;
    let std = (noise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 0.002, "mean {mean}");
    assert!((std / (25.0 / 255.0) - 1.0).abs() <= 0.02, "std {std}");
    let db = psnr(&clean, &noisy, 1.0).unwrap();
    assert!((db - 20.0 * (255.0f64 / 25.0).log10()).abs() <= 0.3, "psnr {db}");
}

#[test]
fn pgm_files_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let img = textured(13, 7, 1);
    let p = dir.path().join("a.pgm");
    write_pgm(&img, &p).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    let back = read_pgm(&p).unwrap();
    assert_eq!(back, img);
    let q = dir.path().join("b.pgm");
    write_pgm(&back, &q).unwrap();
    assert_eq!(std::fs::read(&q).unwrap(), bytes);
}

#[test]
fn pgm_errors_carry_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ascii.pgm");
    std::fs::write(&p, b"P2\n1 1\n255\n0\n").unwrap();
    match read_pgm(&p) {
        Err(Error::Pgm {
            path,
            reason: PgmError::Unsupported(_),
        }) => assert_eq!(path, p),
        other => panic!("{other:?}"),
    }
    assert!(matches!(
        read_pgm(dir.path().join("missing.pgm")),
        Err(Error::Io { .. })
    ));
}

fn spec(noise_seed: u64, shuffle_seed: u64) -> DatasetSpec {
    DatasetSpec {
        patch_size: 8,
        stride: 4,
        shuffle_seed,
        ..DatasetSpec::new(NoiseSpec::new(25.0, noise_seed).unwrap())
    }
}

fn three_images(dir: &Path) {
    write_dir(
        dir,
        &[
            ("c.pgm", textured(16, 16, 3)),
            ("a.pgm", textured(20, 12, 1)),
            ("b.pgm", textured(12, 12, 2)),
        ],
    );
}

#[test]
fn dataset_is_deterministic_and_reconstructable() {
    let dir = tempfile::tempdir().unwrap();
    three_images(dir.path());
    let a = make_dataset::<f64>(dir.path(), &spec(5, 6)).unwrap();
    let b = make_dataset::<f64>(dir.path(), &spec(5, 6)).unwrap();
    assert_eq!(a.manifest_hash(), b.manifest_hash());
    assert_eq!(a.noisy, b.noisy);
    // 20x12 -> 4x2, 12x12 -> 2x2, 16x16 -> 3x3
    assert_eq!(a.len(), 8 + 4 + 9);
    for i in 0..a.len() {
        let e = &a.entries[i];
        let redo = add_awgn(&a.clean[i], NoiseSpec::new(25.0, e.noise_seed).unwrap()).unwrap();
        assert_eq!(redo, a.noisy[i]);
    }
}

#[test]
fn shuffle_seed_permutes_the_same_multiset() {
    let dir = tempfile::tempdir().unwrap();
    three_images(dir.path());
    let a = make_dataset::<f64>(dir.path(), &spec(5, 6)).unwrap();
    let b = make_dataset::<f64>(dir.path(), &spec(5, 7)).unwrap();
    assert_ne!(a.entries, b.entries);
    let key = |s: &PatchSet<f64>| {
        let mut v: Vec<_> = s
            .entries
            .iter()
            .map(|e| (e.file.clone(), e.index, e.noise_seed))
            .collect();
        v.sort();
        v
    };
    assert_eq!(key(&a), key(&b));
    let by_seed: HashMap<u64, &Tensor<f64>> = a.entries.iter().map(|e| e.noise_seed).zip(&a.noisy).collect();
    for (e, n) in b.entries.iter().zip(&b.noisy) {
        assert_eq!(by_seed[&e.noise_seed], n);
    }
}

#[test]
fn patch_noise_is_uncorrelated() {
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), &[("flat.pgm", flat_image(80, 40, 100))]);
    let s = DatasetSpec {
        patch_size: 40,
        stride: 40,
        ..DatasetSpec::new(NoiseSpec::new(25.0, 9).unwrap())
    };
    let set = make_dataset::<f64>(dir.path(), &s).unwrap();
    assert_eq!(set.len(), 2);
    let noise = |i: usize| -> Vec<f64> {
        set.noisy[i]
            .data()
            .iter()
            .zip(set.clean[i].data())
            .map(|(a, b)| a - b)
            .collect()
    };
    let (u, v) = (noise(0), noise(1));
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let (mu, mv) = (mean(&u), mean(&v));
    let cov: f64 = u.iter().zip(&v).map(|(a, b)| (a - mu) * (b - mv)).sum();
    let su: f64 = u.iter().map(|a| (a - mu).powi(2)).sum::<f64>().sqrt();
    let sv: f64 = v.iter().map(|b| (b - mv).powi(2)).sum::<f64>().sqrt();
    let r = cov / (su * sv);
    assert!(r.abs() < 0.05, "r = {r}");
}

#[test]
fn dataset_errors() {
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        make_dataset::<f32>(empty.path(), &spec(1, 1)),
        Err(Error::Dataset(_))
    ));
    let dir = tempfile::tempdir().unwrap();
    three_images(dir.path());
    std::fs::write(dir.path().join("broken.pgm"), b"P5\n4 4\n255\n\0").unwrap();
    let err = make_dataset::<f32>(dir.path(), &spec(1, 1)).unwrap_err();
    assert!(err.to_string().contains("broken.pgm"), "{err}");
}

#[test]
fn augmentation_multiplies_by_eight() {
    let img = textured(80, 80, 4);
    assert_eq!(extract_patches(&img, 40, 20, Augment::Dihedral).unwrap().len(), 72);
    let dir = tempfile::tempdir().unwrap();
    write_dir(dir.path(), &[("x.pgm", img)]);
    let s = DatasetSpec {
        augment: Augment::Dihedral,
        ..spec(1, 1)
    };
    let plain = make_dataset::<f32>(dir.path(), &spec(1, 1)).unwrap();
    assert_eq!(make_dataset::<f32>(dir.path(), &s).unwrap().len(), plain.len() * 8);
}
