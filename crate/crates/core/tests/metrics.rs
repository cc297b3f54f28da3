mod common;

use common::*;
use dbdenoise::data::{add_awgn, NoiseSpec};
use dbdenoise::metrics::{ms_ssim, ms_ssim_on_tape, psnr, ssim, SsimParams};
use dbdenoise::selftest::synthetic_batch;
use dbdenoise::{Tape, Tensor};

fn pair(size: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
    synthetic_batch(1, size, 20.0, seed).unwrap()
}

#[test]
fn ssim_matches_pixel_loop_oracle() {
    for seed in 0..4 {
        let (x, y) = pair(16, seed);
        let got = ssim(&x, &y, &SsimParams::default()).unwrap();
        let (want, _) = naive_ssim_cs(x.data(), y.data(), 16, 16, 11);
        assert!((got - want).abs() <= 1e-8, "{got} vs {want}");
    }
}

#[test]
fn ms_ssim_matches_pixel_loop_oracle() {
    for (size, seed) in [(32, 1), (40, 2), (64, 3), (16, 4)] {
        let (x, y) = pair(size, seed);
        let got = ms_ssim(&x, &y, &SsimParams::default()).unwrap();
        let want = naive_ms_ssim(x.data(), y.data(), size, size);
        assert!((got - want).abs() <= 1e-8, "{size}: {got} vs {want}");
    }
}

#[test]
fn identities_and_symmetry() {
    let p = SsimParams::default();
    let (x, y) = pair(40, 5);
    assert!((ssim(&x, &x, &p).unwrap() - 1.0).abs() <= 1e-6);
    assert!((ms_ssim(&x, &x, &p).unwrap() - 1.0).abs() <= 1e-6);
    assert!((ssim(&x, &y, &p).unwrap() - ssim(&y, &x, &p).unwrap()).abs() <= 1e-9);
    assert!((ms_ssim(&x, &y, &p).unwrap() - ms_ssim(&y, &x, &p).unwrap()).abs() <= 1e-9);
    assert_eq!(psnr(&x, &y, 1.0).unwrap(), psnr(&y, &x, 1.0).unwrap());
    assert_eq!(psnr(&x, &x, 1.0).unwrap(), f64::INFINITY);
    let m = ms_ssim(&x, &y, &p).unwrap();
    assert!(m > 0.0 && m <= 1.0);
}

#[test]
fn psnr_closed_form() {
    let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
    let y = Tensor::full(&[1, 1, 4, 4], 0.1);
    assert!((psnr(&x, &y, 1.0).unwrap() - 20.0).abs() < 1e-12);
}

#[test]
fn too_small_images_are_rejected() {
    let p = SsimParams::default();
    let (x, _) = pair(8, 0);
    let small = Tensor::from_vec(&[1, 1, 8, 8], x.data().to_vec()).unwrap();
    assert!(ssim(&small, &small, &p).is_err());
    let tiny = Tensor::<f64>::zeros(&[1, 1, 7, 7]);
    assert!(ms_ssim(&tiny, &tiny, &p).is_err());
}

#[test]
fn ms_ssim_decreases_with_noise() {
    let (x, _) = pair(64, 6);
    let p = SsimParams::default();
    let mut last = f64::INFINITY;
    for sigma in [5.0, 10.0, 15.0, 25.0, 35.0, 50.0] {
        let noisy = add_awgn(&x, NoiseSpec::new(sigma, 3).unwrap()).unwrap();
        let v = ms_ssim(&x, &noisy, &p).unwrap();
        assert!(v < last, "sigma {sigma}: {v} !< {last}");
        last = v;
    }
}

#[test]
fn ms_ssim_gradient_matches_finite_differences() {
    let (x, y) = pair(32, 7);
    let p = SsimParams::default();
    assert_eq!(p.effective_scales(32, 32), 3);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let yv = tape.leaf(y.clone(), true);
    let m = ms_ssim_on_tape(&mut tape, xv, yv, &p).unwrap();
    let s = tape.sum(m).unwrap();
    tape.backward(s).unwrap();
    let numeric = numeric_gradient(&y, 1e-4, |t| naive_ms_ssim(x.data(), t.data(), 32, 32));
    for (a, n) in tape.grad(yv).unwrap().data().iter().zip(&numeric) {
        assert!(relative_error(*a, *n, 1e-6) <= 1e-4, "{a} vs {n}");
    }
}
