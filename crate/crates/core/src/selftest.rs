//! Built-in verification battery behind the `selftest` command.
//!
//! Each check compares the library against an independent reference: a
//! direct-summation convolution, central finite differences, closed-form
//! metric identities and exact byte/bit comparisons.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{add_awgn, decode_pgm, encode_pgm, GrayImage, NoiseSpec, PatchEntry, PatchSet};
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::metrics::{self, ms_ssim_on_tape, SsimParams};

use crate::model::{ModelConfig, Network, Variant};
use crate::tensor::{conv2d, Tape, Tensor};
use crate::training::{network_loss, train_stage2, LossKind, TrainConfig};

/// Finite-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-4;
/// Largest accepted relative gradient error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
/// Denominator floor of the relative error, so gradients that are zero up
/// to rounding compare on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Initialization seed of the gradient-check network. Central differences
/// are only valid when no ReLU input lies within the step of zero; this
/// seed and [`GRADCHECK_DATA_SEED`] give such a configuration.
pub const GRADCHECK_NET_SEED: u64 = 5;
/// Seed of the 16x16 gradient-check image.
pub const GRADCHECK_DATA_SEED: u64 = 0;
/// Tolerance of the convolution oracle comparison (64-bit).
pub const CONV_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({}; {:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Signature of a 2-D convolution under test.
pub type ConvFn = fn(&Tensor<f64>, &Tensor<f64>, Option<&Tensor<f64>>, usize) -> Result<Tensor<f64>>;

/// Direct summation over every output position, channel and tap.
pub fn direct_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: Option<&Tensor<f64>>,
    padding: usize,
) -> Result<Tensor<f64>> {
    let [n, c, h, w] = input.dims4()?;
    let [o, ci, kh, kw] = weight.dims4()?;
    if ci != c {
        return Err(Error::ChannelMismatch {
            op: "direct_conv2d",
            expected: ci,
            actual: c,
        });
    }
    let (ho, wo) = (h + 2 * padding + 1 - kh, w + 2 * padding + 1 - kw);
    let (x, k) = (input.data(), weight.data());
    let mut out = vec![0.0; n * o * ho * wo];
    for b in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.map_or(0.0, |t| t.data()[oc]);
                    for ic in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let (y, xx) = (i + u, j + v);
                                if y < padding || xx < padding || y - padding >= h || xx - padding >= w {
                                    continue;
                                }
                                acc += k[((oc * c + ic) * kh + u) * kw + v]
                                    * x[((b * c + ic) * h + y - padding) * w + xx - padding];
                            }
                        }
                    }
                    out[((b * o + oc) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, ho, wo], out)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Compares `conv` with [`direct_conv2d`] on random instances with
/// `N, C <= 4`, `H, W <= 8`, odd kernels up to 5 and padding up to `k/2`.
pub fn check_conv(conv: ConvFn, instances: usize, seed: u64) -> CheckResult {
    timed("conv2d matches direct summation", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let (n, c, o) = (
                rng.random_range(1..=4),
                rng.random_range(1..=4),
                rng.random_range(1..=4),
            );
            let (h, w) = (rng.random_range(1..=8usize), rng.random_range(1..=8usize));
            let k = [1, 3, 5][rng.random_range(0..3)];
            let padding = rng.random_range(0..=k / 2);
            if h + 2 * padding < k || w + 2 * padding < k {
                continue;
            }
            let x = uniform(&mut rng, &[n, c, h, w]);
            let wt = uniform(&mut rng, &[o, c, k, k]);
            let b = rng.random_bool(0.5).then(|| uniform(&mut rng, &[o]));
            let expected = direct_conv2d(&x, &wt, b.as_ref(), padding)?;
            let got = conv(&x, &wt, b.as_ref(), padding)?;
            if got.shape() != expected.shape() {
                return Ok((false, format!("shape {:?} vs {:?}", got.shape(), expected.shape())));
            }
            worst = worst.max(got.max_abs_diff(&expected)?);
        }
        Ok((
            worst <= CONV_TOLERANCE,
            format!("max |diff| {worst:.3e} over {instances} instances"),
        ))
    })
}

/// Network used by the gradient checks: two dense-block pairs with narrow
/// layers so every parameter can be perturbed.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        growth_rate: 2,
        block_layers: 2,
        ..ModelConfig::tiny(Variant::V1)
    }
}

/// A clean/noisy batch of smooth random images.
pub fn synthetic_batch(n: usize, size: usize, sigma: f64, seed: u64) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * size * size);
    for _ in 0..n {
        let (a, b, c): (f64, f64, f64) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5), rng.random());
        for i in 0..size * size {
            let (y, x) = ((i / size) as f64, (i % size) as f64);
            data.push(0.5 + 0.3 * (a * x + b * y + 6.0 * c).sin() * (0.7 * a * y).cos());
        }
    }
    let clean = Tensor::from_vec(&[n, 1, size, size], data)?;
    let noisy = add_awgn(&clean, NoiseSpec::new(sigma, seed ^ 0x5eed)?)?;
    Ok((clean, noisy))
}

/// Per-parameter comparison of backprop and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: String,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

fn loss_value(net: &mut Network<f64>, clean: &Tensor<f64>, noisy: &Tensor<f64>, kind: LossKind) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = network_loss(net, &mut tape, clean, noisy, kind, Mode::Train)?;
    Ok(tape.value(loss).data()[0])
}

/// Checks every scalar parameter of `net` for `kind` on one batch, with
/// training-mode batch norm.
pub fn gradient_check_network(
    net: &mut Network<f64>,
    clean: &Tensor<f64>,
    noisy: &Tensor<f64>,
    kind: LossKind,
) -> Result<GradReport> {
    let mut tape = Tape::new();
    let (loss, pass) = network_loss(net, &mut tape, clean, noisy, kind, Mode::Train)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = pass
        .binding
        .vars()
        .iter()
        .map(|&v| tape.grad(v).cloned().ok_or(Error::UnknownVar(v.index())))
        .collect::<Result<_>>()?;
    let mut report = GradReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: String::new(),
    };
    for (pi, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let original = net.params().params()[pi].value.data()[i];
            net.params_mut().params_mut()[pi].value.data_mut()[i] = original + FD_STEP;
            let plus = loss_value(net, clean, noisy, kind)?;
            net.params_mut().params_mut()[pi].value.data_mut()[i] = original - FD_STEP;
            let minus = loss_value(net, clean, noisy, kind)?;
            net.params_mut().params_mut()[pi].value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let err = relative_error(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_relative_error || report.worst.is_empty() {
                report.max_relative_error = err;
                report.worst = format!("{}[{i}]", net.params().params()[pi].name);
            }
        }
    }
    Ok(report)
}

/// Gradient check of the network loss on the micro network with one 16x16
/// image.
pub fn check_network_gradients(kind: LossKind) -> CheckResult {
    let name = match kind {
        LossKind::MseResidual => "gradient check: residual MSE loss",
        LossKind::Combined => "gradient check: combined MS-SSIM + MSE loss",
    };
    timed(name, || {
        let mut net = Network::<f64>::build(micro_config(), GRADCHECK_NET_SEED)?;
        let (clean, noisy) = synthetic_batch(1, 16, 25.0, GRADCHECK_DATA_SEED)?;
        let r = gradient_check_network(&mut net, &clean, &noisy, kind)?;
        Ok((
            r.max_relative_error <= GRAD_TOLERANCE,
            format!(
                "{} parameters, max rel error {:.3e} at {}",
                r.checked, r.max_relative_error, r.worst
            ),
        ))
    })
}

/// MS-SSIM gradient with respect to the test image on a 32x32 pair.
pub fn check_ms_ssim_gradient() -> CheckResult {
    timed("gradient check: MS-SSIM wrt test image", || {
        let (x, y) = synthetic_batch(1, 32, 20.0, 9)?;
        let p = SsimParams::default();
        let value = |t: &Tensor<f64>| -> Result<f64> { metrics::ms_ssim(&x, t, &p) };
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let yv = tape.leaf(y.clone(), true);
        let m = ms_ssim_on_tape(&mut tape, xv, yv, &p)?;
        let s = tape.sum(m)?;
        tape.backward(s)?;
        let grad = tape.grad(yv).cloned().ok_or(Error::UnknownVar(yv.index()))?;
        let mut worst: f64 = 0.0;
        let mut probe = y.clone();
        for i in 0..y.len() {
            let orig = y.data()[i];
            probe.data_mut()[i] = orig + FD_STEP;
            let plus = value(&probe)?;
            probe.data_mut()[i] = orig - FD_STEP;
            let minus = value(&probe)?;
            probe.data_mut()[i] = orig;
            worst = worst.max(relative_error(grad.data()[i], (plus - minus) / (2.0 * FD_STEP)));
        }
        Ok((
            worst <= GRAD_TOLERANCE,
            format!(
                "{} scales, {} pixels, max rel error {worst:.3e}",
                p.effective_scales(32, 32),
                y.len()
            ),
        ))
    })
}

/// `ssim(x,x) = ms_ssim(x,x) = 1`, symmetry, PSNR of identical images.
pub fn check_metric_identities() -> CheckResult {
    timed("metric identities", || {
        let (x, y) = synthetic_batch(1, 40, 25.0, 5)?;
        let p = SsimParams::default();
        let self_ssim = metrics::ssim(&x, &x, &p)?;
        let self_ms = metrics::ms_ssim(&x, &x, &p)?;
        let asym_ssim = (metrics::ssim(&x, &y, &p)? - metrics::ssim(&y, &x, &p)?).abs();
        let asym_ms = (metrics::ms_ssim(&x, &y, &p)? - metrics::ms_ssim(&y, &x, &p)?).abs();
        let inf = metrics::psnr(&x, &x, 1.0)?;
        let ok = (self_ssim - 1.0).abs() <= 1e-6
            && (self_ms - 1.0).abs() <= 1e-6
            && asym_ssim <= 1e-9
            && asym_ms <= 1e-9
            && inf == f64::INFINITY;
        Ok((
            ok,
            format!("ssim(x,x)={self_ssim:.9} ms_ssim(x,x)={self_ms:.9} asym {asym_ssim:.1e}/{asym_ms:.1e}"),
        ))
    })
}

fn patch_set(clean: &Tensor<f64>, noisy: &Tensor<f64>) -> Result<PatchSet<f64>> {
    let [n, _, s, _] = clean.dims4()?;
    Ok(PatchSet {
        patch_size: s,
        sigma: 25.0,
        entries: (0..n)
            .map(|i| PatchEntry {
                file: "synthetic".into(),
                index: i,
                transform: 0,
                noise_seed: 0,
            })
            .collect(),
        clean: (0..n).map(|i| clean.sample(i)).collect::<Result<_>>()?,
        noisy: (0..n).map(|i| noisy.sample(i)).collect::<Result<_>>()?,
    })
}

/// Stage 2 leaves every non-final parameter and every buffer bit-identical.
pub fn check_freeze_invariant() -> CheckResult {
    timed("stage-2 freeze invariant", || {
        let mut net = Network::<f64>::build(micro_config(), 8)?;
        let (clean, noisy) = synthetic_batch(4, 16, 25.0, 6)?;
        let set = patch_set(&clean, &noisy)?;
        let before = net.clone();
        let config = TrainConfig {
            batch_size: 2,
            learning_rate: 1e-2,
            ..TrainConfig::stage2()
        };
        train_stage2(&mut net, &set, None, &config)?;
        let mut frozen_changed = 0;
        let mut final_changed = 0;
        for (a, b) in before.params().params().iter().zip(net.params().params()) {
            let same = a
                .value
                .data()
                .iter()
                .zip(b.value.data())
                .all(|(x, y)| x.to_bits() == y.to_bits());
            match (Network::<f64>::is_final_layer_param(&a.name), same) {
                (false, false) => frozen_changed += 1,
                (true, false) => final_changed += 1,
                _ => {}
            }
        }
        let buffers_same = before
            .params()
            .buffers()
            .iter()
            .zip(net.params().buffers())
            .all(|(a, b)| {
                a.value
                    .data()
                    .iter()
                    .zip(b.value.data())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
            });
        Ok((
            frozen_changed == 0 && buffers_same && final_changed > 0,
            format!("{frozen_changed} frozen tensors changed, buffers identical: {buffers_same}, final tensors updated: {final_changed}"),
        ))
    })
}

/// PGM encode/decode and checkpoint save/load/save are byte-identical.
pub fn check_round_trips() -> CheckResult {
    timed("PGM and checkpoint round trips", || {
        let img = GrayImage::new(7, 5, (0..35).map(|i| (i * 73 % 256) as u8).collect())?;
        let bytes = encode_pgm(&img);
        let pgm_ok = decode_pgm(&bytes)
            .map(|d| encode_pgm(&d) == bytes && d == img)
            .unwrap_or(false);
        let net = Network::<f32>::build(micro_config(), 2)?;
        let first = crate::model::to_bytes(&net);
        let second = crate::model::to_bytes(&crate::model::from_bytes::<f32>(&first)?);
        Ok((
            pgm_ok && first == second,
            format!(
                "pgm {pgm_ok}, checkpoint {} bytes identical: {}",
                first.len(),
                first == second
            ),
        ))
    })
}

/// The full battery with the library convolution.
pub fn run_all() -> Vec<CheckResult> {
    run_with_conv(conv2d)
}

/// The full battery with a caller-supplied convolution under test.
pub fn run_with_conv(conv: ConvFn) -> Vec<CheckResult> {
    vec![
        check_conv(conv, 100, 1),
        check_network_gradients(LossKind::MseResidual),
        check_network_gradients(LossKind::Combined),
        check_ms_ssim_gradient(),
        check_metric_identities(),
        check_freeze_invariant(),
        check_round_trips(),
    ]
}
