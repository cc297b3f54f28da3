//! Both training losses on the pairs=2 micro network against central
//! differences of an independently evaluated loss.

mod common;

use common::*;
use dbdenoise::layers::Mode;
use dbdenoise::selftest::{micro_config, synthetic_batch, GRADCHECK_DATA_SEED, GRADCHECK_NET_SEED};
use dbdenoise::training::{network_loss, LossKind};
use dbdenoise::{Network, Tape, Tensor};

/// Loss recomputed outside the tape loss helpers: the residual comes from
/// the network, the loss terms from the pixel-loop oracles.
fn oracle_loss(net: &mut Network<f64>, clean: &Tensor<f64>, noisy: &Tensor<f64>, kind: LossKind) -> f64 {
    let mut tape = Tape::new();
    let pass = net.forward(&mut tape, noisy, Mode::Train).unwrap();
    let r = tape.value(pass.output);
    let [n, _, h, w] = clean.dims4().unwrap();
    let mse: f64 = r
        .data()
        .iter()
        .zip(noisy.data().iter().zip(clean.data()))
        .map(|(r, (y, x))| (r - (y - x)).powi(2))
        .sum::<f64>()
        / (2.0 * n as f64);
    match kind {
        LossKind::MseResidual => mse,
        LossKind::Combined => {
            let plane = h * w;
            let mean_ms: f64 = (0..n)
                .map(|i| {
                    let x = &clean.data()[i * plane..(i + 1) * plane];
                    let est: Vec<f64> = (0..plane)
                        .map(|j| noisy.data()[i * plane + j] - r.data()[i * plane + j])
                        .collect();
                    naive_ms_ssim(x, &est, h, w)
                })
                .sum::<f64>()
                / n as f64;
            1.0 - mean_ms + mse
        }
    }
}

fn check(kind: LossKind) {
    let mut net = Network::<f64>::build(micro_config(), GRADCHECK_NET_SEED).unwrap();
    assert_eq!(net.config().pairs, 2);
    let (clean, noisy) = synthetic_batch(1, 16, 25.0, GRADCHECK_DATA_SEED).unwrap();
    let mut tape = Tape::new();
    let (loss, pass) = network_loss(&mut net, &mut tape, &clean, &noisy, kind, Mode::Train).unwrap();
    let direct = oracle_loss(&mut net.clone(), &clean, &noisy, kind);
    assert!((tape.value(loss).data()[0] - direct).abs() <= 1e-10);
    tape.backward(loss).unwrap();
    let mut worst = (0.0, String::new());
    let mut checked = 0;
    for (pi, &var) in pass.binding.vars().iter().enumerate() {
        let analytic = tape.grad(var).unwrap().clone();
        let value = net.params().params()[pi].value.clone();
        let numeric = numeric_gradient(&value, 1e-4, |probe| {
            let mut n2 = net.clone();
            n2.params_mut().params_mut()[pi].value = probe.clone();
            oracle_loss(&mut n2, &clean, &noisy, kind)
        });
        for (i, (a, n)) in analytic.data().iter().zip(&numeric).enumerate() {
            let e = relative_error(*a, *n, 1e-6);
            checked += 1;
            if e > worst.0 {
                worst = (
                    e,
                    format!("{}[{i}] analytic {a} numeric {n}", net.params().params()[pi].name),
                );
            }
        }
    }
    assert_eq!(checked, net.count_parameters().total);
    assert!(worst.0 <= 1e-4, "{kind:?}: worst {:.3e} at {}", worst.0, worst.1);
}

#[test]
fn mse_residual_loss_gradients() {
    check(LossKind::MseResidual);
}

#[test]
fn combined_loss_gradients() {
    check(LossKind::Combined);
}
