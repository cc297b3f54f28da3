mod common;

use common::*;
use dbdenoise::tensor::{conv2d, depthwise_conv2d};
use dbdenoise::{Tape, Tensor};
use rand::Rng;

struct Case {
    x: Tensor<f64>,
    w: Tensor<f64>,
    b: Option<Tensor<f64>>,
    pad: usize,
}

fn random_case(r: &mut rand_chacha::ChaCha8Rng, depthwise: bool) -> Case {
    loop {
        let (n, c) = (r.random_range(1..=4), r.random_range(1..=4));
        let o = if depthwise { c } else { r.random_range(1..=4) };
        let (h, w) = (r.random_range(1..=8), r.random_range(1..=8));
        let k = [1, 3, 5][r.random_range(0..3)];
        let pad = r.random_range(0..=k / 2);
        if h + 2 * pad < k || w + 2 * pad < k {
            continue;
        }
        let wc = if depthwise { 1 } else { c };
        let x = random_tensor(r, &[n, c, h, w], -1.0, 1.0);
        let wt = random_tensor(r, &[o, wc, k, k], -1.0, 1.0);
        let b = r.random_bool(0.5).then(|| random_tensor(r, &[o], -1.0, 1.0));
        return Case { x, w: wt, b, pad };
    }
}

#[test]
fn conv2d_matches_brute_force_f64() {
    let mut r = rng(100);
    for i in 0..100 {
        let c = random_case(&mut r, false);
        let got = conv2d(&c.x, &c.w, c.b.as_ref(), c.pad).unwrap();
        let want = brute_conv2d(&c.x, &c.w, c.b.as_ref(), c.pad);
        assert_eq!(got.shape(), want.shape(), "case {i}");
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10, "case {i}");
    }
}

#[test]
fn conv2d_matches_brute_force_f32() {
    let mut r = rng(101);
    for i in 0..100 {
        let c = random_case(&mut r, false);
        let got = conv2d(
            &c.x.cast::<f32>(),
            &c.w.cast::<f32>(),
            c.b.as_ref().map(|b| b.cast::<f32>()).as_ref(),
            c.pad,
        )
        .unwrap();
        let want = brute_conv2d(&c.x, &c.w, c.b.as_ref(), c.pad);
        let err = got.cast::<f64>().max_abs_diff(&want).unwrap();
        assert!(err <= 1e-5, "case {i}: {err}");
    }
}

#[test]
fn depthwise_matches_brute_force() {
    let mut r = rng(102);
    for i in 0..100 {
        let c = random_case(&mut r, true);
        let got = depthwise_conv2d(&c.x, &c.w, c.b.as_ref(), c.pad).unwrap();
        let want = brute_depthwise(&c.x, &c.w, c.b.as_ref(), c.pad);
        assert!(got.max_abs_diff(&want).unwrap() <= 1e-10, "case {i}");
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut r = rng(103);
    for (i, depthwise) in (0..20).map(|i| (i, i % 2 == 1)) {
        let c = random_case(&mut r, depthwise);
        let b =
            c.b.clone()
                .unwrap_or_else(|| random_tensor(&mut r, &[c.w.shape()[0]], -1.0, 1.0));
        let forward = |x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>| {
            let out = if depthwise {
                brute_depthwise(x, w, Some(b), c.pad)
            } else {
                brute_conv2d(x, w, Some(b), c.pad)
            };
            let mut t = Tape::new();
            let v = t.constant(out);
            let s = weighted_sum(&mut t, v, 7);
            t.value(s).data()[0]
        };
        let mut tape = Tape::new();
        let (xv, wv, bv) = (
            tape.leaf(c.x.clone(), true),
            tape.leaf(c.w.clone(), true),
            tape.leaf(b.clone(), true),
        );
        let out = if depthwise {
            tape.depthwise_conv2d(xv, wv, Some(bv), c.pad).unwrap()
        } else {
            tape.conv2d(xv, wv, Some(bv), c.pad).unwrap()
        };
        let s = weighted_sum(&mut tape, out, 7);
        tape.backward(s).unwrap();
        let nx = numeric_gradient(&c.x, 1e-4, |x| forward(x, &c.w, &b));
        let nw = numeric_gradient(&c.w, 1e-4, |w| forward(&c.x, w, &b));
        let nb = numeric_gradient(&b, 1e-4, |bb| forward(&c.x, &c.w, bb));
        for (var, num) in [(xv, nx), (wv, nw), (bv, nb)] {
            for (a, n) in tape.grad(var).unwrap().data().iter().zip(&num) {
                assert!(relative_error(*a, *n, 1e-6) <= 1e-6, "case {i}: {a} vs {n}");
            }
        }
    }
}
