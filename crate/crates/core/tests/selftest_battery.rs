use dbdenoise::selftest::{check_conv, run_all, run_with_conv};
use dbdenoise::tensor::conv2d;
use dbdenoise::{Result, Tensor};

/// Drops the last input channel: a plausible indexing bug.
fn skips_last_channel(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, p: usize) -> Result<Tensor<f64>> {
    let [n, c, h, wd] = x.dims4()?;
    if c == 1 {
        return conv2d(x, w, b, p);
    }
    let mut xz = x.clone();
    for i in 0..n {
        let start = (i * c + c - 1) * h * wd;
        xz.data_mut()[start..start + h * wd].fill(0.0);
    }
    conv2d(&xz, w, b, p)
}

#[test]
fn full_battery_passes() {
    for r in run_all() {
        assert!(r.passed, "{}", r.line());
    }
}

#[test]
fn injected_conv_bug_fails_the_oracle_check() {
    let results = run_with_conv(skips_last_channel);
    let conv = results.iter().find(|r| r.name.contains("conv2d")).unwrap();
    assert!(!conv.passed, "{}", conv.line());
    assert!(!check_conv(skips_last_channel, 100, 9).passed);
}
