//! PSNR, SSIM and multi-scale SSIM.
//!
//! SSIM statistics use a normalized gaussian window applied as a valid
//! (unpadded) convolution. MS-SSIM multiplies the mean contrast-structure
//! term of every scale but the coarsest, and the mean full SSIM of the
//! coarsest scale, each raised to its scale weight. Scales are produced by
//! 2x2 average pooling. Both SSIM variants are built from tape operations,
//! so MS-SSIM is differentiable with respect to either image.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Standard five-scale MS-SSIM exponents.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

/// Smallest extent at which a scale is still evaluated.
pub const MIN_SCALE_EXTENT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct SsimParams {
    pub window_size: usize,
    pub window_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
    pub scales: usize,
    pub scale_weights: Vec<f64>,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window_size: 11,
            window_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
            scales: 5,
            scale_weights: MS_SSIM_WEIGHTS.to_vec(),
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 || self.window_size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "window size {} must be odd and positive",
                self.window_size
            )));
        }
        if self.scale_weights.len() != self.scales || self.scales == 0 {
            return Err(Error::InvalidArgument(format!(
                "{} scale weights for {} scales",
                self.scale_weights.len(),
                self.scales
            )));
        }
        if self.window_sigma <= 0.0 || self.dynamic_range <= 0.0 {
            return Err(Error::InvalidArgument(
                "window sigma and dynamic range must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Number of scales usable for an `h x w` image: the configured count,
    /// reduced until the coarsest level is at least [`MIN_SCALE_EXTENT`].
    pub fn effective_scales(&self, h: usize, w: usize) -> usize {
        let mut s = self.scales;
        while s > 0 && (h.min(w) >> (s - 1)) < MIN_SCALE_EXTENT {
            s -= 1;
        }
        s
    }

    /// Weights of the first `levels` scales, renormalized to sum to one.
    pub fn weights_for(&self, levels: usize) -> Vec<f64> {
        let w = &self.scale_weights[..levels];
        let total: f64 = w.iter().sum();
        w.iter().map(|v| v / total).collect()
    }
}

/// `size x size` gaussian window, normalized to sum 1, shaped `[1,1,size,size]`.
pub fn gaussian_window<T: Real>(size: usize, sigma: f64) -> Tensor<T> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let data = g
        .iter()
        .flat_map(|a| g.iter().map(move |b| T::from_f64_lossy(a * b)))
        .collect();
    Tensor::from_vec(&[1, 1, size, size], data).expect("window shape")
}

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(reference: &Tensor<T>, test: &Tensor<T>, peak: f64) -> Result<f64> {
    reference.check_same_shape(test, "psnr")?;
    if peak <= 0.0 {
        return Err(Error::InvalidArgument(format!("peak {peak} must be positive")));
    }
    let mse = mse(reference, test)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

pub fn mse<T: Real>(reference: &Tensor<T>, test: &Tensor<T>) -> Result<f64> {
    reference.check_same_shape(test, "mse")?;
    let sum: f64 = reference
        .data()
        .iter()
        .zip(test.data())
        .map(|(&a, &b)| (a.to_f64_lossy() - b.to_f64_lossy()).powi(2))
        .sum();
    Ok(sum / reference.len() as f64)
}

struct SsimMaps {
    full: Var,
    contrast_structure: Var,
}

fn ssim_maps<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, window: usize, p: &SsimParams) -> Result<SsimMaps> {
    let win = tape.constant(gaussian_window(window, p.window_sigma));
    let c1 = T::from_f64_lossy((p.k1 * p.dynamic_range).powi(2));
    let c2 = T::from_f64_lossy((p.k2 * p.dynamic_range).powi(2));
    let two = T::from_f64_lossy(2.0);

    let mu_x = tape.conv2d(x, win, None, 0)?;
    let mu_y = tape.conv2d(y, win, None, 0)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let xy = tape.mul(x, y)?;
    let e_xx = tape.conv2d(xx, win, None, 0)?;
    let e_yy = tape.conv2d(yy, win, None, 0)?;
    let e_xy = tape.conv2d(xy, win, None, 0)?;
    let mu_xx = tape.mul(mu_x, mu_x)?;
    let mu_yy = tape.mul(mu_y, mu_y)?;
    let mu_xy = tape.mul(mu_x, mu_y)?;
    let var_x = tape.sub(e_xx, mu_xx)?;
    let var_y = tape.sub(e_yy, mu_yy)?;
    let cov = tape.sub(e_xy, mu_xy)?;

    let cs_num = tape.scale(cov, two)?;
    let cs_num = tape.add_scalar(cs_num, c2)?;
    let cs_den = tape.add(var_x, var_y)?;
    let cs_den = tape.add_scalar(cs_den, c2)?;
    let contrast_structure = tape.div(cs_num, cs_den)?;

    let l_num = tape.scale(mu_xy, two)?;
    let l_num = tape.add_scalar(l_num, c1)?;
    let l_den = tape.add(mu_xx, mu_yy)?;
    let l_den = tape.add_scalar(l_den, c1)?;
    let luminance = tape.div(l_num, l_den)?;
    let full = tape.mul(luminance, contrast_structure)?;
    Ok(SsimMaps {
        full,
        contrast_structure,
    })
}

fn check_pair<T: Real>(tape: &Tape<T>, x: Var, y: Var) -> Result<[usize; 4]> {
    let a = tape.try_value(x)?;
    let b = tape.try_value(y)?;
    a.check_same_shape(b, "ssim")?;
    let dims = a.dims4()?;
    if dims[1] != 1 {
        return Err(Error::ChannelMismatch {
            op: "ssim",
            expected: 1,
            actual: dims[1],
        });
    }
    Ok(dims)
}

/// Single-scale SSIM per sample on the tape: `[N,1,H,W]` pair to `[N]`.
pub fn ssim_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    p.validate()?;
    let [_, _, h, w] = check_pair(tape, x, y)?;
    if h < p.window_size || w < p.window_size {
        return Err(Error::InvalidShape {
            shape: tape.value(x).shape().to_vec(),
            reason: format!("smaller than the {0}x{0} SSIM window", p.window_size),
        });
    }
    let maps = ssim_maps(tape, x, y, p.window_size, p)?;
    tape.mean_per_sample(maps.full)
}

/// MS-SSIM per sample on the tape: `[N,1,H,W]` pair to `[N]`, differentiable
/// in both inputs.
pub fn ms_ssim_on_tape<T: Real>(tape: &mut Tape<T>, x: Var, y: Var, p: &SsimParams) -> Result<Var> {
    p.validate()?;
    let [n, _, h, w] = check_pair(tape, x, y)?;
    let levels = p.effective_scales(h, w);
    if levels == 0 {
        return Err(Error::InvalidShape {
            shape: tape.value(x).shape().to_vec(),
            reason: format!("MS-SSIM needs extents of at least {MIN_SCALE_EXTENT}"),
        });
    }
    let weights = p.weights_for(levels);
    let (mut x, mut y) = (x, y);
    let mut product = tape.constant(Tensor::ones(&[n]));
    for (j, &weight) in weights.iter().enumerate() {
        let [_, _, hj, wj] = tape.value(x).dims4()?;
        let extent = hj.min(wj);
        let window = p.window_size.min(if extent % 2 == 1 { extent } else { extent - 1 });
        let maps = ssim_maps(tape, x, y, window, p)?;
        let coarsest = j + 1 == levels;
        let term = if coarsest { maps.full } else { maps.contrast_structure };
        let mean = tape.mean_per_sample(term)?;
        let mean = tape.relu(mean)?;
        let powered = tape.powf(mean, T::from_f64_lossy(weight))?;
        product = tape.mul(product, powered)?;
        if !coarsest {
            x = tape.avg_pool2(x)?;
            y = tape.avg_pool2(y)?;
        }
    }
    Ok(product)
}

fn evaluate<T: Real>(
    reference: &Tensor<T>,
    test: &Tensor<T>,
    f: impl FnOnce(&mut Tape<T>, Var, Var) -> Result<Var>,
) -> Result<f64> {
    reference.check_same_shape(test, "ssim")?;
    let mut tape = Tape::new();
    let x = tape.constant(reference.clone());
    let y = tape.constant(test.clone());
    let per_sample = f(&mut tape, x, y)?;
    let v = tape.value(per_sample);
    Ok(v.data().iter().map(|v| v.to_f64_lossy()).sum::<f64>() / v.len() as f64)
}

/// Mean SSIM over the valid region, averaged over the batch.
pub fn ssim<T: Real>(reference: &Tensor<T>, test: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    evaluate(reference, test, |t, x, y| ssim_on_tape(t, x, y, p))
}

/// MS-SSIM averaged over the batch.
pub fn ms_ssim<T: Real>(reference: &Tensor<T>, test: &Tensor<T>, p: &SsimParams) -> Result<f64> {
    evaluate(reference, test, |t, x, y| ms_ssim_on_tape(t, x, y, p))
}
