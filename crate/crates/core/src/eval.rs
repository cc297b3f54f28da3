//! Whole-image evaluation reports and difference images.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{add_awgn, list_pgm_files, read_pgm, seed_for_name, GrayImage, NoiseSpec};
use crate::error::{Error, Result};
use crate::metrics::{self, SsimParams};
use crate::model::Network;
use crate::tensor::{Real, Tensor};

/// Metrics for one image. PSNR uses peak 1 on `[0, 1]` data, which equals
/// the 8-bit convention with peak 255.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub file: String,
    pub sigma: f64,
    pub noise_seed: u64,
    pub noisy_psnr: f64,
    /// Noisy image clipped to `[0, 1]` first.
    pub noisy_psnr_clipped: f64,
    pub noisy_ssim: f64,
    /// Denoised output clipped to `[0, 1]`.
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowError {
    pub file: String,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Averages {
    pub noisy_psnr: f64,
    pub noisy_psnr_clipped: f64,
    pub noisy_ssim: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub variant: String,
    pub parameters: usize,
    pub checkpoint_digest: Option<String>,
    pub sigma: f64,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub errors: Vec<RowError>,
}

impl MetricReport {
    /// Arithmetic means over the successful rows.
    pub fn averages(&self) -> Option<Averages> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mean = |f: fn(&ReportRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(Averages {
            noisy_psnr: mean(|r| r.noisy_psnr),
            noisy_psnr_clipped: mean(|r| r.noisy_psnr_clipped),
            noisy_ssim: mean(|r| r.noisy_ssim),
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            ms_ssim: mean(|r| r.ms_ssim),
        })
    }

    fn header(&self) -> String {
        format!(
            "# variant {} parameters {} checkpoint {} sigma {} seed {}\n",
            self.variant,
            self.parameters,
            self.checkpoint_digest.as_deref().unwrap_or("none"),
            self.sigma,
            self.seed
        )
    }

    /// Aligned plain-text table with an average row.
    pub fn to_table(&self) -> String {
        let mut out = self.header();
        let width = self
            .rows
            .iter()
            .map(|r| r.file.len())
            .chain(self.errors.iter().map(|e| e.file.len()))
            .chain(["average".len()])
            .max()
            .unwrap_or(7);
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>10}  {:>12}  {:>10}  {:>10}  {:>8}  {:>8}",
            "image", "sigma", "noisy_psnr", "noisy_clip", "noisy_ssim", "psnr", "ssim", "ms_ssim"
        );
        let line = |out: &mut String, name: &str, sigma: f64, v: [f64; 6]| {
            let _ = writeln!(
                out,
                "{name:<width$}  {sigma:>6.1}  {:>10.4}  {:>12.4}  {:>10.4}  {:>10.4}  {:>8.4}  {:>8.4}",
                v[0], v[1], v[2], v[3], v[4], v[5]
            );
        };
        for r in &self.rows {
            line(
                &mut out,
                &r.file,
                r.sigma,
                [
                    r.noisy_psnr,
                    r.noisy_psnr_clipped,
                    r.noisy_ssim,
                    r.psnr,
                    r.ssim,
                    r.ms_ssim,
                ],
            );
        }
        if let Some(a) = self.averages() {
            line(
                &mut out,
                "average",
                self.sigma,
                [
                    a.noisy_psnr,
                    a.noisy_psnr_clipped,
                    a.noisy_ssim,
                    a.psnr,
                    a.ssim,
                    a.ms_ssim,
                ],
            );
        }
        for e in &self.errors {
            let _ = writeln!(out, "{:<width$}  error: {}", e.file, e.message);
        }
        out
    }

    /// Tab-separated rows with full precision, one `row`, `average` or
    /// `error` record per line.
    pub fn to_delimited(&self) -> String {
        let mut out = self.header();
        out.push_str(
            "kind\tfile\tsigma\tnoise_seed\tnoisy_psnr\tnoisy_psnr_clipped\tnoisy_ssim\tpsnr\tssim\tms_ssim\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "row\t{}\t{}\t{}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
                r.file,
                r.sigma,
                r.noise_seed,
                r.noisy_psnr,
                r.noisy_psnr_clipped,
                r.noisy_ssim,
                r.psnr,
                r.ssim,
                r.ms_ssim
            );
        }
        if let Some(a) = self.averages() {
            let _ = writeln!(
                out,
                "average\t-\t{}\t-\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}\t{:.17e}",
                self.sigma, a.noisy_psnr, a.noisy_psnr_clipped, a.noisy_ssim, a.psnr, a.ssim, a.ms_ssim
            );
        }
        for e in &self.errors {
            let _ = writeln!(out, "error\t{}\t{}", e.file, e.message.replace(['\t', '\n'], " "));
        }
        out
    }
}

fn clip01<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    t.map(|v| v.clamp(T::zero(), T::one()))
}

/// Noisy and denoised versions of one clean image.
pub struct Restoration<T> {
    pub clean: Tensor<T>,
    pub noisy: Tensor<T>,
    /// Unclipped `noisy - R(noisy)`.
    pub denoised: Tensor<T>,
}

/// Corrupts `image` with `noise` and denoises the whole image in one pass.
pub fn restore<T: Real>(net: &Network<T>, image: &GrayImage, noise: NoiseSpec) -> Result<Restoration<T>> {
    let clean = image.to_tensor::<T>();
    let noisy = add_awgn(&clean, noise)?;
    let denoised = net.denoise(&noisy)?;
    Ok(Restoration { clean, noisy, denoised })
}

/// Metrics of one restoration, as a report row.
pub fn score<T: Real>(file: &str, noise: NoiseSpec, r: &Restoration<T>) -> Result<ReportRow> {
    let p = SsimParams::default();
    let denoised = clip01(&r.denoised);
    let noisy_clipped = clip01(&r.noisy);
    Ok(ReportRow {
        file: file.to_string(),
        sigma: noise.sigma,
        noise_seed: noise.seed,
        noisy_psnr: metrics::psnr(&r.clean, &r.noisy, 1.0)?,
        noisy_psnr_clipped: metrics::psnr(&r.clean, &noisy_clipped, 1.0)?,
        noisy_ssim: metrics::ssim(&r.clean, &noisy_clipped, &p)?,
        psnr: metrics::psnr(&r.clean, &denoised, 1.0)?,
        ssim: metrics::ssim(&r.clean, &denoised, &p)?,
        ms_ssim: metrics::ms_ssim(&r.clean, &denoised, &p)?,
    })
}

/// Evaluates every `.pgm` in `dir` (sorted by name). Each image gets the
/// noise seed `seed_for_name(noise.seed, file name)`. Unreadable or
/// unsuitable images become row errors.
pub fn evaluate<T: Real>(net: &Network<T>, dir: impl AsRef<Path>, noise: NoiseSpec) -> Result<MetricReport> {
    noise.validate()?;
    let dir = dir.as_ref();
    let files = list_pgm_files(dir)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no .pgm images in {}", dir.display())));
    }
    let mut report = MetricReport {
        variant: net.config().variant.to_string(),
        parameters: net.count_parameters().total,
        checkpoint_digest: None,
        sigma: noise.sigma,
        seed: noise.seed,
        rows: Vec::new(),
        errors: Vec::new(),
    };
    for path in files {
        let file = path.file_name().unwrap().to_string_lossy().into_owned();
        let spec = noise.with_seed(seed_for_name(noise.seed, &file));
        let row = read_pgm(&path)
            .and_then(|img| restore(net, &img, spec))
            .and_then(|r| score(&file, spec, &r));
        match row {
            Ok(row) => report.rows.push(row),
            Err(e) => report.errors.push(RowError {
                file,
                message: e.to_string(),
            }),
        }
    }
    Ok(report)
}

/// `clip(0.5 + gain * (test - reference), 0, 1)` as an 8-bit image; zero
/// error maps to mid-gray (128).
pub fn diff_image<T: Real>(reference: &Tensor<T>, test: &Tensor<T>, gain: f64) -> Result<GrayImage> {
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::InvalidArgument(format!("gain {gain} must be positive")));
    }
    let d = reference.zip_map(test, "diff_image", |r, t| {
        let v = 0.5 + gain * (t.to_f64_lossy() - r.to_f64_lossy());
        T::from_f64_lossy(v.clamp(0.0, 1.0))
    })?;
    GrayImage::from_tensor(&d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(&[1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn zero_difference_is_mid_gray() {
        let a = tensor(&[0.1, 0.7, 0.3]);
        assert_eq!(diff_image(&a, &a, 4.0).unwrap().pixels(), &[128, 128, 128]);
    }

    #[test]
    fn gain_is_linear_before_clipping() {
        let a = tensor(&[0.5, 0.5]);
        let b = tensor(&[0.52, 0.46]);
        let one = diff_image(&a, &b, 1.0).unwrap();
        let two = diff_image(&a, &b, 2.0).unwrap();
        for (&o, &t) in one.pixels().iter().zip(two.pixels()) {
            let (o, t) = (o as f64 - 127.5, t as f64 - 127.5);
            assert!((t - 2.0 * o).abs() <= 1.0, "{o} {t}");
        }
    }

    #[test]
    fn diff_rejects_bad_input() {
        let a = tensor(&[0.5, 0.5]);
        assert!(diff_image(&a, &a, 0.0).is_err());
        assert!(diff_image(&a, &tensor(&[0.5]), 1.0).is_err());
    }
}
