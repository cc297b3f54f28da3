//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use dbdenoise::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Zero-padded cross-correlation by explicit summation with signed offsets.
pub fn brute_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2] as isize, x.shape()[3] as isize);
    let (o, k) = (w.shape()[0], w.shape()[2] as isize);
    let p = pad as isize;
    let ho = h + 2 * p - k + 1;
    let wo = wd + 2 * p - k + 1;
    let at = |t: &Tensor<f64>, idx: [usize; 4]| {
        let s = t.shape();
        t.data()[((idx[0] * s[1] + idx[1]) * s[2] + idx[2]) * s[3] + idx[3]]
    };
    let mut out = Vec::new();
    for bi in 0..n {
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.map(|b| b.data()[oc]).unwrap_or(0.0);
                    for ic in 0..c {
                        for u in 0..k {
                            for v in 0..k {
                                let (y, xx) = (i + u - p, j + v - p);
                                if y >= 0 && y < h && xx >= 0 && xx < wd {
                                    acc += at(w, [oc, ic, u as usize, v as usize])
                                        * at(x, [bi, ic, y as usize, xx as usize]);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::from_vec(&[n, o, ho as usize, wo as usize], out).unwrap()
}

/// Per-channel convolution: channel `c` of the output uses filter `w[c, 0]`.
pub fn brute_depthwise(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, pad: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4().unwrap();
    let mut planes = Vec::new();
    for bi in 0..n {
        for ci in 0..c {
            let xs = x.sample(bi).unwrap();
            let plane = Tensor::from_vec(&[1, 1, h, wd], xs.data()[ci * h * wd..(ci + 1) * h * wd].to_vec()).unwrap();
            let k = w.shape()[2];
            let filt = Tensor::from_vec(&[1, 1, k, k], w.data()[ci * k * k..(ci + 1) * k * k].to_vec()).unwrap();
            let bias = b.map(|b| Tensor::from_vec(&[1], vec![b.data()[ci]]).unwrap());
            planes.push(brute_conv2d(&plane, &filt, bias.as_ref(), pad));
        }
    }
    let [_, _, ho, wo] = planes[0].dims4().unwrap();
    let data = planes.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::from_vec(&[n, c, ho, wo], data).unwrap()
}

pub fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let mut g = Vec::new();
    for i in 0..size {
        for j in 0..size {
            let (dy, dx) = (i as f64 - r, j as f64 - r);
            g.push((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure over every valid window position,
/// computed pixel by pixel.
pub fn naive_ssim_cs(x: &[f64], y: &[f64], h: usize, w: usize, win: usize) -> (f64, f64) {
    let g = gaussian(win, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (mut ssim, mut cs, mut count) = (0.0, 0.0, 0.0);
    for i in 0..=h - win {
        for j in 0..=w - win {
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let k = g[u * win + v];
                    mx += k * x[(i + u) * w + j + v];
                    my += k * y[(i + u) * w + j + v];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for u in 0..win {
                for v in 0..win {
                    let k = g[u * win + v];
                    let (a, b) = (x[(i + u) * w + j + v] - mx, y[(i + u) * w + j + v] - my);
                    vx += k * a * a;
                    vy += k * b * b;
                    cxy += k * a * b;
                }
            }
            let contrast = (2.0 * cxy + c2) / (vx + vy + c2);
            let luminance = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            ssim += luminance * contrast;
            cs += contrast;
            count += 1.0;
        }
    }
    (ssim / count, cs / count)
}

fn pool(x: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(h2 * w2);
    for i in 0..h2 {
        for j in 0..w2 {
            out.push(
                (x[2 * i * w + 2 * j]
                    + x[2 * i * w + 2 * j + 1]
                    + x[(2 * i + 1) * w + 2 * j]
                    + x[(2 * i + 1) * w + 2 * j + 1])
                    / 4.0,
            );
        }
    }
    (out, h2, w2)
}

/// MS-SSIM with the library's documented scale rule: scales while the
/// coarsest extent stays >= 8, window shrunk to the largest odd size that
/// fits, weights renormalized, cs at every scale but the coarsest.
pub fn naive_ms_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut levels = 5;
    while levels > 0 && (h.min(w) >> (levels - 1)) < 8 {
        levels -= 1;
    }
    let total: f64 = weights[..levels].iter().sum();
    let (mut x, mut y, mut h, mut w) = (x.to_vec(), y.to_vec(), h, w);
    let mut result = 1.0;
    for (j, wt) in weights[..levels].iter().enumerate() {
        let e = h.min(w);
        let win = 11.min(if e % 2 == 1 { e } else { e - 1 });
        let (s, cs) = naive_ssim_cs(&x, &y, h, w, win);
        let term = if j + 1 == levels { s } else { cs };
        result *= term.max(0.0).powf(wt / total);
        let (px, ph, pw) = pool(&x, h, w);
        let (py, _, _) = pool(&y, h, w);
        x = px;
        y = py;
        h = ph;
        w = pw;
    }
    result
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central-difference gradient of a scalar function of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, h: f64, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let plus = f(&probe);
            probe.data_mut()[i] = orig - h;
            let minus = f(&probe);
            probe.data_mut()[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Reduces any tape value to a scalar with fixed random weights so every
/// output element contributes a distinct coefficient.
pub fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let mut r = rng(seed);
    let w = random_tensor(&mut r, &shape, -1.0, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(v, wv).unwrap();
    tape.sum(prod).unwrap()
}
