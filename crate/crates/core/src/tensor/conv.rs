//! Convolution kernels: im2col + gemm for full convolutions, direct loops
//! for depthwise ones. Stride is always 1; output extent is
//! `H + 2 * padding - kh + 1`.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::{gemm, Real, Tensor, Trans};
use crate::error::{Error, Result};

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Enables or disables per-sample parallelism inside convolutions.
///
/// Samples are independent and weight gradients are always reduced in
/// sample order, so results do not depend on this switch.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

fn parallel() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0
    }
}

fn geometry<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    depthwise: bool,
    padding: usize,
) -> Result<ConvGeom> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if depthwise {
        if wcin != 1 || cout != cin {
            return Err(Error::ChannelMismatch {
                op,
                expected: cin,
                actual: cout,
            });
        }
    } else if wcin != cin {
        return Err(Error::ChannelMismatch {
            op,
            expected: wcin,
            actual: cin,
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::InvalidShape {
            shape: weight.shape().to_vec(),
            reason: "kernel extents must be odd".into(),
        });
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: format!("smaller than the {kh}x{kw} kernel with padding {padding}"),
        });
    }
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        pad: padding,
        ho: h + 2 * padding - kh + 1,
        wo: w + 2 * padding - kw + 1,
    })
}

fn check_bias<T: Real>(op: &'static str, bias: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::ShapeMismatch {
                op,
                left: vec![cout],
                right: b.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Range of output positions `o` for which `o + k - pad` lies in `0..len`.
#[inline]
fn valid_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out_len);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

fn im2col<T: Real>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                dst.fill(T::zero());
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - g.pad;
                    let ix0 = ox_lo + kx - g.pad;
                    let len = ox_hi - ox_lo;
                    dst[oy * g.wo + ox_lo..oy * g.wo + ox_hi]
                        .copy_from_slice(&xc[iy * g.w + ix0..iy * g.w + ix0 + len]);
                }
            }
        }
    }
}

fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.w, g.wo);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - g.pad;
                    let ix0 = ox_lo + kx - g.pad;
                    let s = &src[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    let d = &mut dxc[iy * g.w + ix0..iy * g.w + ix0 + s.len()];
                    for (a, &b) in d.iter_mut().zip(s) {
                        *a = *a + b;
                    }
                }
            }
        }
    }
}

/// Runs `f(sample_index, chunk)` over equal chunks, in parallel when enabled.
fn for_each_sample<T: Real>(out: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    if parallel() && out.len() > chunk {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Cross-correlation of `input [N,Cin,H,W]` with `weight [Cout,Cin,kh,kw]`,
/// zero padding, stride 1.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry("conv2d", input, weight, false, padding)?;
    check_bias("conv2d", bias, g.cout)?;
    let plane = g.out_plane();
    let in_len = g.cin * g.h * g.w;
    let k = g.cols_rows();
    let x = input.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); g.n * g.cout * plane];
    for_each_sample(&mut out, g.cout * plane, |n, o| {
        let xs = &x[n * in_len..(n + 1) * in_len];
        if g.is_pointwise() {
            gemm(Trans::No, Trans::No, g.cout, k, plane, wd, xs, T::zero(), o);
        } else {
            let mut cols = vec![T::zero(); k * plane];
            im2col(&g, xs, &mut cols);
            gemm(Trans::No, Trans::No, g.cout, k, plane, wd, &cols, T::zero(), o);
        }
        if let Some(b) = bias {
            for (co, row) in o.chunks_mut(plane).enumerate() {
                let bv = b.data()[co];
                row.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    });
    Tensor::from_vec(&[g.n, g.cout, g.ho, g.wo], out)
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = geometry("conv2d", input, weight, false, padding)?;
    let plane = g.out_plane();
    let in_len = g.cin * g.h * g.w;
    let k = g.cols_rows();
    let x = input.data();
    let wd = weight.data();
    let dy = grad_out.data();

    let dweight = need[1].then(|| {
        let mut dw = vec![T::zero(); g.cout * k];
        let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * plane }];
        for n in 0..g.n {
            let xs = &x[n * in_len..(n + 1) * in_len];
            let dys = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
            let cols_ref: &[T] = if g.is_pointwise() {
                xs
            } else {
                im2col(&g, xs, &mut cols);
                &cols
            };
            gemm(
                Trans::No,
                Trans::Yes,
                g.cout,
                plane,
                k,
                dys,
                cols_ref,
                T::one(),
                &mut dw,
            );
        }
        dw
    });

    let dinput = need[0].then(|| {
        let mut dx = vec![T::zero(); g.n * in_len];
        for_each_sample(&mut dx, in_len, |n, dxs| {
            let dys = &dy[n * g.cout * plane..(n + 1) * g.cout * plane];
            if g.is_pointwise() {
                gemm(Trans::Yes, Trans::No, k, g.cout, plane, wd, dys, T::zero(), dxs);
            } else {
                let mut dcols = vec![T::zero(); k * plane];
                gemm(Trans::Yes, Trans::No, k, g.cout, plane, wd, dys, T::zero(), &mut dcols);
                col2im_add(&g, &dcols, dxs);
            }
        });
        dx
    });

    let dbias = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let off = (n * g.cout + co) * plane;
                *acc = dy[off..off + plane].iter().fold(*acc, |a, &v| a + v);
            }
        }
        db
    });

    Ok(ConvGrads {
        input: dinput.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: dweight.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?,
        bias: dbias.map(|d| Tensor::from_vec(&[g.cout], d)).transpose()?,
    })
}

/// Per-channel spatial convolution: `weight [C,1,kh,kw]`, one filter per
/// input channel.
pub fn depthwise_conv2d<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = geometry("depthwise_conv2d", input, weight, true, padding)?;
    check_bias("depthwise_conv2d", bias, g.cin)?;
    let x = input.data();
    let wd = weight.data();
    let plane_in = g.h * g.w;
    let plane = g.out_plane();
    let mut out = vec![T::zero(); g.n * g.cin * plane];
    for (idx, o) in out.chunks_mut(plane).enumerate() {
        let c = idx % g.cin;
        let xs = &x[idx * plane_in..(idx + 1) * plane_in];
        let ws = &wd[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
        let b = bias.map_or(T::zero(), |b| b.data()[c]);
        o.fill(b);
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.w, g.wo);
                let wv = ws[ky * g.kw + kx];
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - g.pad;
                    let row = &mut o[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    let ix0 = ox_lo + kx - g.pad;
                    let src = &xs[iy * g.w + ix0..iy * g.w + ix0 + row.len()];
                    for (a, &v) in row.iter_mut().zip(src) {
                        *a = *a + wv * v;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[g.n, g.cin, g.ho, g.wo], out)
}

pub(crate) fn depthwise_conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    padding: usize,
    need: [bool; 3],
) -> Result<ConvGrads<T>> {
    let g = geometry("depthwise_conv2d", input, weight, true, padding)?;
    let x = input.data();
    let wd = weight.data();
    let dy = grad_out.data();
    let plane_in = g.h * g.w;
    let plane = g.out_plane();
    let ksz = g.kh * g.kw;
    let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
    let mut dw = need[1].then(|| vec![T::zero(); wd.len()]);
    let mut db = need[2].then(|| vec![T::zero(); g.cin]);
    for idx in 0..g.n * g.cin {
        let c = idx % g.cin;
        let xs = &x[idx * plane_in..(idx + 1) * plane_in];
        let dys = &dy[idx * plane..(idx + 1) * plane];
        if let Some(db) = db.as_mut() {
            db[c] = dys.iter().fold(db[c], |a, &v| a + v);
        }
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.h, g.ho);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.w, g.wo);
                let wi = c * ksz + ky * g.kw + kx;
                let wv = wd[wi];
                let mut acc = T::zero();
                if ox_lo == ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - g.pad;
                    let ix0 = ox_lo + kx - g.pad;
                    let len = ox_hi - ox_lo;
                    let drow = &dys[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                    let base = idx * plane_in + iy * g.w + ix0;
                    if dw.is_some() {
                        let src = &xs[iy * g.w + ix0..iy * g.w + ix0 + len];
                        acc = drow.iter().zip(src).fold(acc, |a, (&d, &v)| a + d * v);
                    }
                    if let Some(dx) = dx.as_mut() {
                        for (a, &d) in dx[base..base + len].iter_mut().zip(drow) {
                            *a = *a + wv * d;
                        }
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    dw[wi] = dw[wi] + acc;
                }
            }
        }
    }
    Ok(ConvGrads {
        input: dx.map(|d| Tensor::from_vec(input.shape(), d)).transpose()?,
        weight: dw.map(|d| Tensor::from_vec(weight.shape(), d)).transpose()?,
        bias: db.map(|d| Tensor::from_vec(&[g.cin], d)).transpose()?,
    })
}
