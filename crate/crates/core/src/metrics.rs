//! Reconstruction quality metrics and the L1 training loss.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor5;

/// PSNR returned for identical inputs.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn psnr_from_mse(mse: f64, max_val: f64) -> f64 {
    if mse == 0.0 {
        PSNR_IDENTICAL
    } else {
        10.0 * (max_val * max_val / mse).log10()
    }
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    sum / a.len() as f64
}

/// PSNR in dB over the whole tensor; [`PSNR_IDENTICAL`] when the inputs match.
pub fn psnr<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>, max_val: f64) -> Result<f64> {
    a.check_same_shape(b, "psnr")?;
    Ok(psnr_from_mse(mse(a.data(), b.data()), max_val))
}

/// PSNR of every (batch item, frame) pair over all channels, item-major.
pub fn frame_psnr<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>, max_val: f64) -> Result<Vec<f64>> {
    a.check_same_shape(b, "frame_psnr")?;
    let s = a.shape();
    let mut out = Vec::with_capacity(s.n * s.t);
    for n in 0..s.n {
        for t in 0..s.t {
            let mut sum = 0.0;
            for c in 0..s.c {
                sum += mse(a.frame(n, c, t), b.frame(n, c, t)) * s.plane() as f64;
            }
            out.push(psnr_from_mse(sum / (s.c * s.plane()) as f64, max_val));
        }
    }
    Ok(out)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let mid = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

fn luma<T: Scalar>(x: &Tensor5<T>, n: usize, t: usize) -> Vec<f64> {
    let s = x.shape();
    if s.c == 1 {
        return x.frame(n, 0, t).iter().map(|v| v.as_f64()).collect();
    }
    let mut out = vec![0.0; s.plane()];
    for (c, weight) in LUMA.iter().enumerate().take(s.c) {
        for (o, v) in out.iter_mut().zip(x.frame(n, c, t)) {
            *o += weight * v.as_f64();
        }
    }
    out
}

/// Separable Gaussian filter over valid windows only.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * img[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let prod = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(a, a), h, w, &k);
    let bb = filter_valid(&prod(b, b), h, w, &k);
    let ab = filter_valid(&prod(a, b), h, w, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    total / mu_a.len() as f64
}

/// Luma SSIM of every (batch item, frame) pair, item-major.
pub fn frame_ssim<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Vec<f64>> {
    a.check_same_shape(b, "ssim")?;
    let s = a.shape();
    if s.h < SSIM_WINDOW || s.w < SSIM_WINDOW {
        return Err(Error::InvalidShape {
            shape: s.dims().to_vec(),
            reason: format!("SSIM needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
        });
    }
    let mut out = Vec::with_capacity(s.n * s.t);
    for n in 0..s.n {
        for t in 0..s.t {
            out.push(ssim_plane(&luma(a, n, t), &luma(b, n, t), s.h, s.w));
        }
    }
    Ok(out)
}

/// Mean luma SSIM over all frames (11x11 Gaussian window, sigma 1.5).
pub fn ssim<T: Scalar>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<f64> {
    let frames = frame_ssim(a, b)?;
    Ok(frames.iter().sum::<f64>() / frames.len() as f64)
}

/// Mean absolute error and its gradient with respect to `pred`.
pub fn l1_loss<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>) -> Result<(f64, Tensor5<T>)> {
    pred.check_same_shape(target, "l1_loss")?;
    let len = pred.len();
    let inv = T::from_f64(1.0 / len as f64);
    let mut grad = Tensor5::zeros(pred.shape());
    let mut sum = 0.0;
    for ((g, p), t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = *p - *t;
        sum += d.as_f64().abs();
        *g = if d > T::zero() {
            inv
        } else if d < T::zero() {
            -inv
        } else {
            T::zero()
        };
    }
    Ok((sum / len as f64, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameScore {
    pub clip_id: usize,
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub frames: Vec<FrameScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_l1: f64,
}

impl EvalReport {
    /// Scores a prediction; batch item `n` is reported as clip `first_clip + n`.
    pub fn score<T: Scalar>(pred: &Tensor5<T>, target: &Tensor5<T>, first_clip: usize) -> Result<Self> {
        let psnrs = frame_psnr(pred, target, 1.0)?;
        let ssims = frame_ssim(pred, target)?;
        let (l1, _) = l1_loss(pred, target)?;
        let t = pred.shape().t;
        let frames = psnrs
            .into_iter()
            .zip(ssims)
            .enumerate()
            .map(|(i, (psnr_db, ssim))| FrameScore {
                clip_id: first_clip + i / t,
                frame: i % t,
                psnr_db,
                ssim,
            })
            .collect();
        let mut report = EvalReport {
            frames,
            mean_l1: l1,
            ..Default::default()
        };
        report.refresh_means();
        Ok(report)
    }

    /// Concatenates reports, weighting the L1 mean by frame count.
    pub fn merge(reports: &[EvalReport]) -> Self {
        let mut out = EvalReport::default();
        let mut l1 = 0.0;
        for r in reports {
            l1 += r.mean_l1 * r.frames.len() as f64;
            out.frames.extend(r.frames.iter().cloned());
        }
        if !out.frames.is_empty() {
            out.mean_l1 = l1 / out.frames.len() as f64;
        }
        out.refresh_means();
        out
    }

    fn refresh_means(&mut self) {
        let n = self.frames.len().max(1) as f64;
        self.mean_psnr = self.frames.iter().map(|f| f.psnr_db).sum::<f64>() / n;
        self.mean_ssim = self.frames.iter().map(|f| f.ssim).sum::<f64>() / n;
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,frame,psnr_db,ssim\n");
        for f in &self.frames {
            let _ = writeln!(out, "{},{},{:.6},{:.6}", f.clip_id, f.frame, f.psnr_db, f.ssim);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
