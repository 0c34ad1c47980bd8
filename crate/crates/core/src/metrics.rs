//! Pixel errors, PSNR, SSIM and the radially averaged power spectrum.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::fft::power_spectrum;
use crate::tensor::{Element, Tensor};

pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelErrors {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
}

fn same_shape<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Means over all elements.
pub fn pixel_errors<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<PixelErrors> {
    same_shape("pixel_errors", pred, target)?;
    let (mut se, mut ae) = (0.0, 0.0);
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let d = p.as_f64() - t.as_f64();
        se += d * d;
        ae += d.abs();
    }
    let n = pred.len() as f64;
    let mse = se / n;
    Ok(PixelErrors {
        mse,
        mae: ae / n,
        rmse: mse.sqrt(),
    })
}

/// `10 log10(max^2 / mse)`, capped at [`PSNR_CAP`] when `mse < 1e-10`.
pub fn psnr_from_mse(mse: f64, max_value: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (max_value * max_value / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr<T: Element>(pred: &Tensor<T>, target: &Tensor<T>, max_value: f64) -> Result<f64> {
    Ok(psnr_from_mse(pixel_errors(pred, target)?.mse, max_value))
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * x[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of one pair of planes over all valid window positions.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs spatial extents >= {SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).collect::<Vec<_>>();
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let mxx = filter_valid(&prod(x, x), h, w, &k);
    let myy = filter_valid(&prod(y, y), h, w, &k);
    let mxy = filter_valid(&prod(x, y), h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = mxx[i] - ux * ux;
        let vy = myy[i] - uy * uy;
        let cxy = mxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// SSIM averaged over every plane (the last two axes are spatial) with an
/// 11x11 Gaussian window, sigma 1.5 and dynamic range 1.
pub fn ssim<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    same_shape("ssim", pred, target)?;
    let s = pred.shape();
    if s.len() < 2 {
        return Err(Error::InvalidArgument(format!("ssim needs (.., H, W), got {s:?}")));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let (a, b) = (pred.to_f64_vec(), target.to_f64_vec());
    let planes = a.len() / (h * w);
    let mut total = 0.0;
    for p in 0..planes {
        let r = p * h * w..(p + 1) * h * w;
        total += ssim_plane(&a[r.clone()], &b[r], h, w)?;
    }
    Ok(total / planes as f64)
}

/// Radially averaged power spectral density of one `h x w` plane.
///
/// Bin `k - 1` holds the mean of `|X|^2` over frequencies whose distance to
/// the centered DC bin rounds to `k`, for `k = 1..=min(h, w) / 2`.
pub fn rapsd(plane: &[f64], h: usize, w: usize) -> Result<Vec<f64>> {
    if h < 4 || w < 4 || plane.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "rapsd needs an h x w plane with h, w >= 4, got {} values for {h}x{w}",
            plane.len()
        )));
    }
    let power = power_spectrum(plane, h, w);
    let bins = h.min(w) / 2;
    let mut sum = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for i in 0..h {
        let di = ((i + h / 2) % h) as f64 - (h / 2) as f64;
        for j in 0..w {
            let dj = ((j + w / 2) % w) as f64 - (w / 2) as f64;
            let r = (di * di + dj * dj).sqrt().round() as usize;
            if (1..=bins).contains(&r) {
                sum[r - 1] += power[i * w + j];
                count[r - 1] += 1;
            }
        }
    }
    Ok(sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect())
}

/// Mean RAPSD of the last frame of every sequence (and channel) of a
/// `(B, T, C, H, W)` tensor.
pub fn rapsd_last_frames<T: Element>(x: &Tensor<T>) -> Result<Vec<f64>> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::InvalidArgument(format!("expected (B, T, C, H, W), got {s:?}")));
    }
    let (b, t, c, h, w) = (s[0], s[1], s[2], s[3], s[4]);
    let plane = h * w;
    let mut acc: Option<Vec<f64>> = None;
    for bi in 0..b {
        for ci in 0..c {
            let start = ((bi * t + t - 1) * c + ci) * plane;
            let p: Vec<f64> = x.data()[start..start + plane].iter().map(|v| v.as_f64()).collect();
            let r = rapsd(&p, h, w)?;
            match &mut acc {
                Some(a) => a.iter_mut().zip(&r).for_each(|(a, v)| *a += v),
                None => acc = Some(r),
            }
        }
    }
    let n = (b * c) as f64;
    Ok(acc.unwrap_or_default().into_iter().map(|v| v / n).collect())
}

pub fn rapsd_csv(spectrum: &[f64]) -> String {
    let mut out = String::from("radius,power\n");
    for (k, p) in spectrum.iter().enumerate() {
        let _ = writeln!(out, "{},{}", k + 1, p);
    }
    out
}

/// Aggregate and per-frame metrics of a `(B, T, C, H, W)` prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub psnr: f64,
    /// NaN when the frames are smaller than the SSIM window.
    pub ssim: f64,
    pub per_frame_mse: Vec<f64>,
    pub per_frame_mae: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
}

pub const METRICS_CSV_HEADER: &str = "step,mse,mae,rmse,psnr,ssim";

impl MetricReport {
    pub fn compute<T: Element>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<Self> {
        same_shape("metrics", pred, target)?;
        let s = pred.shape();
        if s.len() != 5 {
            return Err(Error::InvalidArgument(format!("expected (B, T, C, H, W), got {s:?}")));
        }
        let (b, t) = (s[0], s[1]);
        let frame = pred.len() / (b * t);
        let (h, w) = (s[3], s[4]);
        let with_ssim = h >= SSIM_WINDOW && w >= SSIM_WINDOW;
        let errors = pixel_errors(pred, target)?;
        let (p, g) = (pred.to_f64_vec(), target.to_f64_vec());
        let mut per_frame_mse = Vec::with_capacity(t);
        let mut per_frame_mae = Vec::with_capacity(t);
        let mut per_frame_ssim = Vec::with_capacity(t);
        for ti in 0..t {
            let (mut se, mut ae, mut ss) = (0.0, 0.0, 0.0);
            for bi in 0..b {
                let r = (bi * t + ti) * frame..(bi * t + ti + 1) * frame;
                for (x, y) in p[r.clone()].iter().zip(&g[r.clone()]) {
                    se += (x - y) * (x - y);
                    ae += (x - y).abs();
                }
                if with_ssim {
                    for plane in r.step_by(h * w) {
                        ss += ssim_plane(&p[plane..plane + h * w], &g[plane..plane + h * w], h, w)?;
                    }
                }
            }
            let n = (b * frame) as f64;
            per_frame_mse.push(se / n);
            per_frame_mae.push(ae / n);
            per_frame_ssim.push(if with_ssim { ss / (b * s[2]) as f64 } else { f64::NAN });
        }
        let ssim = per_frame_ssim.iter().sum::<f64>() / t as f64;
        Ok(MetricReport {
            mse: errors.mse,
            mae: errors.mae,
            rmse: errors.rmse,
            psnr: psnr_from_mse(errors.mse, 1.0),
            ssim,
            per_frame_mse,
            per_frame_mae,
            per_frame_ssim,
        })
    }

    pub fn csv_row(&self, step: usize) -> String {
        format!("{step},{},{},{},{},{}", self.mse, self.mae, self.rmse, self.psnr, self.ssim)
    }
}
