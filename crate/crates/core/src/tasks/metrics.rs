//! Full-reference image quality metrics.

use ens_tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};

use crate::{EnsError, Result};

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Dimension {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        }
        .into());
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape("mse", a, b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.numel() as f64)
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsimConfig {
    /// Side of the uniform square window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the pixel values.
    pub range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: 8,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

/// Mean SSIM over every `window x window` position (stride 1) of every
/// channel and batch item, with population window statistics.
pub fn ssim(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<f64> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    let win = cfg.window;
    if win == 0 || win > s.h().min(s.w()) {
        return Err(EnsError::config(format!(
            "ssim window {win} must be between 1 and the image side {}",
            s.h().min(s.w())
        )));
    }
    let c1 = (cfg.k1 * cfg.range).powi(2);
    let c2 = (cfg.k2 * cfg.range).powi(2);
    let n = (win * win) as f64;
    let (ad, bd) = (a.data(), b.data());
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..s.n() * s.c() {
        let off = plane * s.plane();
        for y0 in 0..=s.h() - win {
            for x0 in 0..=s.w() - win {
                let at = |d: &[f64], y: usize, x: usize| d[off + (y0 + y) * s.w() + x0 + x];
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        ma += at(ad, y, x);
                        mb += at(bd, y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in 0..win {
                    for x in 0..win {
                        let da = at(ad, y, x) - ma;
                        let db = at(bd, y, x) - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
                let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}
