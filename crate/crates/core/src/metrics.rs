//! Reconstruction quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::HsiCube;

/// Reported for a band (or cube) reconstructed without error.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PsnrMode {
    /// Mean of per-band values.
    #[default]
    PerBand,
    /// One value from the MSE of the whole cube.
    WholeCube,
}

fn check_pair(x: &HsiCube, r: &HsiCube) -> Result<()> {
    if (x.h, x.w, x.bands) != (r.h, r.w, r.bands) {
        return Err(Error::shape(
            "metric",
            format!("{}x{}x{} vs {}x{}x{}", x.h, x.w, x.bands, r.h, r.w, r.bands),
        ));
    }
    Ok(())
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

fn mse(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&p, &q)| {
            let d = p as f64 - q as f64;
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

pub fn psnr_with(x: &HsiCube, reference: &HsiCube, peak: f64, mode: PsnrMode) -> Result<f64> {
    check_pair(x, reference)?;
    Ok(match mode {
        PsnrMode::PerBand => {
            (0..x.bands)
                .map(|b| psnr_from_mse(mse(x.band(b), reference.band(b)), peak))
                .sum::<f64>()
                / x.bands as f64
        }
        PsnrMode::WholeCube => psnr_from_mse(mse(&x.data, &reference.data), peak),
    })
}

pub fn psnr(x: &HsiCube, reference: &HsiCube, peak: f64) -> Result<f64> {
    psnr_with(x, reference, peak, PsnrMode::PerBand)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f32], b: &[f32], h: usize, w: usize, g: &[f64], peak: f64) -> f64 {
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, h, w, g);
    let mu_b = filter_valid(&b, h, w, g);
    let aa = filter_valid(&prod(&a, &a), h, w, g);
    let bb = filter_valid(&prod(&b, &b), h, w, g);
    let ab = filter_valid(&prod(&a, &b), h, w, g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean over bands of single-scale SSIM with an 11-tap Gaussian window
/// (sigma 1.5), evaluated where the window fits entirely.
pub fn ssim(x: &HsiCube, reference: &HsiCube) -> Result<f64> {
    ssim_with_peak(x, reference, 1.0)
}

pub fn ssim_with_peak(x: &HsiCube, reference: &HsiCube, peak: f64) -> Result<f64> {
    check_pair(x, reference)?;
    if x.h < SSIM_WINDOW || x.w < SSIM_WINDOW {
        return Err(Error::shape(
            "ssim",
            format!("{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", x.h, x.w),
        ));
    }
    let g = gaussian_window();
    Ok((0..x.bands)
        .map(|b| ssim_plane(x.band(b), reference.band(b), x.h, x.w, &g, peak))
        .sum::<f64>()
        / x.bands as f64)
}
