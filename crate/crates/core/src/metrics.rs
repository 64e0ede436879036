//! PSNR and global-statistics SSIM.

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    /// `f64::INFINITY` when the cubes are identical.
    pub psnr_db: f64,
    pub ssim_bands: Vec<f64>,
    pub ssim_mean: f64,
    pub max_signal: f64,
}

impl QualityReport {
    pub fn csv_header(bands: usize) -> String {
        let mut cols = vec!["psnr_db".to_string(), "ssim_mean".to_string()];
        cols.extend((0..bands).map(|b| format!("ssim_band_{b}")));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![format!("{}", self.psnr_db), format!("{}", self.ssim_mean)];
        cols.extend(self.ssim_bands.iter().map(|v| format!("{v}")));
        cols.join(",")
    }
}

fn check_dims(a: &SpectralCube, b: &SpectralCube) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "reference is {:?}, test is {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn mse(reference: &SpectralCube, test: &SpectralCube) -> Result<f64> {
    check_dims(reference, test)?;
    let sum: f64 = reference
        .samples()
        .iter()
        .zip(test.samples())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sum / reference.samples().len() as f64)
}

/// PSNR in dB with the peak taken as the maximum of the reference cube.
/// Identical cubes give `+inf`.
pub fn psnr(reference: &SpectralCube, test: &SpectralCube) -> Result<f64> {
    let err = mse(reference, test)?;
    let peak = reference.max_value();
    if peak <= 0.0 {
        return Err(Error::InvalidParameter(
            "reference maximum must be positive for PSNR".into(),
        ));
    }
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / err).log10())
}

/// SSIM constants `(0.01 D)^2` and `(0.03 D)^2` for dynamic range `D`.
pub fn default_ssim_constants(dynamic_range: f64) -> (f64, f64) {
    ((0.01 * dynamic_range).powi(2), (0.03 * dynamic_range).powi(2))
}

fn ssim_band(x: &[f64], y: &[f64], c1: f64, c2: f64) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        vx += da * da;
        vy += db * db;
        cov += da * db;
    }
    vx /= n;
    vy /= n;
    cov /= n;
    let num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
    let den = (mx * mx + my * my + c1) * (vx + vy + c2);
    if den == 0.0 {
        // both bands are identically zero
        return 1.0;
    }
    num / den
}

/// SSIM per band using whole-band means, variances and covariance (no
/// sliding window). Returns `(per_band, mean)`.
pub fn ssim_global(
    reference: &SpectralCube,
    test: &SpectralCube,
    c1: f64,
    c2: f64,
) -> Result<(Vec<f64>, f64)> {
    check_dims(reference, test)?;
    let per_band: Vec<f64> = (0..reference.bands())
        .map(|b| ssim_band(&reference.band(b), &test.band(b), c1, c2))
        .collect();
    let mean = per_band.iter().sum::<f64>() / per_band.len() as f64;
    Ok((per_band, mean))
}

pub fn quality_report(reference: &SpectralCube, test: &SpectralCube) -> Result<QualityReport> {
    let max_signal = reference.max_value();
    let (c1, c2) = default_ssim_constants(max_signal);
    quality_report_with(reference, test, c1, c2)
}

pub fn quality_report_with(
    reference: &SpectralCube,
    test: &SpectralCube,
    c1: f64,
    c2: f64,
) -> Result<QualityReport> {
    let psnr_db = psnr(reference, test)?;
    let (ssim_bands, ssim_mean) = ssim_global(reference, test, c1, c2)?;
    Ok(QualityReport {
        psnr_db,
        ssim_bands,
        ssim_mean,
        max_signal: reference.max_value(),
    })
}
