//! Stein's unbiased risk estimate for the vector NLM filter.
//!
//! For `f` the filter map and `Psi` the per-pixel noise covariance,
//!
//! ```text
//! risk = 1/N sum_s |f(s) - I(s)|^2  -  trace(Psi)  +  2/N sum_s trace(Psi J(s))
//! ```
//!
//! where `J(s) = d f(s) / d I(s)` is the `P x P` diagonal Jacobian block. It
//! is assembled analytically from the quotient rule on the weighted average,
//! with the neighborhood treated as fixed.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::cube::{PixelCoord, SpectralCube};
use crate::error::{Error, Result};
use crate::filter::{check_candidates, FilterEngine, FilterParams, Neighborhood};
use crate::noise::NoiseCovariance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskReport {
    pub data_term: f64,
    pub trace_term: f64,
    pub divergence_term: f64,
    pub risk: f64,
}

impl RiskReport {
    pub fn from_terms(data_term: f64, trace_term: f64, divergence_term: f64) -> Self {
        RiskReport {
            data_term,
            trace_term,
            divergence_term,
            risk: data_term - trace_term + divergence_term,
        }
    }

    pub const CSV_HEADER: &'static str = "data,trace,divergence,risk";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.data_term, self.trace_term, self.divergence_term, self.risk
        )
    }
}

/// Per-pixel pieces of the risk.
struct PixelRisk {
    data: f64,
    divergence: f64,
}

/// Evaluates the restored value of `s` and `trace(Psi J(s))`.
struct DivergenceKernel<'e, 'c> {
    engine: &'e FilterEngine<'c>,
    /// `W Psi`, with `W` the metric whitening matrix.
    w_psi: DMatrix<f64>,
    psi_trace: f64,
}

impl<'e, 'c> DivergenceKernel<'e, 'c> {
    fn new(engine: &'e FilterEngine<'c>, cov: &NoiseCovariance) -> Self {
        DivergenceKernel {
            engine,
            w_psi: engine.whitening() * cov.matrix(),
            psi_trace: cov.trace(),
        }
    }

    fn evaluate(&self, s: usize, contributors: impl Iterator<Item = usize>, restored: &mut [f64]) -> f64 {
        let engine = self.engine;
        let cube = engine.cube();
        let pb = engine.bands();
        let inv_h2 = engine.inv_h2();

        let mut total = 0.0;
        let mut self_chi = 0.0;
        restored.iter_mut().for_each(|v| *v = 0.0);
        let mut grad_sum = vec![0.0; pb];
        let mut moment = vec![0.0; pb * pb];
        let mut grad = vec![0.0; pb];

        for p in contributors {
            let chi = engine.chi(s, p);
            total += chi;
            let yp = cube.pixel(p);
            for (o, v) in restored.iter_mut().zip(yp) {
                *o += chi * v;
            }
            if p == s {
                // D(s, s) vanishes identically, so chi(s) = 1 has no gradient
                self_chi = chi;
                continue;
            }
            if chi == 0.0 {
                continue;
            }
            engine.distance_gradient_whitened(s, p, &mut grad);
            let scale = -chi * inv_h2;
            for j in 0..pb {
                let dchi = scale * grad[j];
                grad_sum[j] += dchi;
                for i in 0..pb {
                    moment[i * pb + j] += yp[i] * dchi;
                }
            }
        }
        restored.iter_mut().for_each(|v| *v /= total);

        // trace(Psi (M W + chi_s I)) / C  -  (W^T g)^T Psi f / C
        let mut tr_moment = 0.0;
        for i in 0..pb {
            for j in 0..pb {
                tr_moment += self.w_psi[(i, j)] * moment[j * pb + i];
            }
        }
        let mut cross = 0.0;
        for i in 0..pb {
            for j in 0..pb {
                cross += grad_sum[i] * self.w_psi[(i, j)] * restored[j];
            }
        }
        (tr_moment + self_chi * self.psi_trace - cross) / total
    }
}

fn check_cov(cube: &SpectralCube, cov: &NoiseCovariance) -> Result<()> {
    if cov.bands() != cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "covariance has {} bands, cube has {}",
            cov.bands(),
            cube.bands()
        )));
    }
    Ok(())
}

fn pixel_index(cube: &SpectralCube, c: PixelCoord) -> Result<usize> {
    if !cube.contains(c) {
        return Err(Error::InvalidParameter(format!(
            "pixel ({}, {}) outside {}x{} cube",
            c.row,
            c.col,
            cube.height(),
            cube.width()
        )));
    }
    Ok(cube.index_of(c))
}

/// Unnormalized weight `chi(p) = exp(-D(s, p) / h^2)`.
pub fn chi(cube: &SpectralCube, s: PixelCoord, p: PixelCoord, params: &FilterParams) -> Result<f64> {
    let (si, pi) = (pixel_index(cube, s)?, pixel_index(cube, p)?);
    Ok(FilterEngine::new(cube, params)?.chi(si, pi))
}

/// `d chi(p) / d I(s)` as a `P`-vector.
pub fn chi_gradient(
    cube: &SpectralCube,
    s: PixelCoord,
    p: PixelCoord,
    params: &FilterParams,
) -> Result<Vec<f64>> {
    let (si, pi) = (pixel_index(cube, s)?, pixel_index(cube, p)?);
    Ok(FilterEngine::new(cube, params)?.chi_gradient(si, pi))
}

/// `trace(Psi^T J(s))` for the filter restricted to `candidates`.
pub fn divergence_at(
    cube: &SpectralCube,
    s: PixelCoord,
    params: &FilterParams,
    candidates: &[PixelCoord],
    cov: &NoiseCovariance,
) -> Result<f64> {
    check_cov(cube, cov)?;
    let si = pixel_index(cube, s)?;
    let idx = candidates
        .iter()
        .map(|&c| pixel_index(cube, c))
        .collect::<Result<Vec<usize>>>()?;
    if !idx.contains(&si) {
        return Err(Error::InvalidParameter("candidates must include s".into()));
    }
    let engine = FilterEngine::new(cube, params)?;
    let kernel = DivergenceKernel::new(&engine, cov);
    let mut restored = vec![0.0; cube.bands()];
    Ok(kernel.evaluate(si, idx.into_iter(), &mut restored))
}

/// Filters `noisy` and returns the risk estimate along with the output.
pub fn sure_risk_with_output(
    noisy: &SpectralCube,
    params: &FilterParams,
    neighborhood: Neighborhood<'_>,
    cov: &NoiseCovariance,
) -> Result<(RiskReport, SpectralCube)> {
    check_cov(noisy, cov)?;
    let n = noisy.num_pixels();
    if let Neighborhood::Candidates(sets) = neighborhood {
        check_candidates(sets, n)?;
    }
    let engine = FilterEngine::new(noisy, params)?;
    let kernel = DivergenceKernel::new(&engine, cov);
    let pb = noisy.bands();
    let mut out = vec![0.0; noisy.samples().len()];
    let per_pixel: Vec<PixelRisk> = out
        .par_chunks_mut(pb)
        .enumerate()
        .map(|(s, restored)| {
            let divergence = match neighborhood {
                Neighborhood::Full => kernel.evaluate(s, 0..n, restored),
                Neighborhood::Candidates(sets) => {
                    kernel.evaluate(s, sets.candidates(s).iter().map(|&p| p as usize), restored)
                }
            };
            let data = restored
                .iter()
                .zip(noisy.pixel(s))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
            PixelRisk { data, divergence }
        })
        .collect();

    let (mut data, mut div) = (0.0, 0.0);
    for px in &per_pixel {
        data += px.data;
        div += px.divergence;
    }
    let report = RiskReport::from_terms(data / n as f64, cov.trace(), 2.0 * div / n as f64);
    Ok((report, noisy.with_samples(out)?))
}

pub fn sure_risk(
    noisy: &SpectralCube,
    params: &FilterParams,
    neighborhood: Neighborhood<'_>,
    cov: &NoiseCovariance,
) -> Result<RiskReport> {
    sure_risk_with_output(noisy, params, neighborhood, cov).map(|(r, _)| r)
}
