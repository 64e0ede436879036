//! Probabilistic intensity similarity and per-pixel candidate preselection.
//!
//! Two intensities are similar when their difference is within
//! `tau = 2 * sqrt(2 ln(varsigma)) * sigma` in every band. The similarity
//! value itself is only needed for inspection; preselection uses the
//! threshold predicate.

use rayon::prelude::*;

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::noise::NoiseCovariance;

pub const DEFAULT_VARSIGMA: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityConfig {
    /// Cutoff parameter; the threshold width grows like `sqrt(ln varsigma)`.
    pub varsigma: f64,
    /// Normalization constant `|Omega|`. Rescales the similarity uniformly.
    pub omega: f64,
    /// Maximum true intensity per band. `None` uses the per-band maximum of
    /// the cube being processed.
    pub x_s0: Option<Vec<f64>>,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        SimilarityConfig {
            varsigma: DEFAULT_VARSIGMA,
            omega: 1.0,
            x_s0: None,
        }
    }
}

impl SimilarityConfig {
    pub fn with_varsigma(varsigma: f64) -> Self {
        SimilarityConfig {
            varsigma,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // varsigma = 1 is accepted and degenerates to exact-match selection.
        if !(self.varsigma.is_finite() && self.varsigma >= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "varsigma must be >= 1, got {}",
                self.varsigma
            )));
        }
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "|Omega| must be positive, got {}",
                self.omega
            )));
        }
        if let Some(x) = &self.x_s0 {
            if x.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::InvalidParameter("x_s0 must be positive".into()));
            }
        }
        Ok(())
    }

    /// Per-band `x_s0`, falling back to the band maxima of `cube`.
    pub fn resolve_x_s0(&self, cube: &SpectralCube) -> Vec<f64> {
        match &self.x_s0 {
            Some(v) => v.clone(),
            None => (0..cube.bands()).map(|b| cube.band_max(b)).collect(),
        }
    }
}

/// Error function.
pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

/// Half-width of the nonzero support of the similarity in one band.
pub fn cutoff_width(varsigma: f64, sigma: f64) -> f64 {
    2.0 * (2.0 * varsigma.ln()).sqrt() * sigma
}

pub fn scalar_similarity(
    x_s: f64,
    x_p: f64,
    sigma: f64,
    x_s0: f64,
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "similarity sigma must be positive, got {sigma}"
        )));
    }
    let diff = x_s - x_p;
    if diff.abs() > cutoff_width(cfg.varsigma, sigma) {
        return Ok(0.0);
    }
    let norm = 1.0 / (4.0 * sigma * cfg.omega * std::f64::consts::PI.sqrt());
    let gauss = (-(diff * diff) / (4.0 * sigma * sigma)).exp();
    let tails = erf((2.0 * x_s0 - x_s - x_p) / (2.0 * sigma)) + erf((x_s + x_p) / (2.0 * sigma));
    Ok(norm * gauss * tails)
}

/// Product of the per-band similarities.
pub fn vector_similarity(
    i_s: &[f64],
    i_p: &[f64],
    sigmas: &[f64],
    x_s0: &[f64],
    cfg: &SimilarityConfig,
) -> Result<f64> {
    if i_s.len() != i_p.len() || i_s.len() != sigmas.len() || i_s.len() != x_s0.len() {
        return Err(Error::DimensionMismatch(format!(
            "pixel vectors {} and {}, {} sigmas, {} x_s0 values",
            i_s.len(),
            i_p.len(),
            sigmas.len(),
            x_s0.len()
        )));
    }
    let mut prod = 1.0;
    for b in 0..i_s.len() {
        let s = scalar_similarity(i_s[b], i_p[b], sigmas[b], x_s0[b], cfg)?;
        if s == 0.0 {
            return Ok(0.0);
        }
        prod *= s;
    }
    Ok(prod)
}

/// Per-pixel candidate lists in compressed row form. Each list holds linear
/// pixel indices in increasing (row-major) order and always contains the
/// pixel itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSets {
    offsets: Vec<usize>,
    indices: Vec<u32>,
}

impl CandidateSets {
    pub fn from_lists(lists: Vec<Vec<u32>>) -> Result<Self> {
        let n = lists.len();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut indices = Vec::with_capacity(lists.iter().map(Vec::len).sum());
        for (s, list) in lists.into_iter().enumerate() {
            if !list.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::InvalidParameter(format!(
                    "candidate list of pixel {s} is not strictly increasing"
                )));
            }
            if list.last().is_some_and(|&i| i as usize >= n) {
                return Err(Error::InvalidParameter(format!(
                    "candidate list of pixel {s} is out of bounds"
                )));
            }
            if list.binary_search(&(s as u32)).is_err() {
                return Err(Error::InvalidParameter(format!(
                    "candidate list of pixel {s} does not contain the pixel"
                )));
            }
            indices.extend(list);
            offsets.push(indices.len());
        }
        Ok(CandidateSets { offsets, indices })
    }

    /// Every pixel is a candidate of every pixel.
    pub fn full(num_pixels: usize) -> Self {
        let all: Vec<u32> = (0..num_pixels as u32).collect();
        let mut indices = Vec::with_capacity(num_pixels * num_pixels);
        let mut offsets = Vec::with_capacity(num_pixels + 1);
        offsets.push(0);
        for _ in 0..num_pixels {
            indices.extend_from_slice(&all);
            offsets.push(indices.len());
        }
        CandidateSets { offsets, indices }
    }

    /// Each pixel only has itself as candidate.
    pub fn identity(num_pixels: usize) -> Self {
        CandidateSets {
            offsets: (0..=num_pixels).collect(),
            indices: (0..num_pixels as u32).collect(),
        }
    }

    pub fn num_pixels(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn candidates(&self, pixel: usize) -> &[u32] {
        &self.indices[self.offsets[pixel]..self.offsets[pixel + 1]]
    }

    pub fn total(&self) -> usize {
        self.indices.len()
    }

    pub fn mean_size(&self) -> f64 {
        self.total() as f64 / self.num_pixels() as f64
    }

    pub fn counts(&self) -> Vec<usize> {
        self.offsets.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Candidate counts as a single-band cube, for inspecting selectivity.
    pub fn counts_cube(&self, height: usize, width: usize) -> Result<SpectralCube> {
        SpectralCube::new(
            height,
            width,
            1,
            self.counts().into_iter().map(|c| c as f64).collect(),
        )
    }
}

/// Per-band thresholds `tau_i` from the diagonal of `cov`.
pub fn band_thresholds(cov: &NoiseCovariance, varsigma: f64) -> Result<Vec<f64>> {
    cov.band_sigmas()
        .into_iter()
        .enumerate()
        .map(|(band, sigma)| {
            if sigma > 0.0 {
                Ok(cutoff_width(varsigma, sigma))
            } else {
                Err(Error::ZeroVarianceBand { band })
            }
        })
        .collect()
}

#[inline]
fn within(a: &[f64], b: &[f64], tau: &[f64]) -> bool {
    a.iter().zip(b).zip(tau).all(|((x, y), t)| (x - y).abs() <= *t)
}

/// Candidate set of every pixel: all pixels whose values lie within the
/// band-wise threshold of the pixel's values in every band.
///
/// Pixels are sorted by the most selective band so each query only scans the
/// value range that can pass; the remaining bands are then checked exactly.
pub fn build_candidate_sets(
    cube: &SpectralCube,
    cov: &NoiseCovariance,
    cfg: &SimilarityConfig,
) -> Result<CandidateSets> {
    cfg.validate()?;
    if cov.bands() != cube.bands() {
        return Err(Error::DimensionMismatch(format!(
            "covariance has {} bands, cube has {}",
            cov.bands(),
            cube.bands()
        )));
    }
    let tau = band_thresholds(cov, cfg.varsigma)?;
    let n = cube.num_pixels();
    if n > u32::MAX as usize {
        return Err(Error::InvalidParameter("cube has too many pixels".into()));
    }

    let key_band = (0..cube.bands())
        .max_by(|&a, &b| {
            let spread = |band: usize| {
                let vals = cube.band(band);
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (hi - lo) / tau[band]
            };
            spread(a).total_cmp(&spread(b))
        })
        .unwrap_or(0);

    let keys = cube.band(key_band);
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_by(|&a, &b| keys[a as usize].total_cmp(&keys[b as usize]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| keys[i as usize]).collect();

    let words = n.div_ceil(64);
    let lists: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map_init(
            || vec![0u64; words],
            |mask, s| {
                let v = keys[s];
                let t = tau[key_band];
                let slack = 1e-9 * (v.abs() + t + 1.0);
                let lo = sorted.partition_point(|&u| u < v - t - slack);
                let hi = sorted.partition_point(|&u| u <= v + t + slack);
                let ps = cube.pixel(s);
                // a bitmap yields the passing pixels in index order without sorting
                let mut count = 0;
                for &p in &order[lo..hi] {
                    if within(ps, cube.pixel(p as usize), &tau) {
                        mask[p as usize / 64] |= 1 << (p % 64);
                        count += 1;
                    }
                }
                let mut list = Vec::with_capacity(count);
                for (w, word) in mask.iter_mut().enumerate() {
                    let mut bits = *word;
                    while bits != 0 {
                        list.push((w * 64) as u32 + bits.trailing_zeros());
                        bits &= bits - 1;
                    }
                    *word = 0;
                }
                list
            },
        )
        .collect();
    CandidateSets::from_lists(lists)
}
