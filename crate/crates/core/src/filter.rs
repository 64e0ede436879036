//! Vector non-local means with a Mahalanobis patch metric.
//!
//! The weight of pixel `p` when restoring `s` is
//! `chi(p) = exp(-D(s, p) / h^2)` normalized over the neighborhood, where
//! `D(s, p) = sum_k w(k) d_k^T Phi^{-1} d_k` and `d_k = I(s - k) - I(p - k)`
//! runs over the `(2r+1) x (2r+1)` patch. Patch offsets leaving the image are
//! mirrored (half-sample symmetric extension).
//!
//! `FilterEngine` precomputes the padded cube whitened by `Phi^{-1/2}`
//! (Cholesky based), so `D` reduces to a plain squared distance between two
//! contiguous row spans per patch row.

use nalgebra::{Cholesky, DMatrix};
use rayon::prelude::*;

use crate::cube::{PixelCoord, SpectralCube};
use crate::error::{Error, Result};
use crate::similarity::CandidateSets;

pub const DEFAULT_PATCH_RADIUS: usize = 3;

/// Relative size of the ridge added to an ill-conditioned metric matrix.
pub const METRIC_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricShape {
    /// `Phi` held fixed; only `h` is tuned.
    Identity,
    Diagonal,
    Full,
}

impl MetricShape {
    /// Diagonal for many bands so the tuned parameter count stays linear.
    pub fn default_for_bands(bands: usize) -> Self {
        if bands > 8 {
            MetricShape::Diagonal
        } else {
            MetricShape::Full
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PatchKernel {
    Uniform,
    /// Normalized 2-D Gaussian with standard deviation `a` (pixels).
    Gaussian { a: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterParams {
    pub h: f64,
    pub phi: DMatrix<f64>,
    pub patch_radius: usize,
    pub metric_shape: MetricShape,
    pub kernel: PatchKernel,
}

impl FilterParams {
    /// Euclidean metric (`Phi = I`), uniform patch kernel.
    pub fn euclidean(h: f64, bands: usize, patch_radius: usize) -> Self {
        FilterParams {
            h,
            phi: DMatrix::identity(bands, bands),
            patch_radius,
            metric_shape: MetricShape::Identity,
            kernel: PatchKernel::Uniform,
        }
    }

    pub fn with_phi(mut self, phi: DMatrix<f64>) -> Self {
        self.phi = phi;
        self
    }

    pub fn bands(&self) -> usize {
        self.phi.nrows()
    }

    pub fn patch_side(&self) -> usize {
        2 * self.patch_radius + 1
    }

    pub fn patch_size(&self) -> usize {
        self.patch_side() * self.patch_side()
    }

    pub fn validate(&self, bands: usize) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(Error::InvalidParameter(format!("h must be positive, got {}", self.h)));
        }
        if self.phi.nrows() != bands || self.phi.ncols() != bands {
            return Err(Error::DimensionMismatch(format!(
                "Phi is {}x{}, cube has {bands} bands",
                self.phi.nrows(),
                self.phi.ncols()
            )));
        }
        if self.phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("Phi has non-finite entries".into()));
        }
        let asym = (0..bands)
            .flat_map(|i| (0..bands).map(move |j| (i, j)))
            .map(|(i, j)| (self.phi[(i, j)] - self.phi[(j, i)]).abs())
            .fold(0.0, f64::max);
        let scale = self.phi.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        if asym > 1e-12 * scale {
            return Err(Error::InvalidParameter("Phi must be symmetric".into()));
        }
        if let PatchKernel::Gaussian { a } = self.kernel {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "Gaussian kernel width must be positive, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Which pixels contribute to each restored pixel.
#[derive(Debug, Clone, Copy)]
pub enum Neighborhood<'a> {
    /// Every pixel of the image.
    Full,
    Candidates(&'a CandidateSets),
}

/// Whitening matrix `W` with `W^T W = (Phi + eps I)^{-1}`. The ridge `eps` is
/// only added when the plain Cholesky factorization fails or is numerically
/// singular.
pub fn whitening_matrix(phi: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let p = phi.nrows();
    let trace = phi.trace();
    if !(trace > 0.0) {
        return Err(Error::SingularMetric);
    }
    let well_conditioned = |l: &DMatrix<f64>| {
        let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
        min_pivot > 1e-14 * trace / p as f64
    };
    let factor = Cholesky::new(phi.clone())
        .map(|c| c.l())
        .filter(|l| well_conditioned(l))
        .or_else(|| {
            let eps = METRIC_RIDGE * trace / p as f64;
            let ridged = phi + DMatrix::identity(p, p) * eps;
            Cholesky::new(ridged).map(|c| c.l())
        })
        .ok_or(Error::SingularMetric)?;
    factor
        .solve_lower_triangular(&DMatrix::identity(p, p))
        .ok_or(Error::SingularMetric)
}

#[inline]
fn mirror(x: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = x.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            let d = x[k] - y[k];
            acc[k] += d * d;
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        let d = x - y;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn weighted_squared_distance(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((x, y), wk) in a.iter().zip(b).zip(w) {
        let d = x - y;
        acc += wk * d * d;
    }
    acc
}

/// Precomputed state for evaluating patch distances, weights and their
/// derivatives on one cube under one parameter set.
pub struct FilterEngine<'a> {
    cube: &'a SpectralCube,
    inv_h2: f64,
    radius: usize,
    side: usize,
    bands: usize,
    ext_width: usize,
    /// Padded cube whitened by `W`, `(H + 2r) x (L + 2r) x P`.
    zext: Vec<f64>,
    /// Patch kernel per patch position; `None` for the uniform kernel.
    position_weights: Option<Vec<f64>>,
    /// Kernel expanded over bands, aligned with one patch row span.
    span_weights: Option<Vec<f64>>,
    whitening: DMatrix<f64>,
    /// Padded rows/cols that mirror onto each image row/col.
    row_preimages: Vec<Vec<usize>>,
    col_preimages: Vec<Vec<usize>>,
}

impl<'a> FilterEngine<'a> {
    pub fn new(cube: &'a SpectralCube, params: &FilterParams) -> Result<Self> {
        params.validate(cube.bands())?;
        let whitening = whitening_matrix(&params.phi)?;
        let (h, l, p) = cube.shape();
        let r = params.patch_radius;
        let side = 2 * r + 1;
        let ext_h = h + 2 * r;
        let ext_w = l + 2 * r;

        let w = &whitening;
        let whitened: Vec<f64> = cube
            .samples()
            .chunks_exact(p)
            .flat_map(|px| (0..p).map(move |i| (0..=i).map(|j| w[(i, j)] * px[j]).sum::<f64>()))
            .collect();
        let mut zext = vec![0.0; ext_h * ext_w * p];
        for er in 0..ext_h {
            let sr = mirror(er as isize - r as isize, h);
            for ec in 0..ext_w {
                let sc = mirror(ec as isize - r as isize, l);
                let src = (sr * l + sc) * p;
                let dst = (er * ext_w + ec) * p;
                zext[dst..dst + p].copy_from_slice(&whitened[src..src + p]);
            }
        }

        let position_weights = match params.kernel {
            PatchKernel::Uniform => None,
            PatchKernel::Gaussian { a } => {
                let norm = 1.0 / (2.0 * std::f64::consts::PI * a * a);
                Some(
                    (0..side * side)
                        .map(|t| {
                            let k1 = (t / side) as f64 - r as f64;
                            let k2 = (t % side) as f64 - r as f64;
                            norm * (-(k1 * k1 + k2 * k2) / (2.0 * a * a)).exp()
                        })
                        .collect::<Vec<f64>>(),
                )
            }
        };
        let span_weights = position_weights.as_ref().map(|w| {
            // one span per patch row; stored for all rows back to back
            w.iter().flat_map(|&v| std::iter::repeat_n(v, p)).collect()
        });

        let preimages = |n: usize| -> Vec<Vec<usize>> {
            let mut out = vec![Vec::new(); n];
            for e in 0..n + 2 * r {
                out[mirror(e as isize - r as isize, n)].push(e);
            }
            out
        };

        Ok(FilterEngine {
            cube,
            inv_h2: 1.0 / (params.h * params.h),
            radius: r,
            side,
            bands: p,
            ext_width: ext_w,
            zext,
            position_weights,
            span_weights,
            whitening,
            row_preimages: preimages(h),
            col_preimages: preimages(l),
        })
    }

    pub fn cube(&self) -> &SpectralCube {
        self.cube
    }

    pub fn whitening(&self) -> &DMatrix<f64> {
        &self.whitening
    }

    #[inline]
    fn ext_index(&self, er: usize, ec: usize) -> usize {
        (er * self.ext_width + ec) * self.bands
    }

    #[inline]
    fn rc(&self, pixel: usize) -> (usize, usize) {
        let w = self.cube.width();
        (pixel / w, pixel % w)
    }

    /// Patch distance between pixels with linear indices `s` and `p`.
    #[inline]
    pub fn distance(&self, s: usize, p: usize) -> f64 {
        let (sr, sc) = self.rc(s);
        let (pr, pc) = self.rc(p);
        let span = self.side * self.bands;
        let mut acc = 0.0;
        match &self.span_weights {
            None => {
                for t in 0..self.side {
                    let a = self.ext_index(sr + t, sc);
                    let b = self.ext_index(pr + t, pc);
                    acc += squared_distance(&self.zext[a..a + span], &self.zext[b..b + span]);
                }
            }
            Some(w) => {
                for t in 0..self.side {
                    let a = self.ext_index(sr + t, sc);
                    let b = self.ext_index(pr + t, pc);
                    acc += weighted_squared_distance(
                        &self.zext[a..a + span],
                        &self.zext[b..b + span],
                        &w[t * span..(t + 1) * span],
                    );
                }
            }
        }
        acc
    }

    #[inline]
    pub fn chi(&self, s: usize, p: usize) -> f64 {
        (-self.distance(s, p) * self.inv_h2).exp()
    }

    #[inline]
    fn position_weight(&self, tr: usize, tc: usize) -> f64 {
        match &self.position_weights {
            None => 1.0,
            Some(w) => w[tr * self.side + tc],
        }
    }

    /// Gradient of `D(s, p)` with respect to the whitened values of pixel
    /// `s`, accumulated into `out` (length `P`, overwritten).
    ///
    /// Pixel `s` enters the patch pair wherever a padded position mirrors
    /// onto it: on the `s` side (always at the patch center, plus reflected
    /// copies near borders) and on the `p` side when the patches overlap `s`.
    pub fn distance_gradient_whitened(&self, s: usize, p: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let (sr, sc) = self.rc(s);
        let (pr, pc) = self.rc(p);
        let side = self.side as isize;
        let pb = self.bands;
        for &xr in &self.row_preimages[sr] {
            for &xc in &self.col_preimages[sc] {
                let zs = self.ext_index(xr, xc);
                // s-side occurrence at patch position t = x - s
                let (tr, tc) = (xr as isize - sr as isize, xc as isize - sc as isize);
                if (0..side).contains(&tr) && (0..side).contains(&tc) {
                    let (tr, tc) = (tr as usize, tc as usize);
                    let w2 = 2.0 * self.position_weight(tr, tc);
                    let other = self.ext_index(pr + tr, pc + tc);
                    for j in 0..pb {
                        out[j] += w2 * (self.zext[zs + j] - self.zext[other + j]);
                    }
                }
                // p-side occurrence at patch position t = x - p
                let (tr, tc) = (xr as isize - pr as isize, xc as isize - pc as isize);
                if (0..side).contains(&tr) && (0..side).contains(&tc) {
                    let (tr, tc) = (tr as usize, tc as usize);
                    let w2 = 2.0 * self.position_weight(tr, tc);
                    let other = self.ext_index(sr + tr, sc + tc);
                    for j in 0..pb {
                        out[j] -= w2 * (self.zext[other + j] - self.zext[zs + j]);
                    }
                }
            }
        }
    }

    /// `d chi(p) / d I(s)` in original (unwhitened) coordinates.
    pub fn chi_gradient(&self, s: usize, p: usize) -> Vec<f64> {
        let mut gz = vec![0.0; self.bands];
        self.distance_gradient_whitened(s, p, &mut gz);
        let scale = -self.chi(s, p) * self.inv_h2;
        (0..self.bands)
            .map(|j| scale * (0..self.bands).map(|k| self.whitening[(k, j)] * gz[k]).sum::<f64>())
            .collect()
    }

    /// Normalized weights of `candidates` for restoring `s`.
    pub fn weights(&self, s: usize, candidates: &[u32]) -> Vec<f64> {
        let chis: Vec<f64> = candidates.iter().map(|&p| self.chi(s, p as usize)).collect();
        let total: f64 = chis.iter().sum();
        chis.into_iter().map(|c| c / total).collect()
    }

    /// Restores pixel `s` from the given contributors into `out`.
    pub fn restore_pixel(&self, s: usize, contributors: impl Iterator<Item = usize>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let mut total = 0.0;
        for p in contributors {
            let chi = self.chi(s, p);
            total += chi;
            for (o, v) in out.iter_mut().zip(self.cube.pixel(p)) {
                *o += chi * v;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
    }

    pub fn denoise(&self, neighborhood: Neighborhood<'_>) -> Result<SpectralCube> {
        let n = self.cube.num_pixels();
        if let Neighborhood::Candidates(sets) = neighborhood {
            check_candidates(sets, n)?;
        }
        let mut out = vec![0.0; self.cube.samples().len()];
        out.par_chunks_mut(self.bands).enumerate().for_each(|(s, px)| match neighborhood {
            Neighborhood::Full => self.restore_pixel(s, 0..n, px),
            Neighborhood::Candidates(sets) => {
                self.restore_pixel(s, sets.candidates(s).iter().map(|&p| p as usize), px)
            }
        });
        self.cube.with_samples(out)
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub(crate) fn inv_h2(&self) -> f64 {
        self.inv_h2
    }
}

pub(crate) fn check_candidates(sets: &CandidateSets, num_pixels: usize) -> Result<()> {
    if sets.num_pixels() != num_pixels {
        return Err(Error::DimensionMismatch(format!(
            "candidate sets cover {} pixels, cube has {num_pixels}",
            sets.num_pixels()
        )));
    }
    Ok(())
}

fn check_coord(cube: &SpectralCube, c: PixelCoord) -> Result<usize> {
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

/// Weighted Mahalanobis distance between the patches around `s` and `p`.
pub fn patch_distance(
    cube: &SpectralCube,
    s: PixelCoord,
    p: PixelCoord,
    params: &FilterParams,
) -> Result<f64> {
    let (si, pi) = (check_coord(cube, s)?, check_coord(cube, p)?);
    Ok(FilterEngine::new(cube, params)?.distance(si, pi))
}

/// Normalized weights `omega(s, p)` aligned with `candidates`.
pub fn vnlm_weights(
    cube: &SpectralCube,
    s: PixelCoord,
    candidates: &[PixelCoord],
    params: &FilterParams,
) -> Result<Vec<f64>> {
    let si = check_coord(cube, s)?;
    let idx = candidates
        .iter()
        .map(|&c| check_coord(cube, c).map(|i| i as u32))
        .collect::<Result<Vec<u32>>>()?;
    if !idx.contains(&(si as u32)) {
        return Err(Error::InvalidParameter("candidates must include s".into()));
    }
    Ok(FilterEngine::new(cube, params)?.weights(si, &idx))
}

pub fn vnlm_denoise(
    cube: &SpectralCube,
    params: &FilterParams,
    neighborhood: Neighborhood<'_>,
) -> Result<SpectralCube> {
    FilterEngine::new(cube, params)?.denoise(neighborhood)
}

/// Classic single-band NLM over the whole image with a Gaussian-weighted
/// patch distance.
pub fn scalar_nlm_denoise(band: &SpectralCube, h: f64, a: f64, patch_radius: usize) -> Result<SpectralCube> {
    if band.bands() != 1 {
        return Err(Error::DimensionMismatch(format!(
            "scalar NLM expects a single band, got {}",
            band.bands()
        )));
    }
    let params = FilterParams {
        kernel: PatchKernel::Gaussian { a },
        ..FilterParams::euclidean(h, 1, patch_radius)
    };
    vnlm_denoise(band, &params, Neighborhood::Full)
}

/// Runs `scalar_nlm_denoise` on every band independently.
pub fn bandwise_nlm_denoise(cube: &SpectralCube, h: f64, a: f64, patch_radius: usize) -> Result<SpectralCube> {
    let bands = (0..cube.bands())
        .map(|b| scalar_nlm_denoise(&cube.band_cube(b), h, a, patch_radius))
        .collect::<Result<Vec<_>>>()?;
    SpectralCube::stack_bands(&bands)
}
