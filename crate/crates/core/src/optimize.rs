//! SURE-driven tuning of `(h, Phi)`.
//!
//! Constraints are removed by reparameterization: `h = exp(alpha)` and
//! `Phi = L L^T` with `L` lower triangular with a positive (exponentiated)
//! diagonal. The risk is minimized over the unconstrained vector with BFGS,
//! central finite-difference gradients and Armijo backtracking. Candidate sets
//! stay fixed throughout.

use std::io::Write;
use std::path::Path;

use log::{debug, warn};
use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::filter::{FilterParams, MetricShape, Neighborhood, PatchKernel, DEFAULT_PATCH_RADIUS};
use crate::noise::NoiseCovariance;
use crate::similarity::CandidateSets;
use crate::sure::sure_risk;
use crate::cube::SpectralCube;

const ARMIJO_C: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub iter_max: usize,
    /// Stop once a step lowers the risk by no more than this. `None` means
    /// `1e-4` times the initial risk magnitude.
    pub xi: Option<f64>,
    pub metric_shape: MetricShape,
    /// Step in log-parameters (relative step in `h` and in the factor).
    pub finite_difference_step: f64,
    pub line_search_shrink: f64,
    pub max_backtracks: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            iter_max: 50,
            xi: None,
            metric_shape: MetricShape::Full,
            finite_difference_step: 1e-4,
            line_search_shrink: 0.5,
            max_backtracks: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn for_bands(bands: usize) -> Self {
        OptimizerConfig {
            metric_shape: MetricShape::default_for_bands(bands),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iter_max == 0 {
            return Err(Error::InvalidParameter("iter_max must be at least 1".into()));
        }
        if let Some(xi) = self.xi {
            if !(xi >= 0.0) {
                return Err(Error::InvalidParameter(format!("xi must be nonnegative, got {xi}")));
            }
        }
        if !(self.finite_difference_step > 0.0 && self.finite_difference_step.is_finite()) {
            return Err(Error::InvalidParameter("finite difference step must be positive".into()));
        }
        if !(self.line_search_shrink > 0.0 && self.line_search_shrink < 1.0) {
            return Err(Error::InvalidParameter("line search shrink must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    IterMax,
    RiskPlateau,
    LineSearchFailure,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::IterMax => "iter-max",
            StopReason::RiskPlateau => "risk-plateau",
            StopReason::LineSearchFailure => "line-search-failure",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub h: f64,
    pub phi: DMatrix<f64>,
    pub risk: f64,
}

/// Accepted iterates, starting with the initial point.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
    pub stop_reason: StopReason,
}

impl OptimizationTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn risks(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.risk).collect()
    }

    pub fn final_risk(&self) -> f64 {
        self.entries.last().map_or(f64::NAN, |e| e.risk)
    }

    /// `iter,h,phi_0_0,...,phi_{P-1}_{P-1},risk`
    pub fn to_csv(&self) -> String {
        let bands = self.entries.first().map_or(0, |e| e.phi.nrows());
        let mut out = String::from("iter,h");
        for i in 0..bands {
            for j in 0..bands {
                out.push_str(&format!(",phi_{i}_{j}"));
            }
        }
        out.push_str(",risk\n");
        for (k, e) in self.entries.iter().enumerate() {
            out.push_str(&format!("{k},{}", e.h));
            for i in 0..bands {
                for j in 0..bands {
                    out.push_str(&format!(",{}", e.phi[(i, j)]));
                }
            }
            out.push_str(&format!(",{}\n", e.risk));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Starting point: `h = sqrt(trace(Psi) / P) * |K|` and `Phi = diag(Psi)`
/// rescaled to trace `P`.
pub fn default_init(cov: &NoiseCovariance) -> FilterParams {
    default_init_with_radius(cov, DEFAULT_PATCH_RADIUS)
}

pub fn default_init_with_radius(cov: &NoiseCovariance, patch_radius: usize) -> FilterParams {
    let p = cov.bands();
    let trace = cov.trace();
    let side = (2 * patch_radius + 1) as f64;
    let mut params = FilterParams::euclidean(1.0, p, patch_radius);
    params.metric_shape = MetricShape::default_for_bands(p);
    if !(trace > 0.0) {
        warn!("noise covariance has zero trace; starting from h = 1");
        return params;
    }
    params.h = (trace / p as f64).sqrt() * side * side;
    let scale = p as f64 / trace;
    // keep the diagonal strictly positive for the log parameterization
    let floor = 1e-6;
    params.phi = DMatrix::from_fn(p, p, |i, j| {
        if i == j {
            (cov.get(i, i) * scale).max(floor)
        } else {
            0.0
        }
    });
    params
}

/// Maps between `(h, Phi)` and the unconstrained vector.
struct Parameterization {
    shape: MetricShape,
    bands: usize,
    fixed_phi: DMatrix<f64>,
    patch_radius: usize,
    kernel: PatchKernel,
}

impl Parameterization {
    fn dim(&self) -> usize {
        let p = self.bands;
        match self.shape {
            MetricShape::Identity => 1,
            MetricShape::Diagonal => 1 + p,
            MetricShape::Full => 1 + p * (p + 1) / 2,
        }
    }

    fn encode(&self, params: &FilterParams) -> DVector<f64> {
        let p = self.bands;
        let mut theta = vec![params.h.ln()];
        match self.shape {
            MetricShape::Identity => {}
            MetricShape::Diagonal => {
                theta.extend((0..p).map(|i| 0.5 * params.phi[(i, i)].max(1e-300).ln()));
            }
            MetricShape::Full => {
                let l = lower_factor(&params.phi);
                for i in 0..p {
                    theta.push(l[(i, i)].ln());
                }
                for i in 0..p {
                    for j in 0..i {
                        theta.push(l[(i, j)]);
                    }
                }
            }
        }
        DVector::from_vec(theta)
    }

    fn factor(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        let p = self.bands;
        let mut l = DMatrix::zeros(p, p);
        for i in 0..p {
            l[(i, i)] = theta[1 + i].exp();
        }
        if self.shape == MetricShape::Full {
            let mut k = 1 + p;
            for i in 0..p {
                for j in 0..i {
                    l[(i, j)] = theta[k];
                    k += 1;
                }
            }
        }
        l
    }

    fn decode(&self, theta: &DVector<f64>) -> FilterParams {
        let phi = match self.shape {
            MetricShape::Identity => self.fixed_phi.clone(),
            _ => {
                let l = self.factor(theta);
                let phi = &l * l.transpose();
                // exact symmetry for validation
                DMatrix::from_fn(self.bands, self.bands, |i, j| 0.5 * (phi[(i, j)] + phi[(j, i)]))
            }
        };
        FilterParams {
            h: theta[0].exp(),
            phi,
            patch_radius: self.patch_radius,
            metric_shape: self.shape,
            kernel: self.kernel,
        }
    }

    /// Finite-difference step for each coordinate.
    fn steps(&self, theta: &DVector<f64>, rel: f64) -> Vec<f64> {
        let p = self.bands;
        let mut steps = vec![rel; self.dim()];
        if self.shape == MetricShape::Full {
            let mut k = 1 + p;
            for i in 0..p {
                for j in 0..i {
                    steps[k] = rel * (theta[1 + i].exp() * theta[1 + j].exp()).sqrt();
                    k += 1;
                }
            }
        }
        steps
    }
}

fn lower_factor(phi: &DMatrix<f64>) -> DMatrix<f64> {
    let p = phi.nrows();
    if let Some(ch) = Cholesky::new(phi.clone()) {
        return ch.l();
    }
    let eps = 1e-8 * (phi.trace() / p as f64).max(f64::MIN_POSITIVE);
    let ridged = phi + DMatrix::identity(p, p) * eps;
    match Cholesky::new(ridged) {
        Some(ch) => ch.l(),
        None => DMatrix::from_fn(p, p, |i, j| if i == j { phi[(i, i)].max(eps).sqrt() } else { 0.0 }),
    }
}

struct Objective<'a> {
    noisy: &'a SpectralCube,
    cov: &'a NoiseCovariance,
    candidates: &'a CandidateSets,
    param: Parameterization,
}

impl Objective<'_> {
    fn risk(&self, theta: &DVector<f64>) -> Result<f64> {
        let params = self.param.decode(theta);
        Ok(sure_risk(self.noisy, &params, Neighborhood::Candidates(self.candidates), self.cov)?.risk)
    }

    fn gradient(&self, theta: &DVector<f64>, rel: f64) -> Result<DVector<f64>> {
        let steps = self.param.steps(theta, rel);
        let mut g = DVector::zeros(theta.len());
        for (k, &step) in steps.iter().enumerate() {
            let mut up = theta.clone();
            up[k] += step;
            let mut down = theta.clone();
            down[k] -= step;
            let (ru, rd) = (self.risk(&up)?, self.risk(&down)?);
            g[k] = if ru.is_finite() && rd.is_finite() {
                (ru - rd) / (2.0 * step)
            } else {
                0.0
            };
        }
        Ok(g)
    }
}

/// Minimizes the SURE risk starting from `init`. The returned parameters never
/// have a higher risk than `init`.
pub fn optimize_params(
    noisy: &SpectralCube,
    cov: &NoiseCovariance,
    init: &FilterParams,
    cfg: &OptimizerConfig,
    candidates: &CandidateSets,
) -> Result<(FilterParams, OptimizationTrace)> {
    cfg.validate()?;
    init.validate(noisy.bands())?;
    let objective = Objective {
        noisy,
        cov,
        candidates,
        param: Parameterization {
            shape: cfg.metric_shape,
            bands: noisy.bands(),
            fixed_phi: init.phi.clone(),
            patch_radius: init.patch_radius,
            kernel: init.kernel,
        },
    };
    let param = &objective.param;

    let mut theta = param.encode(init);
    let mut risk = objective.risk(&theta)?;
    if !risk.is_finite() {
        return Err(Error::NonFiniteRisk(format!("risk at the initial point is {risk}")));
    }
    let xi = cfg.xi.unwrap_or(1e-4 * risk.abs());
    let mut current = param.decode(&theta);
    let mut entries = vec![TraceEntry { h: current.h, phi: current.phi.clone(), risk }];

    let n = theta.len();
    let mut grad = objective.gradient(&theta, cfg.finite_difference_step)?;
    let mut inv_hess = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    let mut stop_reason = StopReason::IterMax;

    for iter in 0..cfg.iter_max {
        if grad.iter().all(|&v| v == 0.0) {
            stop_reason = StopReason::RiskPlateau;
            break;
        }
        let mut dir = -(&inv_hess * &grad);
        let mut slope = grad.dot(&dir);
        if !(slope < 0.0) {
            inv_hess = DMatrix::identity(n, n);
            fresh = true;
            dir = -grad.clone();
            slope = grad.dot(&dir);
        }
        if fresh {
            let norm = dir.norm();
            if norm > 1.0 {
                dir /= norm;
                slope /= norm;
            }
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let candidate = &theta + &dir * t;
            let r = objective.risk(&candidate)?;
            if r.is_finite() && r <= risk + ARMIJO_C * t * slope {
                accepted = Some((candidate, r));
                break;
            }
            t *= cfg.line_search_shrink;
        }
        let Some((next, next_risk)) = accepted else {
            debug!("iteration {iter}: line search failed");
            stop_reason = StopReason::LineSearchFailure;
            break;
        };

        let decrease = risk - next_risk;
        let next_grad = objective.gradient(&next, cfg.finite_difference_step)?;
        let s = &next - &theta;
        let y = &next_grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if fresh {
                inv_hess *= sy / y.dot(&y);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let hy = &inv_hess * &y;
            let yhy = y.dot(&hy);
            inv_hess += (&s * s.transpose()) * (rho * rho * yhy + rho)
                - (&hy * s.transpose() + &s * hy.transpose()) * rho;
        }
        theta = next;
        risk = next_risk;
        grad = next_grad;
        current = param.decode(&theta);
        debug!("iteration {iter}: h = {}, risk = {risk}", current.h);
        entries.push(TraceEntry { h: current.h, phi: current.phi.clone(), risk });
        if decrease <= xi {
            stop_reason = StopReason::RiskPlateau;
            break;
        }
    }

    Ok((current, OptimizationTrace { entries, stop_reason }))
}
