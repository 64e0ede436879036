//! Additive Gaussian noise injection and robust (MAD) noise covariance
//! estimation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

/// Consistency constant turning a MAD into a Gaussian standard deviation.
pub const MAD_TO_SIGMA: f64 = 1.4826;

/// Relative tolerance (w.r.t. the trace) for accepting slightly negative
/// eigenvalues as PSD.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Inter-band noise covariance `P x P`, symmetric and positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseCovariance {
    matrix: DMatrix<f64>,
}

impl NoiseCovariance {
    /// Validates a covariance matrix. The input is symmetrized exactly and must
    /// be PSD within `PSD_TOLERANCE * trace`.
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "covariance must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("non-finite covariance entry".into()));
        }
        let matrix = symmetrize(&matrix);
        let min_eigenvalue = min_eigenvalue(&matrix);
        let tol = PSD_TOLERANCE * matrix.trace().abs().max(f64::MIN_POSITIVE);
        if min_eigenvalue < -tol || matrix.diagonal().iter().any(|&d| d < 0.0) {
            return Err(Error::NotPsd { min_eigenvalue });
        }
        Ok(NoiseCovariance { matrix })
    }

    pub fn isotropic(bands: usize, variance: f64) -> Result<Self> {
        Self::new(DMatrix::identity(bands, bands) * variance)
    }

    pub fn zeros(bands: usize) -> Self {
        NoiseCovariance {
            matrix: DMatrix::zeros(bands, bands),
        }
    }

    pub fn bands(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// Per-band noise standard deviations `sqrt(Psi(i,i))`.
    pub fn band_sigmas(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|v| v.sqrt()).collect()
    }

    /// Returns a copy whose diagonal is at least `floor`.
    pub fn with_diagonal_floor(&self, floor: f64) -> Self {
        let mut m = self.matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] = m[(i, i)].max(floor);
        }
        NoiseCovariance { matrix: m }
    }

    /// Symmetric square root `V diag(sqrt(max(l, 0))) V^T`.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
    }

    /// Header-less CSV: row `i` holds `Psi(i, .)`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.bands() {
            let row: Vec<String> = (0..self.bands())
                .map(|j| format!("{}", self.matrix[(i, j)]))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .enumerate()
            .map(|(i, line)| {
                line.split(',')
                    .map(|t| {
                        t.trim().parse::<f64>().map_err(|_| {
                            Error::Csv(format!("row {i}: cannot parse {:?}", t.trim()))
                        })
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let p = rows.len();
        if p == 0 || rows.iter().any(|r| r.len() != p) {
            return Err(Error::Csv(format!(
                "expected a square matrix, got {p} rows of lengths {:?}",
                rows.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Self::new(DMatrix::from_fn(p, p, |i, j| rows[i][j]))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            m[(i, i)]
        } else {
            0.5 * (m[(i, j)] + m[(j, i)])
        }
    })
}

pub(crate) fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Symmetrizes and clips negative eigenvalues to zero.
pub fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let projected = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    symmetrize(&projected)
}

/// Adds zero-mean Gaussian noise with inter-band covariance `cov` to every
/// pixel. Each pixel draws from its own ChaCha stream keyed by the pixel
/// index, so the output depends only on `seed`, never on the thread count.
pub fn add_gaussian_noise(
    cube: &SpectralCube,
    cov: &NoiseCovariance,
    seed: u64,
) -> Result<SpectralCube> {
    let p = cube.bands();
    if cov.bands() != p {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {0}x{0}, cube has {p} bands",
            cov.bands()
        )));
    }
    let factor = cov.sqrt_factor();
    let base_seed = ChaCha8Rng::seed_from_u64(seed).get_seed();
    let mut out = cube.samples().to_vec();
    out.par_chunks_mut(p).enumerate().for_each(|(idx, px)| {
        let mut rng = ChaCha8Rng::from_seed(base_seed);
        rng.set_stream(idx as u64);
        let z: Vec<f64> = (0..p).map(|_| StandardNormal.sample(&mut rng)).collect();
        for (i, v) in px.iter_mut().enumerate() {
            let mut n = 0.0;
            for (j, zj) in z.iter().enumerate() {
                n += factor[(i, j)] * zj;
            }
            *v += n;
        }
    });
    cube.with_samples(out)
}

/// Noise standard deviation that yields the requested input PSNR against a
/// clean cube whose peak value is the cube maximum.
pub fn sigma_for_target_psnr(cube: &SpectralCube, target_psnr_db: f64) -> Result<f64> {
    if target_psnr_db.is_nan() || target_psnr_db == f64::NEG_INFINITY {
        return Err(Error::InvalidParameter(format!(
            "target PSNR must be finite or +inf, got {target_psnr_db}"
        )));
    }
    let peak = cube.max_value();
    if peak <= 0.0 {
        return Err(Error::InvalidParameter(
            "cube maximum is not positive; PSNR peak signal is undefined".into(),
        ));
    }
    Ok(peak * 10f64.powf(-target_psnr_db / 20.0))
}

pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

/// Median absolute deviation about the median.
pub fn median_absolute_deviation(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let med = median_in_place(&mut buf);
    for v in buf.iter_mut() {
        *v = (*v - med).abs();
    }
    median_in_place(&mut buf)
}

/// Robust covariance estimate from raw band values: squared scaled MAD on the
/// diagonal, and the sum/difference MAD identity for off-diagonal terms. The
/// result is projected onto the PSD cone. Off-diagonal terms touching a
/// zero-MAD band are set to 0.
pub fn estimate_noise_covariance_mad(cube: &SpectralCube) -> Result<NoiseCovariance> {
    if cube.num_pixels() < 2 {
        return Err(Error::InvalidParameter(
            "MAD covariance estimation needs at least 2 pixels".into(),
        ));
    }
    let p = cube.bands();
    let bands: Vec<Vec<f64>> = (0..p).map(|b| cube.band(b)).collect();
    let variances: Vec<f64> = bands
        .par_iter()
        .map(|band| (MAD_TO_SIGMA * median_absolute_deviation(band)).powi(2))
        .collect();

    let pairs: Vec<(usize, usize)> = (0..p)
        .flat_map(|i| (i + 1..p).map(move |j| (i, j)))
        .collect();
    let off_diagonal: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| {
            if variances[i] == 0.0 || variances[j] == 0.0 {
                log::warn!("band {i} or {j} has zero MAD; covariance ({i},{j}) set to 0");
                return 0.0;
            }
            let a = variances[i].powf(-0.5);
            let b = variances[j].powf(-0.5);
            let sum: Vec<f64> = bands[i].iter().zip(&bands[j]).map(|(x, y)| a * x + b * y).collect();
            let diff: Vec<f64> = bands[i].iter().zip(&bands[j]).map(|(x, y)| a * x - b * y).collect();
            let mad_sum = median_absolute_deviation(&sum);
            let mad_diff = median_absolute_deviation(&diff);
            MAD_TO_SIGMA * MAD_TO_SIGMA / (4.0 * a * b) * (mad_sum * mad_sum - mad_diff * mad_diff)
        })
        .collect();

    let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(variances));
    for (&(i, j), &v) in pairs.iter().zip(&off_diagonal) {
        m[(i, j)] = v;
        m[(j, i)] = v;
    }
    let projected = if pairs.is_empty() { m } else { project_psd(&m) };
    NoiseCovariance::new(projected)
}
