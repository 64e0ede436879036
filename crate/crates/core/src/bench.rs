//! Variant and cutoff sweeps over a clean reference cube.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;

use crate::cube::SpectralCube;
use crate::error::{Error, Result};
use crate::filter::{scalar_nlm_denoise, vnlm_denoise, FilterParams, MetricShape, Neighborhood, PatchKernel};
use crate::metrics::{psnr, quality_report};
use crate::noise::{add_gaussian_noise, sigma_for_target_psnr, NoiseCovariance};
use crate::optimize::{default_init_with_radius, optimize_params, OptimizerConfig};
use crate::similarity::{build_candidate_sets, CandidateSets, SimilarityConfig, DEFAULT_VARSIGMA};

/// Gaussian patch kernel width used by the band-by-band NLM baseline.
pub const NLM_KERNEL_WIDTH: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    /// Classic scalar NLM on each band separately.
    Nlm,
    /// OVNLM with candidate preselection.
    Ovnlm,
    /// Vector NLM over the whole image.
    VnlmFull,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Nlm => "nlm",
            Variant::Ovnlm => "ovnlm",
            Variant::VnlmFull => "vnlm-full",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "nlm" => Ok(Variant::Nlm),
            "ovnlm" => Ok(Variant::Ovnlm),
            "vnlm-full" => Ok(Variant::VnlmFull),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant {other:?} (expected nlm, vnlm-full or ovnlm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: Variant,
    /// `inf` for variants without preselection.
    pub varsigma: f64,
    pub input_psnr_db: f64,
    pub output_psnr_db: f64,
    pub ssim_mean: f64,
    pub wall_clock_s: f64,
    pub candidate_mean_size: f64,
}

impl BenchRow {
    pub const CSV_HEADER: &'static str =
        "variant,varsigma,input_psnr_db,output_psnr_db,ssim_mean,wall_clock_s,candidate_mean_size";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.variant,
            self.varsigma,
            self.input_psnr_db,
            self.output_psnr_db,
            self.ssim_mean,
            self.wall_clock_s,
            self.candidate_mean_size
        )
    }
}

pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BenchRow::CSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub target_psnr_db: f64,
    pub variants: Vec<Variant>,
    pub varsigma_grid: Vec<f64>,
    pub seed: u64,
    pub patch_radius: usize,
    /// Fixed smoothing parameter; `None` tunes `h` (and `Phi`) by SURE.
    pub h: Option<f64>,
    pub optimizer: OptimizerConfig,
    /// Timing is the minimum over this many identical denoise calls.
    pub repeats: usize,
}

impl BenchConfig {
    pub fn new(target_psnr_db: f64, variants: Vec<Variant>, varsigma_grid: Vec<f64>) -> Self {
        BenchConfig {
            target_psnr_db,
            variants,
            varsigma_grid,
            seed: 0,
            patch_radius: crate::filter::DEFAULT_PATCH_RADIUS,
            h: None,
            optimizer: OptimizerConfig::default(),
            repeats: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::InvalidParameter("no variants given".into()));
        }
        if self.variants.contains(&Variant::Ovnlm) && self.varsigma_grid.is_empty() {
            return Err(Error::InvalidParameter("ovnlm needs a nonempty varsigma grid".into()));
        }
        for &v in &self.varsigma_grid {
            SimilarityConfig::with_varsigma(v).validate()?;
        }
        if self.repeats == 0 {
            return Err(Error::InvalidParameter("repeats must be at least 1".into()));
        }
        if let Some(h) = self.h {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidParameter(format!("h must be positive, got {h}")));
            }
        }
        self.optimizer.validate()
    }
}

type Run<'a> = Box<dyn Fn() -> Result<SpectralCube> + 'a>;

/// One timed configuration of the sweep.
struct Job<'a> {
    variant: Variant,
    varsigma: f64,
    mean_size: f64,
    run: Run<'a>,
}

/// Runs every job once per round for `repeats` rounds and keeps each job's
/// fastest time. Interleaving spreads machine load evenly over the jobs.
fn time_jobs(jobs: &[Job<'_>], repeats: usize) -> Result<Vec<(SpectralCube, f64)>> {
    let mut best = vec![f64::INFINITY; jobs.len()];
    let mut outs: Vec<Option<SpectralCube>> = jobs.iter().map(|_| None).collect();
    for _ in 0..repeats {
        for (i, job) in jobs.iter().enumerate() {
            let start = Instant::now();
            let value = (job.run)()?;
            best[i] = best[i].min(start.elapsed().as_secs_f64());
            outs[i] = Some(value);
        }
    }
    Ok(outs.into_iter().map(|o| o.expect("repeats >= 1")).zip(best).collect())
}

/// Parameters for one vector variant: fixed `h` with `Phi = I`, or tuned on
/// the given candidate sets.
fn vector_params(
    noisy: &SpectralCube,
    cov: &NoiseCovariance,
    cfg: &BenchConfig,
    candidates: &CandidateSets,
) -> Result<FilterParams> {
    let bands = noisy.bands();
    match cfg.h {
        Some(h) => Ok(FilterParams::euclidean(h, bands, cfg.patch_radius)),
        None => {
            let init = default_init_with_radius(cov, cfg.patch_radius);
            Ok(optimize_params(noisy, cov, &init, &cfg.optimizer, candidates)?.0)
        }
    }
}

/// `h` per band for the scalar baseline. A fixed vector `h` is rescaled so
/// the Gaussian-kernel distance of one band has the same mass as the
/// uniform-kernel distance over all bands.
fn nlm_bandwidths(noisy: &SpectralCube, cov: &NoiseCovariance, cfg: &BenchConfig) -> Result<Vec<f64>> {
    let bands = noisy.bands();
    let side = (2 * cfg.patch_radius + 1) as f64;
    match cfg.h {
        Some(h) => Ok(vec![h / (side * side * bands as f64).sqrt(); bands]),
        None => (0..bands)
            .map(|b| {
                let band = noisy.band_cube(b);
                let band_cov = NoiseCovariance::isotropic(1, cov.get(b, b))?;
                let mut init = default_init_with_radius(&band_cov, cfg.patch_radius);
                init.kernel = PatchKernel::Gaussian { a: NLM_KERNEL_WIDTH };
                init.h /= side;
                let ocfg = OptimizerConfig { metric_shape: MetricShape::Identity, ..cfg.optimizer.clone() };
                let full = CandidateSets::full(band.num_pixels());
                Ok(optimize_params(&band, &band_cov, &init, &ocfg, &full)?.0.h)
            })
            .collect(),
    }
}

fn nlm_denoise_per_band(noisy: &SpectralCube, hs: &[f64], patch_radius: usize) -> Result<SpectralCube> {
    let bands = (0..noisy.bands())
        .map(|b| scalar_nlm_denoise(&noisy.band_cube(b), hs[b], NLM_KERNEL_WIDTH, patch_radius))
        .collect::<Result<Vec<_>>>()?;
    SpectralCube::stack_bands(&bands)
}

/// Injects noise at the target input PSNR, then denoises and scores every
/// requested variant. Rows are sorted by `(variant, varsigma)`.
pub fn run_bench(clean: &SpectralCube, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let bands = clean.bands();
    let sigma = sigma_for_target_psnr(clean, cfg.target_psnr_db)?;
    let cov = NoiseCovariance::isotropic(bands, sigma * sigma)?;
    let noisy = add_gaussian_noise(clean, &cov, cfg.seed)?;
    let input_psnr_db = psnr(clean, &noisy)?;
    let n = clean.num_pixels();

    let mut variants = cfg.variants.clone();
    variants.sort();
    variants.dedup();
    let mut grid = cfg.varsigma_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let mut jobs: Vec<Job<'_>> = Vec::new();
    for variant in variants {
        match variant {
            Variant::Nlm => {
                let hs = nlm_bandwidths(&noisy, &cov, cfg)?;
                let (noisy, r) = (&noisy, cfg.patch_radius);
                let run: Run<'_> = Box::new(move || nlm_denoise_per_band(noisy, &hs, r));
                jobs.push(Job { variant, varsigma: f64::INFINITY, mean_size: n as f64, run });
            }
            Variant::VnlmFull => {
                let params = vector_params(&noisy, &cov, cfg, &CandidateSets::full(n))?;
                let noisy = &noisy;
                let run: Run<'_> = Box::new(move || vnlm_denoise(noisy, &params, Neighborhood::Full));
                jobs.push(Job { variant, varsigma: f64::INFINITY, mean_size: n as f64, run });
            }
            Variant::Ovnlm => {
                for &varsigma in &grid {
                    let sim = SimilarityConfig::with_varsigma(varsigma);
                    let sets = build_candidate_sets(&noisy, &cov, &sim)?;
                    let params = vector_params(&noisy, &cov, cfg, &sets)?;
                    let (noisy, cov) = (&noisy, &cov);
                    // preselection is part of the timed call
                    let run: Run<'_> = Box::new(move || {
                        let sets = build_candidate_sets(noisy, cov, &sim)?;
                        vnlm_denoise(noisy, &params, Neighborhood::Candidates(&sets))
                    });
                    jobs.push(Job { variant, varsigma, mean_size: sets.mean_size(), run });
                }
            }
        }
    }

    let mut rows = Vec::with_capacity(jobs.len());
    for (job, (out, secs)) in jobs.iter().zip(time_jobs(&jobs, cfg.repeats)?) {
        let q = quality_report(clean, &out)?;
        info!("{} varsigma={}: {:.3} dB in {secs:.3} s", job.variant, job.varsigma, q.psnr_db);
        rows.push(BenchRow {
            variant: job.variant,
            varsigma: job.varsigma,
            input_psnr_db,
            output_psnr_db: q.psnr_db,
            ssim_mean: q.ssim_mean,
            wall_clock_s: secs,
            candidate_mean_size: job.mean_size,
        });
    }
    Ok(rows)
}

/// Checks the sweep trends and returns one message per violation.
///
/// Over the ovnlm rows in increasing `varsigma`: candidate mean size must not
/// decrease, output PSNR must not drop by more than `psnr_slack_db` and time
/// must not drop by more than the relative `time_slack`. When both are
/// present, ovnlm at the default cutoff must be faster than vnlm-full.
pub fn check_trends(rows: &[BenchRow], psnr_slack_db: f64, time_slack: f64) -> Vec<String> {
    let mut problems = Vec::new();
    let mut sweep: Vec<&BenchRow> = rows.iter().filter(|r| r.variant == Variant::Ovnlm).collect();
    sweep.sort_by(|a, b| a.varsigma.total_cmp(&b.varsigma));
    for w in sweep.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.candidate_mean_size < a.candidate_mean_size {
            problems.push(format!(
                "candidate mean size drops from {} to {} between varsigma {} and {}",
                a.candidate_mean_size, b.candidate_mean_size, a.varsigma, b.varsigma
            ));
        }
        if b.output_psnr_db < a.output_psnr_db - psnr_slack_db {
            problems.push(format!(
                "output PSNR drops from {} to {} dB between varsigma {} and {}",
                a.output_psnr_db, b.output_psnr_db, a.varsigma, b.varsigma
            ));
        }
        if b.wall_clock_s < a.wall_clock_s * (1.0 - time_slack) {
            problems.push(format!(
                "wall clock drops from {} to {} s between varsigma {} and {}",
                a.wall_clock_s, b.wall_clock_s, a.varsigma, b.varsigma
            ));
        }
    }
    let reference = sweep.iter().find(|r| r.varsigma == DEFAULT_VARSIGMA);
    let full = rows.iter().find(|r| r.variant == Variant::VnlmFull);
    if let (Some(o), Some(f)) = (reference, full) {
        if o.wall_clock_s >= f.wall_clock_s {
            problems.push(format!(
                "ovnlm ({} s) is not faster than vnlm-full ({} s)",
                o.wall_clock_s, f.wall_clock_s
            ));
        }
    }
    problems
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: Variant, varsigma: f64, psnr: f64, secs: f64, size: f64) -> BenchRow {
        BenchRow {
            variant,
            varsigma,
            input_psnr_db: 19.0,
            output_psnr_db: psnr,
            ssim_mean: 0.9,
            wall_clock_s: secs,
            candidate_mean_size: size,
        }
    }

    #[test]
    fn parses_variants() {
        assert_eq!("vnlm-full".parse::<Variant>().unwrap(), Variant::VnlmFull);
        assert_eq!(" ovnlm".parse::<Variant>().unwrap(), Variant::Ovnlm);
        assert!("bm3d".parse::<Variant>().is_err());
        let mut v = vec![Variant::VnlmFull, Variant::Ovnlm, Variant::Nlm];
        v.sort();
        assert_eq!(v.iter().map(|v| v.name()).collect::<Vec<_>>(), ["nlm", "ovnlm", "vnlm-full"]);
    }

    #[test]
    fn csv_layout() {
        let r = row(Variant::VnlmFull, f64::INFINITY, 30.5, 1.25, 64.0);
        assert_eq!(r.csv_row(), "vnlm-full,inf,19,30.5,0.9,1.25,64");
        let csv = rows_to_csv(&[r]);
        assert!(csv.starts_with(BenchRow::CSV_HEADER));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn trend_checks() {
        let good = vec![
            row(Variant::Ovnlm, 10.0, 28.0, 1.0, 10.0),
            row(Variant::Ovnlm, 100.0, 27.95, 0.95, 20.0),
            row(Variant::VnlmFull, f64::INFINITY, 29.0, 3.0, 64.0),
        ];
        assert!(check_trends(&good, 0.1, 0.1).is_empty());
        let bad = vec![
            row(Variant::Ovnlm, 10.0, 28.0, 1.0, 10.0),
            row(Variant::Ovnlm, 100.0, 27.0, 0.5, 9.0),
            row(Variant::VnlmFull, f64::INFINITY, 29.0, 0.4, 64.0),
        ];
        assert_eq!(check_trends(&bad, 0.1, 0.1).len(), 4);
    }

    #[test]
    fn empty_variants_rejected() {
        let clean = SpectralCube::from_fn(8, 8, 2, |r, c, _| (r * c) as f64 + 1.0).unwrap();
        let cfg = BenchConfig::new(19.0, vec![], vec![100.0]);
        assert!(run_bench(&clean, &cfg).is_err());
        let cfg = BenchConfig::new(19.0, vec![Variant::Ovnlm], vec![0.5]);
        assert!(run_bench(&clean, &cfg).is_err());
    }

    #[test]
    fn small_sweep_runs() {
        let clean = SpectralCube::from_fn(12, 12, 2, |r, c, b| if (r / 4 + c / 4) % 2 == 0 { 50.0 } else { 200.0 } + b as f64).unwrap();
        let mut cfg = BenchConfig::new(19.0, vec![Variant::VnlmFull, Variant::Nlm, Variant::Ovnlm], vec![100.0, 2.0]);
        cfg.patch_radius = 1;
        cfg.h = Some(60.0);
        let rows = run_bench(&clean, &cfg).unwrap();
        let names: Vec<String> = rows.iter().map(|r| format!("{}@{}", r.variant, r.varsigma)).collect();
        assert_eq!(names, ["nlm@inf", "ovnlm@2", "ovnlm@100", "vnlm-full@inf"]);
        for r in &rows {
            assert!((r.input_psnr_db - 19.0).abs() < 0.5);
            assert!(r.output_psnr_db > r.input_psnr_db);
            assert!(r.wall_clock_s >= 0.0);
            assert!(r.candidate_mean_size >= 1.0 && r.candidate_mean_size <= 144.0);
        }
    }
}
