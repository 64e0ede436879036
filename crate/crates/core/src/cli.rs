//! Command-line front end. `run` returns the process exit status: 0 on
//! success, 2 on usage errors and 1 on runtime errors.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use nalgebra::DMatrix;

use crate::bench::{check_trends, rows_to_csv, run_bench, BenchConfig, Variant};
use crate::cube::{read_cube, write_cube, SpectralCube};
use crate::error::Error;
use crate::filter::{FilterParams, MetricShape, Neighborhood, DEFAULT_PATCH_RADIUS};
use crate::metrics::{default_ssim_constants, psnr, quality_report_with, QualityReport};
use crate::noise::{add_gaussian_noise, estimate_noise_covariance_mad, sigma_for_target_psnr, NoiseCovariance};
use crate::optimize::{default_init_with_radius, optimize_params, OptimizerConfig};
use crate::pgm::{band_to_gray, import_band_stack, write_pgm};
use crate::similarity::{build_candidate_sets, CandidateSets, SimilarityConfig, DEFAULT_VARSIGMA};
use crate::sure::{sure_risk_with_output, RiskReport};

#[derive(Debug, Parser)]
#[command(name = "ovnlm", version, about = "Multispectral denoising with SURE-tuned vector non-local means")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Add Gaussian noise to a cube and print the achieved input PSNR.
    AddNoise(AddNoiseArgs),
    /// Denoise a cube.
    Denoise(DenoiseArgs),
    /// Sweep variants and cutoffs on a clean cube. Wall-clock covers the
    /// denoise call only (preselection included, parameter tuning, I/O and
    /// noise injection excluded).
    Bench(BenchArgs),
    /// Print PSNR and SSIM of a test cube against a reference.
    Metrics(MetricsArgs),
    /// Estimate the noise covariance with the MAD estimator.
    EstimateNoise(EstimateNoiseArgs),
    /// Convert between a stack of binary PGM files and an MSC1 cube.
    Convert(ConvertArgs),
}

#[derive(Debug, Args)]
struct AddNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of i.i.d. noise in every band.
    #[arg(long, conflicts_with_all = ["target_psnr", "cov"])]
    sigma: Option<f64>,
    /// Input PSNR in dB to calibrate i.i.d. noise against.
    #[arg(long, conflicts_with = "cov")]
    target_psnr: Option<f64>,
    /// Noise covariance as a header-less P x P CSV.
    #[arg(long)]
    cov: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ShapeArg {
    Identity,
    Diagonal,
    Full,
}

impl From<ShapeArg> for MetricShape {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Identity => MetricShape::Identity,
            ShapeArg::Diagonal => MetricShape::Diagonal,
            ShapeArg::Full => MetricShape::Full,
        }
    }
}

#[derive(Debug, Args)]
struct DenoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_PATCH_RADIUS)]
    patch_radius: usize,
    /// Preselection cutoff (>= 1).
    #[arg(long)]
    varsigma: Option<f64>,
    /// Use every pixel as a candidate.
    #[arg(long, conflicts_with = "varsigma")]
    no_preselect: bool,
    /// Tune h and Phi by SURE minimization (the default without --h).
    #[arg(long, conflicts_with_all = ["h", "phi"])]
    optimize: bool,
    /// Fixed smoothing parameter.
    #[arg(long)]
    h: Option<f64>,
    /// `identity` or a CSV file: one row of P diagonal values or P rows of P.
    #[arg(long, requires = "h")]
    phi: Option<String>,
    #[arg(long, default_value_t = 50)]
    iter_max: usize,
    /// Risk-decrease stopping threshold (default 1e-4 of the initial risk).
    #[arg(long)]
    xi: Option<f64>,
    /// Metric parameterization tuned by the optimizer.
    #[arg(long, value_enum)]
    metric_shape: Option<ShapeArg>,
    #[arg(long, conflicts_with = "estimate_cov")]
    cov: Option<PathBuf>,
    /// Estimate the noise covariance from the input (the default without --cov).
    #[arg(long)]
    estimate_cov: bool,
    /// Lower bound applied to the covariance diagonal.
    #[arg(long)]
    diag_floor: Option<f64>,
    /// Clean reference for a quality report.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Write the optimization trace CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Write the risk report CSV here.
    #[arg(long)]
    risk_out: Option<PathBuf>,
    /// Write the per-pixel candidate counts as a one-band cube.
    #[arg(long)]
    dump_candidates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    target_psnr: f64,
    /// Comma-separated subset of nlm, vnlm-full, ovnlm.
    #[arg(long, value_delimiter = ',', default_value = "nlm,vnlm-full,ovnlm")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "1,10,50,100,500,1000,10000")]
    varsigma_grid: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_PATCH_RADIUS)]
    patch_radius: usize,
    /// Fixed h with Phi = I for every variant instead of SURE tuning.
    #[arg(long)]
    h: Option<f64>,
    #[arg(long, default_value_t = 50)]
    iter_max: usize,
    #[arg(long, value_enum)]
    metric_shape: Option<ShapeArg>,
    /// Report the fastest of this many denoise calls.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
    /// Exit with status 1 unless PSNR, time and candidate size are
    /// nondecreasing in varsigma and ovnlm beats vnlm-full on time.
    #[arg(long)]
    assert_trends: bool,
    #[arg(long, default_value_t = 0.1)]
    psnr_slack: f64,
    /// Relative slack on the wall-clock trend.
    #[arg(long, default_value_t = 0.1)]
    time_slack: f64,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    /// SSIM luminance constant (default (0.01 D)^2, D the reference max).
    #[arg(long)]
    c1: Option<f64>,
    /// SSIM contrast constant (default (0.03 D)^2).
    #[arg(long)]
    c2: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EstimateNoiseArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Covariance CSV; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    diag_floor: Option<f64>,
}

#[derive(Debug, Args)]
struct ConvertArgs {
    /// Several .pgm bands, or one cube.
    #[arg(long = "in", num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// One cube, or one .pgm per band.
    #[arg(long = "out", num_args = 1.., required = true)]
    outputs: Vec<PathBuf>,
    /// PGM maxval when writing bands (default 255, or 65535 if the cube exceeds 255).
    #[arg(long)]
    maxval: Option<u16>,
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn write_out(out: &mut dyn Write, text: &str) -> CmdResult {
    out.write_all(text.as_bytes())
        .map_err(|e| Failure::Runtime(Error::io("<stdout>", e)))
}

fn write_file(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

/// Parses `args` (program name first) and runs the subcommand.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                let _ = write!(out, "{e}");
            } else {
                eprint!("{e}");
            }
            return code;
        }
    };
    let result = match cli.command {
        Command::AddNoise(a) => add_noise(a, out),
        Command::Denoise(a) => denoise(a, out),
        Command::Bench(a) => bench(a, out),
        Command::Metrics(a) => metrics(a, out),
        Command::EstimateNoise(a) => estimate_noise(a, out),
        Command::Convert(a) => convert(a),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            2
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn add_noise(a: AddNoiseArgs, out: &mut dyn Write) -> CmdResult {
    let clean = read_cube(&a.input)?;
    let bands = clean.bands();
    let cov = match (a.sigma, a.target_psnr, &a.cov) {
        (Some(s), None, None) => {
            if !(s >= 0.0) {
                return Err(Failure::Usage(format!("--sigma must be nonnegative, got {s}")));
            }
            NoiseCovariance::isotropic(bands, s * s)?
        }
        (None, Some(db), None) => {
            let s = sigma_for_target_psnr(&clean, db)?;
            NoiseCovariance::isotropic(bands, s * s)?
        }
        (None, None, Some(path)) => NoiseCovariance::read_csv(path)?,
        _ => {
            return Err(Failure::Usage(
                "give exactly one of --sigma, --target-psnr, --cov".into(),
            ))
        }
    };
    let noisy = add_gaussian_noise(&clean, &cov, a.seed)?;
    write_cube(&noisy, &a.out)?;
    write_out(out, &format!("input_psnr_db,{}\n", psnr(&clean, &noisy)?))
}

fn load_phi(spec: &str, bands: usize) -> std::result::Result<DMatrix<f64>, Failure> {
    if spec == "identity" {
        return Ok(DMatrix::identity(bands, bands));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| Failure::Runtime(Error::io(spec, e)))?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Csv(format!("bad number {v:?} in {spec}"))))
                .collect::<crate::error::Result<Vec<f64>>>()
        })
        .collect::<crate::error::Result<_>>()?;
    match rows.len() {
        1 if rows[0].len() == bands => Ok(DMatrix::from_diagonal(&nalgebra::DVector::from_vec(rows[0].clone()))),
        n if n == bands && rows.iter().all(|r| r.len() == bands) => {
            Ok(DMatrix::from_fn(bands, bands, |i, j| rows[i][j]))
        }
        _ => Err(Failure::Runtime(Error::Csv(format!(
            "{spec}: expected {bands} diagonal values or a {bands}x{bands} matrix"
        )))),
    }
}

fn denoise(a: DenoiseArgs, out: &mut dyn Write) -> CmdResult {
    if a.optimize && a.h.is_some() {
        return Err(Failure::Usage("--optimize and --h are exclusive".into()));
    }
    let noisy = read_cube(&a.input)?;
    let bands = noisy.bands();
    let mut cov = match &a.cov {
        Some(path) => NoiseCovariance::read_csv(path)?,
        None => estimate_noise_covariance_mad(&noisy)?,
    };
    if cov.bands() != bands {
        return Err(Failure::Runtime(Error::DimensionMismatch(format!(
            "covariance has {} bands, cube has {bands}",
            cov.bands()
        ))));
    }
    if let Some(floor) = a.diag_floor {
        cov = cov.with_diagonal_floor(floor);
    }

    let n = noisy.num_pixels();
    let sets = if a.no_preselect {
        CandidateSets::full(n)
    } else {
        let sim = SimilarityConfig::with_varsigma(a.varsigma.unwrap_or(DEFAULT_VARSIGMA));
        build_candidate_sets(&noisy, &cov, &sim)?
    };
    info!("mean candidate set size {}", sets.mean_size());
    if let Some(path) = &a.dump_candidates {
        write_cube(&sets.counts_cube(noisy.height(), noisy.width())?, path)?;
    }
    let neighborhood = if a.no_preselect { Neighborhood::Full } else { Neighborhood::Candidates(&sets) };

    let params = match a.h {
        Some(h) => {
            let phi = match &a.phi {
                Some(spec) => load_phi(spec, bands)?,
                None => DMatrix::identity(bands, bands),
            };
            let mut params = FilterParams::euclidean(h, bands, a.patch_radius).with_phi(phi);
            params.validate(bands)?;
            params.metric_shape = a.metric_shape.map_or(MetricShape::default_for_bands(bands), Into::into);
            params
        }
        None => {
            let init = default_init_with_radius(&cov, a.patch_radius);
            let cfg = OptimizerConfig {
                iter_max: a.iter_max,
                xi: a.xi,
                metric_shape: a.metric_shape.map_or(MetricShape::default_for_bands(bands), Into::into),
                ..Default::default()
            };
            let start = Instant::now();
            let (params, trace) = optimize_params(&noisy, &cov, &init, &cfg, &sets)?;
            info!(
                "optimization: {} iterates, stopped on {}, {:.3} s",
                trace.len(),
                trace.stop_reason.as_str(),
                start.elapsed().as_secs_f64()
            );
            if let Some(path) = &a.trace {
                trace.write_csv(path)?;
            }
            params
        }
    };

    let (report, denoised) = sure_risk_with_output(&noisy, &params, neighborhood, &cov)?;
    write_cube(&denoised, &a.out)?;

    let risk_csv = format!("{}\n{}\n", RiskReport::CSV_HEADER, report.csv_row());
    if let Some(path) = &a.risk_out {
        write_file(path, &risk_csv)?;
    }
    write_out(out, &format!("h,{}\n", params.h))?;
    write_out(out, &risk_csv)?;
    if let Some(path) = &a.reference {
        let clean = read_cube(path)?;
        let (c1, c2) = default_ssim_constants(clean.max_value());
        let q = quality_report_with(&clean, &denoised, c1, c2)?;
        write_out(out, &quality_csv(&q))?;
    }
    Ok(())
}

fn quality_csv(q: &QualityReport) -> String {
    format!("{}\n{}\n", QualityReport::csv_header(q.ssim_bands.len()), q.csv_row())
}

fn bench(a: BenchArgs, out: &mut dyn Write) -> CmdResult {
    if a.variants.iter().all(|v| v.trim().is_empty()) {
        return Err(Failure::Usage("--variants is empty".into()));
    }
    let variants = a
        .variants
        .iter()
        .filter(|v| !v.trim().is_empty())
        .map(|v| v.parse::<Variant>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let clean = read_cube(&a.input)?;
    let mut cfg = BenchConfig::new(a.target_psnr, variants, a.varsigma_grid);
    cfg.seed = a.seed;
    cfg.patch_radius = a.patch_radius;
    cfg.h = a.h;
    cfg.repeats = a.repeats;
    cfg.optimizer.iter_max = a.iter_max;
    cfg.optimizer.metric_shape = a.metric_shape.map_or(MetricShape::default_for_bands(clean.bands()), Into::into);
    let rows = run_bench(&clean, &cfg)?;
    let csv = rows_to_csv(&rows);
    write_file(&a.out, &csv)?;
    write_out(out, &csv)?;
    if a.assert_trends {
        let problems = check_trends(&rows, a.psnr_slack, a.time_slack);
        if !problems.is_empty() {
            for p in &problems {
                eprintln!("trend violation: {p}");
            }
            return Err(Failure::Runtime(Error::InvalidParameter(format!(
                "{} trend violation(s)",
                problems.len()
            ))));
        }
    }
    Ok(())
}

fn metrics(a: MetricsArgs, out: &mut dyn Write) -> CmdResult {
    let reference = read_cube(&a.reference)?;
    let test = read_cube(&a.test)?;
    let (d1, d2) = default_ssim_constants(reference.max_value());
    let q = quality_report_with(&reference, &test, a.c1.unwrap_or(d1), a.c2.unwrap_or(d2))?;
    let csv = quality_csv(&q);
    if let Some(path) = &a.out {
        write_file(path, &csv)?;
    }
    write_out(out, &csv)
}

fn estimate_noise(a: EstimateNoiseArgs, out: &mut dyn Write) -> CmdResult {
    let cube = read_cube(&a.input)?;
    let mut cov = estimate_noise_covariance_mad(&cube)?;
    if let Some(floor) = a.diag_floor {
        cov = cov.with_diagonal_floor(floor);
    }
    match &a.out {
        Some(path) => Ok(cov.write_csv(path)?),
        None => write_out(out, &cov.to_csv()),
    }
}

fn is_pgm(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn convert(a: ConvertArgs) -> CmdResult {
    let in_pgm = a.inputs.iter().all(|p| is_pgm(p));
    let out_pgm = a.outputs.iter().all(|p| is_pgm(p));
    match (in_pgm, out_pgm, a.inputs.len(), a.outputs.len()) {
        (true, false, _, 1) => {
            let cube = import_band_stack(&a.inputs)?;
            write_cube(&cube, &a.outputs[0])?;
            Ok(())
        }
        (false, true, 1, _) => {
            let cube: SpectralCube = read_cube(&a.inputs[0])?;
            if cube.bands() != a.outputs.len() {
                return Err(Failure::Usage(format!(
                    "cube has {} bands but {} output files were given",
                    cube.bands(),
                    a.outputs.len()
                )));
            }
            let maxval = a.maxval.unwrap_or(if cube.max_value() > 255.0 { 65535 } else { 255 });
            for (b, path) in a.outputs.iter().enumerate() {
                write_pgm(&band_to_gray(&cube, b, maxval), path)?;
            }
            Ok(())
        }
        _ => Err(Failure::Usage(
            "convert takes several .pgm inputs and one cube output, or one cube input and one .pgm per band".into(),
        )),
    }
}
