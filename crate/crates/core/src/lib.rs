//! Multispectral image denoising with a vector non-local means filter whose
//! smoothing parameter and patch metric are tuned by minimizing Stein's
//! unbiased risk estimate.
//!
//! Cubes are stored pixel-major (`samples[(row * width + col) * bands + band]`)
//! and read from / written to the little-endian MSC1 container.

pub mod bench;
pub mod cli;
pub mod cube;
pub mod error;
pub mod filter;
pub mod metrics;
pub mod noise;
pub mod optimize;
pub mod pgm;
pub mod similarity;
pub mod sure;

pub use cube::{read_cube, write_cube, PixelCoord, SpectralCube};
pub use error::{Error, Result};
pub use filter::{
    bandwise_nlm_denoise, patch_distance, scalar_nlm_denoise, vnlm_denoise, vnlm_weights, FilterParams,
    MetricShape, Neighborhood, PatchKernel,
};
pub use metrics::{psnr, quality_report, ssim_global, QualityReport};
pub use noise::{add_gaussian_noise, estimate_noise_covariance_mad, sigma_for_target_psnr, NoiseCovariance};
pub use optimize::{default_init, optimize_params, OptimizationTrace, OptimizerConfig, StopReason};
pub use similarity::{build_candidate_sets, CandidateSets, SimilarityConfig};
pub use sure::{chi, chi_gradient, divergence_at, sure_risk, RiskReport};
