#![allow(dead_code)]

use ovnlm::SpectralCube;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Spectral signatures of a few land-cover-like materials (6 bands).
const MATERIALS: [[f64; 6]; 6] = [
    [30.0, 35.0, 180.0, 220.0, 200.0, 150.0],
    [120.0, 60.0, 35.0, 25.0, 20.0, 20.0],
    [140.0, 150.0, 165.0, 185.0, 200.0, 210.0],
    [210.0, 215.0, 220.0, 225.0, 230.0, 235.0],
    [60.0, 140.0, 90.0, 60.0, 40.0, 110.0],
    [45.0, 50.0, 55.0, 60.0, 65.0, 70.0],
];

/// Piecewise-constant scene: disks and rectangles over a checkerboard, every
/// band sharing the same region map. Laid out on a 64x64 canvas and scaled.
pub fn piecewise_scene(height: usize, width: usize, bands: usize) -> SpectralCube {
    assert!(bands <= 6);
    SpectralCube::from_fn(height, width, bands, |r, c, b| {
        let y = r as f64 * 64.0 / height as f64;
        let x = c as f64 * 64.0 / width as f64;
        let k = if (x - 20.0).powi(2) + (y - 22.0).powi(2) < 150.0 {
            1
        } else if (x - 46.0).powi(2) + (y - 40.0).powi(2) < 220.0 {
            3
        } else if y >= 49.0 && x < 30.0 {
            4
        } else if x >= 51.0 && y < 20.0 {
            5
        } else if ((y / 16.0) as usize + (x / 16.0) as usize) % 2 == 0 {
            0
        } else {
            2
        };
        MATERIALS[k][b]
    })
    .unwrap()
}

/// Smoothly varying textured scene with spectrally correlated bands.
pub fn smooth_scene(height: usize, width: usize, bands: usize) -> SpectralCube {
    use std::f64::consts::PI;
    SpectralCube::from_fn(height, width, bands, |r, c, b| {
        let (x, y, t) = (c as f64, r as f64, b as f64);
        let u = (2.0 * PI * x / 21.0).sin() * (2.0 * PI * y / 27.0).cos();
        let v = ((x - 32.0).powi(2) + (y - 32.0).powi(2)).sqrt() / 45.0;
        (128.0 + 70.0 * u * (1.0 - 0.15 * t) + 60.0 * (v - 0.5) * (1.0 + 0.2 * t)).clamp(5.0, 250.0)
    })
    .unwrap()
}

pub fn uniform_cube(height: usize, width: usize, bands: usize, scale: f64, seed: u64) -> SpectralCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..height * width * bands).map(|_| rng.random::<f64>() * scale).collect();
    SpectralCube::new(height, width, bands, samples).unwrap()
}
