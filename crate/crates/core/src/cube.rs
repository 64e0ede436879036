//! Spectral cube data model and the MSC1 container format.
//!
//! A cube holds `H x L` pixels of `P` bands each. Samples are stored
//! band-interleaved by pixel, so the spectral vector of one pixel is a
//! contiguous slice.
//!
//! MSC1 layout (little-endian throughout):
//!
//! | bytes  | content                              |
//! |--------|--------------------------------------|
//! | 0..4   | ASCII `MSC1`                         |
//! | 4..8   | height `H` (u32)                     |
//! | 8..12  | width `L` (u32)                      |
//! | 12..16 | bands `P` (u32)                      |
//! | 16..   | `H*L*P` f64 samples, bands innermost |

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MSC1_MAGIC: &[u8; 4] = b"MSC1";
pub const MSC1_HEADER_LEN: usize = 16;

/// Pixel coordinate inside a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelCoord {
    pub row: usize,
    pub col: usize,
}

impl PixelCoord {
    pub fn new(row: usize, col: usize) -> Self {
        PixelCoord { row, col }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    height: usize,
    width: usize,
    bands: usize,
    samples: Vec<f64>,
}

impl SpectralCube {
    pub fn new(height: usize, width: usize, bands: usize, samples: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::ZeroDimension {
                height,
                width,
                bands,
            });
        }
        let expected = height * width * bands;
        if samples.len() != expected {
            return Err(Error::SampleCount {
                expected,
                actual: samples.len(),
            });
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample { index });
        }
        Ok(SpectralCube {
            height,
            width,
            bands,
            samples,
        })
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Result<Self> {
        Self::new(height, width, bands, vec![0.0; height * width * bands])
    }

    /// Builds a cube from `f(row, col, band)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        bands: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut samples = Vec::with_capacity(height * width * bands);
        for r in 0..height {
            for c in 0..width {
                for b in 0..bands {
                    samples.push(f(r, c, b));
                }
            }
        }
        Self::new(height, width, bands, samples)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.bands)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    #[inline]
    pub fn index_of(&self, coord: PixelCoord) -> usize {
        coord.row * self.width + coord.col
    }

    #[inline]
    pub fn coord_of(&self, index: usize) -> PixelCoord {
        PixelCoord::new(index / self.width, index % self.width)
    }

    pub fn contains(&self, coord: PixelCoord) -> bool {
        coord.row < self.height && coord.col < self.width
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, band: usize) -> f64 {
        self.samples[(row * self.width + col) * self.bands + band]
    }

    /// Spectral vector of the pixel with linear index `index`.
    #[inline]
    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.samples[index * self.bands..(index + 1) * self.bands]
    }

    pub fn pixel_at(&self, coord: PixelCoord) -> &[f64] {
        self.pixel(self.index_of(coord))
    }

    /// Copy of one band in row-major order.
    pub fn band(&self, band: usize) -> Vec<f64> {
        self.samples
            .iter()
            .skip(band)
            .step_by(self.bands)
            .copied()
            .collect()
    }

    /// Single-band cube holding band `band`.
    pub fn band_cube(&self, band: usize) -> SpectralCube {
        SpectralCube {
            height: self.height,
            width: self.width,
            bands: 1,
            samples: self.band(band),
        }
    }

    /// Stacks single-band cubes of identical spatial size into one cube.
    pub fn stack_bands(bands: &[SpectralCube]) -> Result<Self> {
        let first = bands
            .first()
            .ok_or_else(|| Error::InvalidParameter("no bands to stack".into()))?;
        let (h, l) = (first.height, first.width);
        for (i, b) in bands.iter().enumerate() {
            if b.height != h || b.width != l || b.bands != 1 {
                return Err(Error::DimensionMismatch(format!(
                    "band {i} is {}x{}x{}, expected {h}x{l}x1",
                    b.height, b.width, b.bands
                )));
            }
        }
        let p = bands.len();
        let mut samples = vec![0.0; h * l * p];
        for (i, b) in bands.iter().enumerate() {
            for (px, v) in b.samples.iter().enumerate() {
                samples[px * p + i] = *v;
            }
        }
        Self::new(h, l, p, samples)
    }

    /// Replaces the sample buffer; used by filters that produce output of the
    /// same shape.
    pub fn with_samples(&self, samples: Vec<f64>) -> Result<Self> {
        Self::new(self.height, self.width, self.bands, samples)
    }

    pub fn band_max(&self, band: usize) -> f64 {
        self.samples
            .iter()
            .skip(band)
            .step_by(self.bands)
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn max_value(&self) -> f64 {
        self.samples.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    pub fn min_value(&self) -> f64 {
        self.samples.iter().fold(f64::INFINITY, |m, &v| m.min(v))
    }

    pub fn same_shape(&self, other: &SpectralCube) -> bool {
        self.shape() == other.shape()
    }

    /// Encodes the cube as an MSC1 byte buffer.
    pub fn to_msc1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(MSC1_HEADER_LEN + self.samples.len() * 8);
        out.extend_from_slice(MSC1_MAGIC);
        for dim in [self.height, self.width, self.bands] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_msc1_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MSC1_HEADER_LEN {
            if bytes.len() >= 4 && &bytes[..4] != MSC1_MAGIC {
                return Err(Error::BadMagic {
                    found: bytes[..4].try_into().unwrap(),
                });
            }
            return Err(Error::Truncated {
                expected: MSC1_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if &magic != MSC1_MAGIC {
            return Err(Error::BadMagic { found: magic });
        }
        let dim = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
        let (height, width, bands) = (dim(4), dim(8), dim(12));
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::ZeroDimension {
                height,
                width,
                bands,
            });
        }
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(bands))
            .ok_or_else(|| Error::MalformedHeader("cube dimensions overflow".into()))?;
        let expected = count
            .checked_mul(8)
            .and_then(|n| n.checked_add(MSC1_HEADER_LEN))
            .ok_or_else(|| Error::MalformedHeader("cube dimensions overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                actual: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::TrailingBytes {
                extra: bytes.len() - expected,
            });
        }
        let samples: Vec<f64> = bytes[MSC1_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(height, width, bands, samples)
    }
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    SpectralCube::from_msc1_bytes(&bytes)
}

pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&cube.to_msc1_bytes())
        .map_err(|e| Error::io(path, e))
}
