//! Binary PGM (P5) band import and export.

use std::fs;
use std::path::Path;

use crate::cube::SpectralCube;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub pixels: Vec<u16>,
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::MalformedHeader("unexpected end of PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| Error::MalformedHeader(format!("invalid PGM {what}")))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P5" {
        return Err(Error::UnsupportedFormat(format!(
            "expected binary PGM (P5), found {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let width = header_number(bytes, &mut pos, "width")?;
    let height = header_number(bytes, &mut pos, "height")?;
    let maxval = header_number(bytes, &mut pos, "maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::UnsupportedFormat(format!("PGM maxval {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension {
            height,
            width,
            bands: 1,
        });
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let wide = maxval > 255;
    let count = width * height;
    let needed = count * if wide { 2 } else { 1 };
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() < needed {
        return Err(Error::Truncated {
            expected: pos + needed,
            actual: bytes.len(),
        });
    }
    let pixels = if wide {
        raster[..needed]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        raster[..needed].iter().map(|&v| v as u16).collect()
    };
    Ok(GrayImage {
        width,
        height,
        maxval: maxval as u16,
        pixels,
    })
}

pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width, img.height, img.maxval).into_bytes();
    if img.maxval > 255 {
        for v in &img.pixels {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(img.pixels.iter().map(|&v| v as u8));
    }
    out
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

pub fn write_pgm(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Builds a cube with one band per file, in the given order. Raw integer
/// values are kept: 8-bit files land in [0, 255], 16-bit in [0, 65535].
pub fn import_band_stack<P: AsRef<Path>>(paths: &[P]) -> Result<SpectralCube> {
    if paths.is_empty() {
        return Err(Error::InvalidParameter("empty band list".into()));
    }
    let images = paths.iter().map(read_pgm).collect::<Result<Vec<_>>>()?;
    let (h, l) = (images[0].height, images[0].width);
    for (i, img) in images.iter().enumerate() {
        if img.height != h || img.width != l {
            return Err(Error::DimensionMismatch(format!(
                "band file {} is {}x{}, first file is {h}x{l}",
                paths[i].as_ref().display(),
                img.height,
                img.width
            )));
        }
    }
    let p = images.len();
    let mut samples = vec![0.0; h * l * p];
    for (b, img) in images.iter().enumerate() {
        for (px, &v) in img.pixels.iter().enumerate() {
            samples[px * p + b] = v as f64;
        }
    }
    SpectralCube::new(h, l, p, samples)
}

/// Quantizes one band for PGM output: values are rounded and clamped to
/// `[0, maxval]`.
pub fn band_to_gray(cube: &SpectralCube, band: usize, maxval: u16) -> GrayImage {
    let pixels = cube
        .band(band)
        .into_iter()
        .map(|v| v.round().clamp(0.0, maxval as f64) as u16)
        .collect();
    GrayImage {
        width: cube.width(),
        height: cube.height(),
        maxval,
        pixels,
    }
}
