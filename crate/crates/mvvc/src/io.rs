//! PGM and PFM raster files.
//!
//! PGM (P5) carries 8-bit or 16-bit grayscale, normalized to `[0, 1]` on
//! load; 16-bit samples are big-endian per the Netpbm convention. PFM
//! (grayscale `Pf`) carries 32-bit floats, little-endian (negative scale
//! header), scanlines stored bottom-up.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::raster::{Grid2, Image};

#[derive(Debug, Error)]
pub enum RasterIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: bad {format} header: {reason}")]
    BadHeader { path: String, format: &'static str, reason: String },
    #[error("{path}: truncated pixel data")]
    Truncated { path: String },
}

fn io_err(path: &Path, source: io::Error) -> RasterIoError {
    RasterIoError::Io { path: path.display().to_string(), source }
}

fn header_err(path: &Path, format: &'static str, reason: impl Into<String>) -> RasterIoError {
    RasterIoError::BadHeader { path: path.display().to_string(), format, reason: reason.into() }
}

/// Pull whitespace-separated header tokens, skipping `#` comments.
fn parse_header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count && i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if tokens.len() < count {
        return None;
    }
    // One whitespace byte terminates the header before binary data.
    Some((tokens, i + 1))
}

/// Write a grayscale image as binary PGM. `maxval` must be 255 or 65535.
pub fn write_pgm(path: &Path, img: &Image, maxval: u16) -> Result<(), RasterIoError> {
    assert!(maxval == 255 || maxval == 65535, "maxval must be 255 or 65535");
    let mut out = Vec::with_capacity(img.len() * 2 + 32);
    write!(out, "P5\n{} {}\n{}\n", img.width(), img.height(), maxval).unwrap();
    for &v in img.data() {
        let q = (v.clamp(0.0, 1.0) * maxval as f64).round() as u32;
        let q = q.min(maxval as u32);
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&(q as u16).to_be_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Load a binary PGM, normalizing values to `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Image, RasterIoError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"P5") {
        return Err(header_err(path, "PGM", "missing P5 magic"));
    }
    let (tokens, data_start) = parse_header_tokens(&bytes, 4)
        .ok_or_else(|| header_err(path, "PGM", "incomplete header"))?;
    let width: usize =
        tokens[1].parse().map_err(|_| header_err(path, "PGM", "bad width"))?;
    let height: usize =
        tokens[2].parse().map_err(|_| header_err(path, "PGM", "bad height"))?;
    let maxval: u32 = tokens[3].parse().map_err(|_| header_err(path, "PGM", "bad maxval"))?;
    if maxval == 0 || maxval > 65535 {
        return Err(header_err(path, "PGM", format!("unsupported maxval {maxval}")));
    }
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per;
    let data = &bytes[data_start..];
    if data.len() < need {
        return Err(RasterIoError::Truncated { path: path.display().to_string() });
    }
    let scale = 1.0 / maxval as f64;
    let mut pixels = Vec::with_capacity(width * height);
    if bytes_per == 1 {
        pixels.extend(data[..need].iter().map(|&b| b as f64 * scale));
    } else {
        for chunk in data[..need].chunks_exact(2) {
            pixels.push(u16::from_be_bytes([chunk[0], chunk[1]]) as f64 * scale);
        }
    }
    Ok(Grid2::from_vec(width, height, pixels))
}

/// Write a scalar raster as grayscale PFM (little-endian, bottom-up rows).
pub fn write_pfm(path: &Path, grid: &Grid2<f64>) -> Result<(), RasterIoError> {
    let mut out = Vec::with_capacity(grid.len() * 4 + 32);
    write!(out, "Pf\n{} {}\n-1.0\n", grid.width(), grid.height()).unwrap();
    for y in (0..grid.height()).rev() {
        for x in 0..grid.width() {
            out.extend_from_slice(&(*grid.get(x, y) as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Load a grayscale PFM into an `f64` grid.
pub fn read_pfm(path: &Path) -> Result<Grid2<f64>, RasterIoError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| io_err(path, e))?;
    if !bytes.starts_with(b"Pf") {
        return Err(header_err(path, "PFM", "missing Pf magic (only grayscale supported)"));
    }
    let (tokens, data_start) = parse_header_tokens(&bytes, 4)
        .ok_or_else(|| header_err(path, "PFM", "incomplete header"))?;
    let width: usize =
        tokens[1].parse().map_err(|_| header_err(path, "PFM", "bad width"))?;
    let height: usize =
        tokens[2].parse().map_err(|_| header_err(path, "PFM", "bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| header_err(path, "PFM", "bad scale"))?;
    let little_endian = scale < 0.0;
    let need = width * height * 4;
    let data = &bytes[data_start..];
    if data.len() < need {
        return Err(RasterIoError::Truncated { path: path.display().to_string() });
    }
    let mut values = vec![0.0f64; width * height];
    for (i, chunk) in data[..need].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        // PFM rows are bottom-up.
        let y = height - 1 - i / width;
        let x = i % width;
        values[y * width + x] = v as f64;
    }
    Ok(Grid2::from_vec(width, height, values))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().expect("tempdir")
    }

    #[test]
    fn pgm_16bit_roundtrip() {
        let dir = tmpdir();
        let p = dir.path().join("a.pgm");
        let img = Grid2::from_vec(3, 2, vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.1]);
        write_pgm(&p, &img, 65535).unwrap();
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.width(), 3);
        assert_eq!(back.height(), 2);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 65535.0, "{a} vs {b}");
        }
    }

    #[test]
    fn pgm_8bit_roundtrip() {
        let dir = tmpdir();
        let p = dir.path().join("b.pgm");
        let img = Grid2::from_vec(2, 2, vec![0.0, 1.0, 0.5, 0.2]);
        write_pgm(&p, &img, 255).unwrap();
        let back = read_pgm(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1.0 / 255.0);
        }
    }

    #[test]
    fn pfm_roundtrip_exact_f32() {
        let dir = tmpdir();
        let p = dir.path().join("c.pfm");
        let grid = Grid2::from_vec(2, 3, vec![-1.5, 0.0, 3.25, f64::NAN, 1e6, -0.125]);
        write_pfm(&p, &grid).unwrap();
        let back = read_pfm(&p).unwrap();
        assert_eq!(back.width(), 2);
        assert_eq!(back.height(), 3);
        for (a, b) in grid.data().iter().zip(back.data()) {
            if a.is_nan() {
                assert!(b.is_nan());
            } else {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }

    #[test]
    fn pgm_rejects_garbage() {
        let dir = tmpdir();
        let p = dir.path().join("bad.pgm");
        fs::write(&p, b"P6\n1 1\n255\nx").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
