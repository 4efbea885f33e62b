//! Binary portable graymap (P5) output.

use std::path::Path;

use crate::error::{invalid, io_err, DcnError, Result};

/// Min-max scales `grid` to `0..=255`. A constant grid maps to mid-gray.
pub fn scale_to_bytes(grid: &[f64]) -> Vec<u8> {
    let min = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    grid.iter()
        .map(|&v| {
            if range > 0.0 {
                ((v - min) / range * 255.0).round() as u8
            } else {
                128
            }
        })
        .collect()
}

pub fn encode_pgm(grid: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if grid.len() != width * height {
        return Err(invalid(format!(
            "grid of {} values is not {}x{}",
            grid.len(),
            width,
            height
        )));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(invalid("cannot encode a non-finite grid"));
    }
    let mut out = format!("P5\n{} {}\n255\n", width, height).into_bytes();
    out.extend(scale_to_bytes(grid));
    Ok(out)
}

pub fn write_pgm(path: &Path, grid: &[f64], width: usize, height: usize) -> Result<()> {
    let bytes = encode_pgm(grid, width, height)?;
    std::fs::write(path, bytes).map_err(io_err(path))
}

/// A decoded graymap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Parses a P5 file with an 8-bit maxval.
pub fn decode_pgm(bytes: &[u8]) -> Result<Graymap> {
    let bad = |m: &str| DcnError::Format(format!("pgm: {}", m));
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a P5 file"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    let pixels = bytes
        .get(pos + 1..pos + 1 + width * height)
        .ok_or_else(|| bad("truncated payload"))?
        .to_vec();
    Ok(Graymap {
        width,
        height,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Graymap> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_pgm(&bytes)
}

/// Nearest-neighbour upscaling of a row-major grid by an integer factor.
pub fn upscale_nearest(grid: &[f64], width: usize, height: usize, factor: usize) -> Vec<f64> {
    let (w2, h2) = (width * factor, height * factor);
    let mut out = Vec::with_capacity(w2 * h2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.push(grid[(y / factor) * width + x / factor]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_grid_is_mid_gray() {
        let bytes = encode_pgm(&[3.5; 6], 3, 2).unwrap();
        let g = decode_pgm(&bytes).unwrap();
        assert_eq!(g.pixels, vec![128; 6]);
    }

    #[test]
    fn checkerboard_payload() {
        let bytes = encode_pgm(&[0.0, 1.0, 1.0, 0.0], 2, 2).unwrap();
        assert_eq!(&bytes[..11], b"P5\n2 2\n255\n");
        assert_eq!(&bytes[11..], &[0, 255, 255, 0]);
    }

    #[test]
    fn round_trip_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.pgm");
        let grid: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        write_pgm(&path, &grid, 4, 3).unwrap();
        let g = read_pgm(&path).unwrap();
        assert_eq!((g.width, g.height), (4, 3));
        assert_eq!(g.pixels, scale_to_bytes(&grid));
        assert!(write_pgm(&dir.path().join("no/such/dir.pgm"), &grid, 4, 3).is_err());
        assert!(encode_pgm(&[f64::NAN], 1, 1).is_err());
    }

    #[test]
    fn upscale_repeats_pixels() {
        let up = upscale_nearest(&[1.0, 2.0], 2, 1, 2);
        assert_eq!(up, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
