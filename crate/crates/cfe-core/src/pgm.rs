//! Binary PGM (P5, maxval 255) encoding and decoding.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(width: usize, height: usize, bytes: &[u8]) -> Vec<u8> {
    assert_eq!(bytes.len(), width * height, "pixel count mismatch");
    let mut out = Vec::with_capacity(bytes.len() + 32);
    let _ = write!(out, "P5\n{width} {height}\n255\n");
    out.extend_from_slice(bytes);
    out
}

pub fn write_file(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, encode(width, height, bytes))?;
    Ok(())
}

pub fn decode(data: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let bad = |msg: &str| Error::Input(format!("not a P5 PGM: {msg}"));
    if data.len() < 2 || &data[..2] != b"P5" {
        return Err(bad("missing magic"));
    }
    // header: magic, width, height, maxval as whitespace-separated tokens
    // (comments are not produced by this crate and are rejected)
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        while pos < data.len() && data[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&data[start..pos]).map_err(|_| bad("header"))?;
        *field = text.parse().map_err(|_| bad("header value"))?;
    }
    if fields[2] != 255 {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates header and raster
    pos += 1;
    let (w, h) = (fields[0], fields[1]);
    let need = w * h;
    if data.len() < pos + need {
        return Err(bad("raster shorter than header promises"));
    }
    Ok((w, h, data[pos..pos + need].to_vec()))
}

pub fn read_file(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode(&std::fs::read(path)?)
}

pub fn bytes_to_f64(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

pub fn f64_to_bytes(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Min-max scaling of arbitrary nonnegative data to the 0-255 range;
/// degenerate (constant) inputs map to 0.
pub fn scale_to_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let bytes: Vec<u8> = (0..12).map(|v| (v * 20) as u8).collect();
        let enc = encode(4, 3, &bytes);
        assert!(enc.starts_with(b"P5\n4 3\n255\n"));
        let (w, h, back) = decode(&enc).unwrap();
        assert_eq!((w, h), (4, 3));
        assert_eq!(back, bytes);
    }

    #[test]
    fn scale_handles_degenerate_input() {
        assert_eq!(scale_to_bytes(&[0.7, 0.7]), vec![0, 0]);
        let s = scale_to_bytes(&[0.0, 0.5, 1.0]);
        assert_eq!(s, vec![0, 128, 255]);
    }

    #[test]
    fn rejects_non_pgm() {
        assert!(decode(b"P6\n1 1\n255\nx").is_err());
        assert!(decode(b"P5\n4 4\n255\nab").is_err());
    }
}
