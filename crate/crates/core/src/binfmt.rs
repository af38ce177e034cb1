//! Flat little-endian binary tensors: a `u32` header of dimensions followed by
//! the row-major `f32` payload.

use std::path::Path;

use crate::error::{Error, Result};

pub fn encode(dims: &[u32], values: &[f64]) -> Result<Vec<u8>> {
    let expected: u64 = dims.iter().map(|&d| d as u64).product();
    if expected != values.len() as u64 {
        return Err(Error::Dimension(format!(
            "header {dims:?} describes {expected} values, got {}",
            values.len()
        )));
    }
    let mut out = Vec::with_capacity(4 * (dims.len() + values.len()));
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in values {
        if !v.is_finite() {
            return Err(Error::NonFinite("tensor payload".into()));
        }
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses a payload with `rank` header dimensions.
pub fn decode(bytes: &[u8], rank: usize, what: &str) -> Result<(Vec<usize>, Vec<f64>)> {
    let header = 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format(format!("{what}: truncated header")));
    }
    let dims: Vec<usize> = bytes[..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    if body.len() != 4 * count {
        return Err(Error::Format(format!(
            "{what}: header {dims:?} needs {} payload bytes, found {}",
            4 * count,
            body.len()
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((dims, values))
}

pub fn write(path: &Path, dims: &[u32], values: &[f64]) -> Result<()> {
    let bytes = encode(dims, values)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path, rank: usize) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, rank, &path.display().to_string())
}

pub fn dim_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Dimension(format!("{n} does not fit a u32 header")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_truncation() {
        let bytes = encode(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        let (dims, v) = decode(&bytes, 2, "t").unwrap();
        assert_eq!(dims, vec![2, 3]);
        assert_eq!(v[5], 6.5);
        assert!(decode(&bytes[..bytes.len() - 1], 2, "t").is_err());
        assert!(encode(&[2], &[1.0]).is_err());
    }
}
