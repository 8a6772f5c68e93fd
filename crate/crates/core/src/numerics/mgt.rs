//! `.mgt` binary tensor files.
//!
//! Layout: magic `MGT1`, `u8` dtype code (1 = f32, 2 = f64), `u8` rank, two
//! zero bytes padding the header to 8 bytes, `rank` little-endian `u64`
//! extents, then the row-major little-endian payload.

use std::fs;
use std::path::Path;

use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MGT1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 8 * t.rank() + T::BYTES * t.len());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE_CODE);
    out.push(t.rank() as u8);
    out.extend_from_slice(&[0, 0]);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Dtype code and shape from a header, without decoding the payload.
pub fn peek_header(bytes: &[u8]) -> std::result::Result<(u8, Vec<usize>), String> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err("missing MGT1 magic".into());
    }
    let dtype = bytes[4];
    let rank = bytes[5] as usize;
    if rank == 0 {
        return Err("rank 0 tensor".into());
    }
    let need = 8 + 8 * rank;
    if bytes.len() < need {
        return Err("truncated header".into());
    }
    let shape = (0..rank)
        .map(|a| u64::from_le_bytes(bytes[8 + 8 * a..16 + 8 * a].try_into().expect("8")) as usize)
        .collect();
    Ok((dtype, shape))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let (dtype, shape) = peek_header(bytes)?;
    if dtype != T::DTYPE_CODE {
        return Err(format!("dtype code {dtype}, expected {} ({})", T::DTYPE_CODE, T::NAME));
    }
    let start = 8 + 8 * shape.len();
    let n: usize = shape.iter().product();
    if bytes.len() != start + n * T::BYTES {
        return Err(format!(
            "payload is {} bytes, shape needs {}",
            bytes.len() - start,
            n * T::BYTES
        ));
    }
    let data = bytes[start..].chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(&shape, data).map_err(|e| e.to_string())
}

pub fn write<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|d| Error::format(path, d))
}
