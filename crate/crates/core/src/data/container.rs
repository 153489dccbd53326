//! Binary tensor container, bit-exact across machines.
//!
//! Layout (little-endian):
//! ```text
//! offset 0   magic "CYB1"          4 bytes
//! offset 4   version = 1           u16
//! offset 6   dtype   = 1 (f64)     u8
//! offset 7   ndim                  u8
//! offset 8   dims                  ndim × u64
//! then       payload, row-major    product(dims) × f64
//! ```

use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"CYB1";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;
const MAX_NDIM: u8 = 8;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic at byte 0: expected \"CYB1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported version {found} at byte 4 (expected {VERSION})")]
    BadVersion { found: u16 },
    #[error("unsupported dtype {found} at byte 6 (expected {DTYPE_F64} = f64)")]
    BadDtype { found: u8 },
    #[error("ndim {found} at byte 7 exceeds the supported maximum {MAX_NDIM}")]
    BadNdim { found: u8 },
    #[error("zero-sized dimension in dims {dims:?} (header ending at byte {offset})")]
    ZeroDim { dims: Vec<u64>, offset: usize },
    #[error("dims {dims:?} overflow the addressable payload size")]
    DimsOverflow { dims: Vec<u64> },
    #[error(
        "truncated at byte {offset}: needed {needed} more bytes ({context}), file has {available}"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
        context: &'static str,
    },
    #[error("{extra} trailing bytes after payload (payload ends at byte {offset})")]
    TrailingBytes { offset: usize, extra: usize },
}

pub fn write_container(t: &Tensor, path: &Path) -> Result<(), ContainerError> {
    let io_err = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf =
        Vec::with_capacity(8 + t.shape.len() * 8 + t.data.len() * 8);
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(t.shape.len() as u8);
    for &d in &t.shape {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Tensor, ContainerError> {
    let bytes = std::fs::read(path).map_err(|source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_container(&bytes)
}

/// Parses container bytes; every failure names the byte offset it hit.
pub fn parse_container(bytes: &[u8]) -> Result<Tensor, ContainerError> {
    let need = |offset: usize, n: usize, context: &'static str| {
        if bytes.len() < offset + n {
            Err(ContainerError::Truncated {
                offset: bytes.len(),
                needed: offset + n - bytes.len(),
                available: bytes.len(),
                context,
            })
        } else {
            Ok(())
        }
    };

    need(0, 4, "magic")?;
    if bytes[0..4] != MAGIC {
        return Err(ContainerError::BadMagic {
            found: bytes[0..4].to_vec(),
        });
    }
    need(4, 2, "version")?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ContainerError::BadVersion { found: version });
    }
    need(6, 1, "dtype")?;
    if bytes[6] != DTYPE_F64 {
        return Err(ContainerError::BadDtype { found: bytes[6] });
    }
    need(7, 1, "ndim")?;
    let ndim = bytes[7];
    if ndim > MAX_NDIM {
        return Err(ContainerError::BadNdim { found: ndim });
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut off = 8usize;
    for _ in 0..ndim {
        need(off, 8, "dimension size")?;
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[off..off + 8]);
        dims.push(u64::from_le_bytes(b));
        off += 8;
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(ContainerError::ZeroDim {
            dims,
            offset: off,
        });
    }
    let numel = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(8).is_some() && n <= usize::MAX as u64)
        .ok_or_else(|| ContainerError::DimsOverflow { dims: dims.clone() })?;
    let payload = numel as usize * 8;
    need(off, payload, "payload")?;
    let mut data = Vec::with_capacity(numel as usize);
    for i in 0..numel as usize {
        let s = off + i * 8;
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[s..s + 8]);
        data.push(f64::from_le_bytes(b));
    }
    off += payload;
    if off != bytes.len() {
        return Err(ContainerError::TrailingBytes {
            offset: off,
            extra: bytes.len() - off,
        });
    }
    let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
    Ok(Tensor::new(shape, data).expect("dims validated above"))
}
