//! `MUSEQKV1` files: an 8-byte magic, six little-endian `u32` header fields
//! (version, dtype code, batch, heads, n, d), then Q, K and V as contiguous
//! row-major little-endian scalars. No padding, no checksum.

use std::path::Path;

use crate::error::{MuseError, Result};
use crate::numerics::{DType, Scalar, Shape4, Tensor4};

use super::workload::Qkv;

pub const MAGIC: &[u8; 8] = b"MUSEQKV1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 6 * 4;

/// A decoded file in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum QkvFile {
    F32(Qkv<f32>),
    F64(Qkv<f64>),
}

impl QkvFile {
    pub fn dtype(&self) -> DType {
        match self {
            QkvFile::F32(_) => DType::F32,
            QkvFile::F64(_) => DType::F64,
        }
    }
}

pub fn encode_qkv<T: Scalar>(qkv: &Qkv<T>) -> Result<Vec<u8>> {
    let shape = qkv.q.shape();
    if qkv.k.shape() != shape || qkv.v.shape() != shape {
        return Err(MuseError::shape(format!(
            "MUSEQKV1 stores equal shapes; got q {shape}, k {}, v {}",
            qkv.k.shape(),
            qkv.v.shape()
        )));
    }
    let dims = [shape.batch, shape.heads, shape.n, shape.d];
    let mut out = Vec::with_capacity(HEADER_LEN + 3 * shape.numel() * T::DTYPE.size_bytes());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&T::DTYPE.code().to_le_bytes());
    for x in dims {
        let x = u32::try_from(x).map_err(|_| MuseError::shape(format!("dimension {x} exceeds u32")))?;
        out.extend_from_slice(&x.to_le_bytes());
    }
    for t in [&qkv.q, &qkv.k, &qkv.v] {
        for &x in t.data() {
            x.write_le(&mut out);
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], field: usize) -> u32 {
    let o = 8 + 4 * field;
    u32::from_le_bytes(bytes[o..o + 4].try_into().expect("header length checked"))
}

fn decode_payload<T: Scalar>(shape: Shape4, payload: &[u8]) -> Result<Qkv<T>> {
    let size = T::DTYPE.size_bytes();
    let numel = shape.numel();
    let mut tensors = Vec::with_capacity(3);
    for part in 0..3 {
        let bytes = &payload[part * numel * size..(part + 1) * numel * size];
        let data: Vec<T> = bytes.chunks_exact(size).map(T::read_le).collect();
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(MuseError::NonFinitePayload(part * numel + i));
        }
        tensors.push(Tensor4::new(shape, data)?);
    }
    let v = tensors.pop().expect("three tensors");
    let k = tensors.pop().expect("three tensors");
    let q = tensors.pop().expect("three tensors");
    Ok(Qkv { q, k, v })
}

pub fn decode_qkv(bytes: &[u8]) -> Result<QkvFile> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(MuseError::NotQkvFile);
    }
    if bytes.len() < HEADER_LEN {
        return Err(MuseError::TruncatedPayload {
            expected: HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let version = read_u32(bytes, 0);
    if version != VERSION {
        return Err(MuseError::UnsupportedVersion(version));
    }
    let code = read_u32(bytes, 1);
    let dtype = DType::from_code(code).ok_or(MuseError::UnknownDtype(code))?;
    let dims: Vec<usize> = (2..6).map(|f| read_u32(bytes, f) as usize).collect();
    let shape = Shape4::new(dims[0], dims[1], dims[2], dims[3]);
    let expected = dims
        .iter()
        .try_fold(3u64 * dtype.size_bytes() as u64, |acc, &x| acc.checked_mul(x as u64))
        .and_then(|p| p.checked_add(HEADER_LEN as u64))
        .ok_or_else(|| MuseError::shape(format!("header dims {shape} overflow")))?;
    let actual = bytes.len() as u64;
    if actual < expected {
        return Err(MuseError::TruncatedPayload { expected, actual });
    }
    if actual > expected {
        return Err(MuseError::TrailingBytes { expected, actual });
    }
    let payload = &bytes[HEADER_LEN..];
    Ok(match dtype {
        DType::F32 => QkvFile::F32(decode_payload(shape, payload)?),
        DType::F64 => QkvFile::F64(decode_payload(shape, payload)?),
    })
}

pub fn save_qkv<T: Scalar>(path: impl AsRef<Path>, qkv: &Qkv<T>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_qkv(qkv)?;
    std::fs::write(path, bytes).map_err(|source| MuseError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_qkv_any(path: impl AsRef<Path>) -> Result<QkvFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|source| MuseError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_qkv(&bytes)
}

/// Loads a file and converts it to `T` (exact when widening).
pub fn load_qkv<T: Scalar>(path: impl AsRef<Path>) -> Result<Qkv<T>> {
    fn convert<S: Scalar, T: Scalar>(x: Qkv<S>) -> Qkv<T> {
        Qkv {
            q: x.q.cast(),
            k: x.k.cast(),
            v: x.v.cast(),
        }
    }
    Ok(match load_qkv_any(path)? {
        QkvFile::F32(x) => convert(x),
        QkvFile::F64(x) => convert(x),
    })
}
