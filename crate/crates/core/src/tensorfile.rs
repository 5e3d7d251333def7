//! Bit-exact binary tensor files.
//!
//! ```text
//! 0..4    magic "DMF2"
//! u32 LE  version (1)
//! u32 LE  precision (0 = f32, 1 = f64)
//! u32 LE  rank (<= 4)
//! u64 LE  extent, rank times
//! payload row-major little-endian values
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"DMF2";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub precision: Precision,
    pub shape: Vec<usize>,
}

impl Header {
    pub fn payload_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.precision.byte_width()
    }
}

/// Tensor of either precision, as found on disk.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        match self {
            AnyTensor::F32(t) => t.clone(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode<F: Scalar>(t: &Tensor<F>) -> Result<Vec<u8>> {
    if t.rank() > MAX_RANK {
        return Err(Error::Shape(format!("rank {} exceeds {MAX_RANK}", t.rank())));
    }
    let mut out = Vec::with_capacity(16 + 8 * t.rank() + t.len() * F::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&F::PRECISION.code().to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the header; returns it with the payload offset.
pub fn decode_header(bytes: &[u8], path: &Path) -> Result<(Header, usize)> {
    if bytes.len() < 16 {
        return Err(format_err(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(path, format!("bad magic {:?}", String::from_utf8_lossy(&bytes[..4]))));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let precision = Precision::from_code(u32_at(bytes, 8))
        .ok_or_else(|| format_err(path, format!("unknown precision code {}", u32_at(bytes, 8))))?;
    let rank = u32_at(bytes, 12) as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(format_err(path, format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let off = 16 + 8 * rank;
    if bytes.len() < off {
        return Err(format_err(path, "truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let e = u64::from_le_bytes(bytes[16 + 8 * i..24 + 8 * i].try_into().expect("8 bytes"));
        if e == 0 {
            return Err(format_err(path, format!("zero extent on axis {i}")));
        }
        shape.push(usize::try_from(e).map_err(|_| format_err(path, "extent overflows usize"))?);
    }
    Ok((Header { precision, shape }, off))
}

fn decode_payload<F: Scalar>(header: &Header, payload: &[u8], path: &Path) -> Result<Tensor<F>> {
    let want = header.payload_len();
    if payload.len() < want {
        return Err(format_err(path, format!("truncated payload: {} of {want} bytes", payload.len())));
    }
    if payload.len() > want {
        return Err(format_err(path, format!("{} trailing bytes after payload", payload.len() - want)));
    }
    let w = F::PRECISION.byte_width();
    let data = payload.chunks_exact(w).map(F::read_le).collect();
    Tensor::new(&header.shape, data).map_err(|e| format_err(path, e.to_string()))
}

pub fn decode_any(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let (h, off) = decode_header(bytes, path)?;
    Ok(match h.precision {
        Precision::F32 => AnyTensor::F32(decode_payload(&h, &bytes[off..], path)?),
        Precision::F64 => AnyTensor::F64(decode_payload(&h, &bytes[off..], path)?),
    })
}

pub fn write_tensor<F: Scalar>(path: impl AsRef<Path>, t: &Tensor<F>) -> Result<()> {
    fs::write(path, encode(t)?)?;
    Ok(())
}

pub fn read_any(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    decode_any(&fs::read(path)?, path)
}

/// Reads a tensor stored at precision `F`; other precisions are an error.
pub fn read_tensor<F: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<F>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let (h, off) = decode_header(&bytes, path)?;
    if h.precision != F::PRECISION {
        return Err(format_err(path, format!("stored as {:?}, requested {:?}", h.precision, F::PRECISION)));
    }
    decode_payload(&h, &bytes[off..], path)
}

/// Reads only the header.
pub fn read_header(path: impl AsRef<Path>) -> Result<Header> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path)?;
    let mut buf = vec![0u8; 16 + 8 * MAX_RANK];
    let mut n = 0;
    while n < buf.len() {
        let k = f.read(&mut buf[n..])?;
        if k == 0 {
            break;
        }
        n += k;
    }
    Ok(decode_header(&buf[..n], path)?.0)
}
