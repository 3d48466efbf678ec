//! MAT1 tensor files: `MAT1`, u8 dtype (0 = f32, 1 = f64), u8 rank, rank
//! little-endian u32 dims, then the little-endian payload.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"MAT1";

#[derive(Debug, Error)]
pub enum Mat1Error {
    #[error("bad magic at byte 0: expected \"MAT1\", found {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("unknown dtype code {code} at byte 4")]
    UnknownDType { code: u8 },
    #[error("truncated {section} at byte {offset}: need {expected} bytes, file has {actual}")]
    Truncated {
        section: &'static str,
        offset: usize,
        expected: usize,
        actual: usize,
    },
    #[error("{extra} trailing bytes after payload at byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("dimension {dim} does not fit a u32")]
    DimTooLarge { dim: usize },
    #[error("rank {0} exceeds 255")]
    RankTooLarge(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Serializes with the tensor's own dtype; f32 tensors hold f32-exact
/// values so the cast is lossless.
pub fn to_bytes(t: &Tensor) -> Result<Vec<u8>, Mat1Error> {
    if t.rank() > 255 {
        return Err(Mat1Error::RankTooLarge(t.rank()));
    }
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + t.numel() * t.dtype().size_bytes());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Mat1Error::DimTooLarge { dim: d })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn take<'a>(
    bytes: &'a [u8],
    offset: usize,
    len: usize,
    section: &'static str,
) -> Result<&'a [u8], Mat1Error> {
    bytes.get(offset..offset + len).ok_or(Mat1Error::Truncated {
        section,
        offset,
        expected: offset + len,
        actual: bytes.len(),
    })
}

pub fn from_bytes(bytes: &[u8]) -> Result<Tensor, Mat1Error> {
    let magic = take(bytes, 0, 4, "magic").map_err(|_| Mat1Error::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(Mat1Error::BadMagic {
            found: magic.to_vec(),
        });
    }
    let head = take(bytes, 4, 2, "header")?;
    let dtype = DType::from_code(head[0]).ok_or(Mat1Error::UnknownDType { code: head[0] })?;
    let rank = head[1] as usize;
    let dims = take(bytes, 6, 4 * rank, "dims")?;
    let shape: Vec<usize> = dims
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let start = 6 + 4 * rank;
    let width = dtype.size_bytes();
    let payload = take(bytes, start, n * width, "payload")?;
    let end = start + n * width;
    if bytes.len() > end {
        return Err(Mat1Error::TrailingBytes {
            offset: end,
            extra: bytes.len() - end,
        });
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::from_vec(shape, data).expect("length follows from shape");
    Ok(t.with_dtype(dtype))
}

pub fn save_mat1(path: impl AsRef<Path>, t: &Tensor) -> Result<(), Mat1Error> {
    let path = path.as_ref();
    fs::write(path, to_bytes(t)?).map_err(|source| Mat1Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_mat1(path: impl AsRef<Path>) -> Result<Tensor, Mat1Error> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Mat1Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
