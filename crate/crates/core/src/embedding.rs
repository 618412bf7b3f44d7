//! Keyed embedding matrices and the cosine score used by every stage.
//!
//! Vectors are stored as `f32`; dot products and norms accumulate in `f64`.
//!
//! On disk a matrix is a little-endian binary file:
//!
//! ```text
//! b"SAPEMB01" | u32 dim | u64 count | count x (u32 key_len, key bytes, dim x f32)
//! ```

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"SAPEMB01";

/// Vectors whose L2 norm is already this close to 1 are left as-is by
/// [`EmbeddingMatrix::normalize`], so normalization is exactly idempotent.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("zero vector for key {0}")]
    ZeroVector(String),
    #[error("non-finite component in vector for key {0}")]
    NonFinite(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected SAPEMB01")]
    BadMagic,
    #[error("truncated header")]
    TruncatedHeader,
    #[error("truncated: header declares {expected} records, only {found} present")]
    Truncated { expected: u64, found: u64 },
    #[error("{0} trailing bytes after the last declared record")]
    TrailingData(usize),
    #[error("record {0}: key is not valid UTF-8")]
    InvalidKey(u64),
}

/// Cosine similarity `a.b / (|a| |b|)`, clamped to `[-1, 1]`.
pub fn cosine_similarity<T: Copy + Into<f64>>(a: &[T], b: &[T]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.into(), y.into());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(EmbeddingError::ZeroNorm);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// An ordered list of `(key, vector)` rows sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    keys: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize) -> Result<Self, EmbeddingError> {
        if dim == 0 {
            return Err(EmbeddingError::ZeroDim);
        }
        Ok(Self {
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn push(&mut self, key: impl Into<String>, vector: &[f32]) -> Result<(), EmbeddingError> {
        let key = key.into();
        if vector.len() != self.dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: self.dim,
                found: vector.len(),
            });
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite(key));
        }
        if self.index.contains_key(&key) {
            return Err(EmbeddingError::DuplicateKey(key));
        }
        self.index.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.data.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index.get(key).map(|&i| self.row(i))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> + '_ {
        self.keys
            .iter()
            .enumerate()
            .map(move |(i, k)| (k.as_str(), self.row(i)))
    }

    /// Scales every row to unit L2 norm. Keys and order are preserved.
    pub fn normalize(&self) -> Result<Self, EmbeddingError> {
        let mut out = self.clone();
        for (i, key) in self.keys.iter().enumerate() {
            let norm = l2_norm(self.row(i));
            if norm == 0.0 {
                return Err(EmbeddingError::ZeroVector(key.clone()));
            }
            if (norm - 1.0).abs() <= UNIT_NORM_TOLERANCE {
                continue;
            }
            for x in &mut out.data[i * self.dim..(i + 1) * self.dim] {
                *x = (f64::from(*x) / norm) as f32;
            }
        }
        Ok(out)
    }

    /// True when every row is within [`UNIT_NORM_TOLERANCE`] of unit norm.
    pub fn is_normalized(&self) -> bool {
        (0..self.len()).all(|i| (l2_norm(self.row(i)) - 1.0).abs() <= UNIT_NORM_TOLERANCE)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.data.len() * 4 + self.keys.len() * 16);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        for (key, row) in self.iter() {
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            for x in row {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, EmbeddingError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8) != Some(MAGIC.as_slice()) {
            return Err(EmbeddingError::BadMagic);
        }
        let dim = cur.u32().ok_or(EmbeddingError::TruncatedHeader)? as usize;
        let count = cur.u64().ok_or(EmbeddingError::TruncatedHeader)?;
        let mut m = Self::new(dim)?;
        let mut row = vec![0f32; dim];
        for n in 0..count {
            let truncated = EmbeddingError::Truncated {
                expected: count,
                found: n,
            };
            let key_len = match cur.u32() {
                Some(len) => len as usize,
                None => return Err(truncated),
            };
            let key = match cur.take(key_len) {
                Some(k) => std::str::from_utf8(k).map_err(|_| EmbeddingError::InvalidKey(n))?,
                None => return Err(truncated),
            };
            let Some(raw) = cur.take(dim * 4) else {
                return Err(truncated);
            };
            for (x, chunk) in row.iter_mut().zip(raw.chunks_exact(4)) {
                *x = f32::from_le_bytes(chunk.try_into().unwrap());
            }
            m.push(key, &row)?;
        }
        let rest = bytes.len() - cur.pos;
        if rest != 0 {
            return Err(EmbeddingError::TrailingData(rest));
        }
        Ok(m)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn save_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<(), EmbeddingError> {
    let path = path.as_ref();
    let io_err = |source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&m.to_bytes()).map_err(io_err)?;
    f.flush().map_err(io_err)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix, EmbeddingError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| EmbeddingError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    EmbeddingMatrix::from_bytes(&bytes)
}
