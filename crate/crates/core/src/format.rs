//! Dense feature matrices and the `VGF1` binary container.
//!
//! A record is laid out as
//!
//! ```text
//! b"VGF1" | rows: u64 LE | dims: u64 LE | rows*dims f32 LE, row-major
//! ```
//!
//! Values are held as `f64` in memory and narrowed to `f32` on disk, so a
//! matrix that was read from disk writes back to identical bytes. A
//! container file is one or more records back to back; models that need
//! more than one matrix (PCA, the prior MLP) use containers plus a small
//! `key = value` text sidecar at `<file>.meta`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: &[u8; 4] = b"VGF1";
const HEADER_LEN: usize = 20;

/// Row-major dense matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if rows.checked_mul(dims) != Some(data.len()) {
            return Err(Error::arg(format!(
                "matrix data length {} does not match {rows}x{dims}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {i}")));
        }
        Ok(FeatureMatrix { rows, dims, data })
    }

    pub fn zeros(rows: usize, dims: usize) -> Self {
        FeatureMatrix {
            rows,
            dims,
            data: vec![0.0; rows * dims],
        }
    }

    /// Builds a matrix from equal-length rows. An empty slice gives a 0x0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dims = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * dims);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(Error::arg(format!(
                    "row {i} has length {}, expected {dims}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dims, data)
    }

    pub fn from_array(a: &ArrayView2<f64>) -> Result<Self> {
        let (rows, dims) = a.dim();
        Self::new(rows, dims, a.iter().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.rows, self.dims), &self.data).expect("shape checked at construction")
    }

    pub fn to_array(&self) -> Array2<f64> {
        self.view().to_owned()
    }

    /// Rounds every value through `f32`, i.e. what a write/read cycle yields.
    pub fn quantized(&self) -> Self {
        FeatureMatrix {
            rows: self.rows,
            dims: self.dims,
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}

/// Appends one `VGF1` record to `out`.
pub fn encode_matrix(m: &FeatureMatrix, out: &mut Vec<u8>) -> std::result::Result<(), FormatError> {
    out.reserve(HEADER_LEN + 4 * m.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.rows as u64).to_le_bytes());
    out.extend_from_slice(&(m.dims as u64).to_le_bytes());
    for (i, &v) in m.data.iter().enumerate() {
        let narrowed = v as f32;
        if !narrowed.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(())
}

/// Decodes one record from the front of `bytes`; returns it and the bytes consumed.
pub fn decode_matrix(bytes: &[u8]) -> std::result::Result<(FeatureMatrix, usize), FormatError> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        found.copy_from_slice(&bytes[..4]);
        return Err(FormatError::BadMagic(found));
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader(bytes.len()));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let dims = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let count = rows
        .checked_mul(dims)
        .filter(|&c| c.checked_mul(4).is_some())
        .ok_or(FormatError::Oversized { rows, dims })?;
    let expected = count * 4;
    let found = (bytes.len() - HEADER_LEN) as u64;
    if found < expected {
        return Err(FormatError::Truncated {
            rows,
            dims,
            expected,
            found,
        });
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + expected as usize];
    let mut data = Vec::with_capacity(count as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(FormatError::NonFinite(i));
        }
        data.push(v as f64);
    }
    let m = FeatureMatrix {
        rows: rows as usize,
        dims: dims as usize,
        data,
    };
    Ok((m, HEADER_LEN + expected as usize))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, source: FormatError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads a file holding exactly one record.
pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let (m, used) = decode_matrix(&bytes).map_err(|e| format_err(path, e))?;
    if used != bytes.len() {
        return Err(format_err(path, FormatError::TrailingBytes(bytes.len() - used)));
    }
    Ok(m)
}

pub fn write_feature_matrix(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_container(&[m], path)
}

/// Reads every record in a container file, in order.
pub fn read_container(path: impl AsRef<Path>) -> Result<Vec<FeatureMatrix>> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    let mut out = Vec::new();
    let mut at = 0;
    while at < bytes.len() {
        let (m, used) = decode_matrix(&bytes[at..]).map_err(|e| format_err(path, e))?;
        out.push(m);
        at += used;
    }
    Ok(out)
}

pub fn write_container(ms: &[&FeatureMatrix], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    for m in ms {
        encode_matrix(m, &mut buf).map_err(|e| format_err(path, e))?;
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Writes `key = value` lines next to `path`.
pub fn write_sidecar(path: &Path, entries: &[(&str, String)]) -> Result<()> {
    let side = sidecar_path(path);
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

pub fn read_sidecar(path: &Path) -> Result<BTreeMap<String, String>> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    crate::config::parse_key_values(&text, &side)
}
