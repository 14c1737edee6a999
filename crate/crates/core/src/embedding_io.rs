//! EMB1 embedding files, label lists and the similarity kernels shared by
//! every other module.
//!
//! EMB1 layout (all little-endian):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `b"EMB1"`               |
//! | 4      | 4    | version `u32` = 1             |
//! | 8      | 4    | rows `u32`                    |
//! | 12     | 4    | dims `u32`                    |
//! | 16     | ..   | rows × dims `f32`, row-major  |

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"EMB1";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

/// Rows whose norm is off by more than this at load time are reported.
pub const LOAD_NORM_TOL: f64 = 1e-4;
/// Rows within this distance of unit norm are left bit-for-bit untouched.
const UNIT_NORM_EPS: f64 = 1e-6;

/// Row-major matrix of L2-normalized `f32` rows.
///
/// A matrix may have zero rows (an empty negative label bank, say) but
/// always has a known dimensionality.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dims: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    /// Builds a matrix from a flat row-major buffer, rejecting non-finite
    /// values and zero rows, and renormalizing every row.
    pub fn from_flat(rows: usize, dims: usize, data: Vec<f32>) -> Result<Self> {
        if dims < 2 {
            return Err(Error::invalid(format!("dims must be >= 2, got {dims}")));
        }
        if data.len() != rows * dims {
            return Err(Error::LengthMismatch {
                what: "flat buffer vs rows*dims",
                left: data.len(),
                right: rows * dims,
            });
        }
        let mut m = Self { rows, dims, data };
        m.check_finite()?;
        m.normalize_rows()?;
        Ok(m)
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let dims = rows
            .first()
            .map(|r| r.as_ref().len())
            .ok_or_else(|| Error::invalid("cannot infer dims from zero rows"))?;
        let mut data = Vec::with_capacity(rows.len() * dims);
        for r in rows {
            let r = r.as_ref();
            if r.len() != dims {
                return Err(Error::DimMismatch {
                    left: dims,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), dims, data)
    }

    /// Same as [`from_rows`](Self::from_rows) but for `f64` input.
    pub fn from_rows_f64<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let converted: Vec<Vec<f32>> = rows
            .iter()
            .map(|r| r.as_ref().iter().map(|&v| v as f32).collect())
            .collect();
        Self::from_rows(&converted)
    }

    pub fn empty(dims: usize) -> Result<Self> {
        Self::from_flat(0, dims, Vec::new())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dims..(i + 1) * self.dims]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.dims)
    }

    /// New matrix with the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Self {
            rows: indices.len(),
            dims: self.dims,
            data,
        })
    }

    /// Stacks `other` below `self`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch {
                left: self.dims,
                right: other.dims,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self {
            rows: self.rows + other.rows,
            dims: self.dims,
            data,
        })
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(pos) => Err(Error::NonFinite {
                row: pos / self.dims,
                col: pos % self.dims,
            }),
            None => Ok(()),
        }
    }

    /// Rescales every row to unit L2 norm and returns how many rows were off
    /// by more than [`LOAD_NORM_TOL`] beforehand.
    ///
    /// Rows already within 1e-6 of unit norm are not touched, which keeps
    /// load/save round trips bit-exact.
    pub fn normalize_rows(&mut self) -> Result<usize> {
        let dims = self.dims;
        let mut off_tolerance = 0;
        for (i, row) in self.data.chunks_exact_mut(dims).enumerate() {
            let norm = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroNormRow(i));
            }
            if (norm - 1.0).abs() > LOAD_NORM_TOL {
                off_tolerance += 1;
            }
            if (norm - 1.0).abs() > UNIT_NORM_EPS {
                for v in row.iter_mut() {
                    *v = (*v as f64 / norm) as f32;
                }
            }
        }
        Ok(off_tolerance)
    }
}

/// `f64`-accumulated dot product.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Dense |a| × |b| cosine similarity matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Similarity {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Similarity {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub(crate) fn check_dims(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::DimMismatch {
            left: a.dims,
            right: b.dims,
        });
    }
    Ok(())
}

/// Pairwise inner products of unit rows, i.e. cosine similarities.
pub fn cosine_sim(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<Similarity> {
    check_dims(a, b)?;
    let data: Vec<f64> = (0..a.rows)
        .into_par_iter()
        .flat_map_iter(|i| {
            let ai = a.row(i);
            b.iter_rows().map(move |bj| dot(ai, bj))
        })
        .collect();
    Ok(Similarity {
        rows: a.rows,
        cols: b.rows,
        data,
    })
}

/// Parses an EMB1 buffer. Returns the matrix plus the number of rows that
/// were more than [`LOAD_NORM_TOL`] away from unit norm.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbeddingMatrix, usize)> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let rows = word(8) as usize;
    let dims = word(12) as usize;
    let expected = HEADER_LEN + rows * dims * 4;
    if bytes.len() != expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if dims < 2 {
        return Err(Error::invalid(format!("dims must be >= 2, got {dims}")));
    }
    let mut m = EmbeddingMatrix { rows, dims, data };
    m.check_finite()?;
    let off = m.normalize_rows()?;
    Ok((m, off))
}

pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.data.len() * 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.rows as u32).to_le_bytes());
    out.extend_from_slice(&(matrix.dims as u32).to_le_bytes());
    for v in &matrix.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Loads an EMB1 file, warning about rows that needed renormalization.
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    load_embeddings_with_report(path).map(|(m, _)| m)
}

/// Like [`load_embeddings`], also returning how many rows were renormalized
/// beyond the 1e-4 load tolerance.
pub fn load_embeddings_with_report(path: impl AsRef<Path>) -> Result<(EmbeddingMatrix, usize)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io_at(path, e))?;
    let (m, off) = decode_embeddings(&bytes)?;
    if off > 0 {
        log::warn!(
            "{}: {off} of {} rows deviated from unit norm by more than {LOAD_NORM_TOL}; renormalized",
            path.display(),
            m.rows
        );
    }
    Ok((m, off))
}

pub fn save_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_embeddings(matrix)).map_err(|e| Error::io_at(path, e))
}

/// Ordered label strings, one per embedding row when paired.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelList(Vec<String>);

impl LabelList {
    pub fn new(labels: Vec<String>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("label list must not be empty"));
        }
        if let Some(bad) = labels.iter().position(|l| l.contains('\n') || l.contains('\r')) {
            return Err(Error::invalid(format!("label {bad} contains a newline")));
        }
        Ok(Self(labels))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.0.get(i).map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }

    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let labels = indices
            .iter()
            .map(|&i| {
                self.0
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("label index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(labels)
    }

    /// Checks one-to-one correspondence with an embedding matrix.
    pub fn check_paired(&self, matrix: &EmbeddingMatrix) -> Result<()> {
        if self.len() != matrix.rows() {
            return Err(Error::LengthMismatch {
                what: "labels vs embedding rows",
                left: self.len(),
                right: matrix.rows(),
            });
        }
        Ok(())
    }

    pub fn read_from(reader: impl BufRead) -> Result<Self> {
        let labels = reader
            .lines()
            .map(|l| l.map(|s| s.trim_end_matches('\r').to_string()))
            .collect::<std::io::Result<Vec<_>>>()?;
        Self::new(labels)
    }

    pub fn write_to(&self, mut writer: impl Write) -> Result<()> {
        for l in &self.0 {
            writer.write_all(l.as_bytes())?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<LabelList> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
    LabelList::read_from(BufReader::new(f))
}

pub fn save_labels(labels: &LabelList, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
    labels.write_to(BufWriter::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb1(rows: u32, dims: u32, values: &[f32]) -> Vec<u8> {
        let mut b = b"EMB1".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&dims.to_le_bytes());
        for v in values {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn decodes_identity_rows() {
        let (m, off) = decode_embeddings(&emb1(2, 3, &[1., 0., 0., 0., 1., 0.])).unwrap();
        assert_eq!(off, 0);
        assert_eq!(m.row(0), &[1., 0., 0.]);
        assert_eq!(m.row(1), &[0., 1., 0.]);
    }

    #[test]
    fn renormalizes_three_four_five() {
        let (m, off) = decode_embeddings(&emb1(1, 3, &[3., 4., 0.])).unwrap();
        assert_eq!(off, 1);
        assert!((m.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((m.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(m.row(0)[2], 0.0);
    }

    #[test]
    fn distinct_errors() {
        let mut bad = emb1(1, 2, &[1., 0.]);
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_embeddings(&bad), Err(Error::BadMagic(_))));

        let short = &emb1(2, 2, &[1., 0., 0., 1.])[..20];
        assert!(matches!(decode_embeddings(short), Err(Error::Truncated { .. })));

        let zero = emb1(2, 2, &[1., 0., 0., 0.]);
        assert!(matches!(decode_embeddings(&zero), Err(Error::ZeroNormRow(1))));

        let nan = emb1(1, 2, &[f32::NAN, 1.]);
        assert!(matches!(
            decode_embeddings(&nan),
            Err(Error::NonFinite { row: 0, col: 0 })
        ));

        let mut v2 = emb1(1, 2, &[1., 0.]);
        v2[4] = 2;
        assert!(matches!(decode_embeddings(&v2), Err(Error::UnsupportedVersion(2))));
    }

    #[test]
    fn save_to_unwritable_path_is_io_error() {
        let m = EmbeddingMatrix::from_rows(&[[0.0f32, 1.0]]).unwrap();
        let err = save_embeddings(&m, "/nonexistent-dir/x/y.emb").unwrap_err();
        assert!(matches!(err, Error::IoPath { .. }));
    }

    #[test]
    fn small_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        let m = EmbeddingMatrix::from_rows(&[[0.0f32, 1.0]]).unwrap();
        save_embeddings(&m, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = load_embeddings(&p).unwrap();
        assert_eq!(encode_embeddings(&back), bytes);
        assert_eq!(back, m);
    }

    #[test]
    fn cosine_identity_and_orthogonal() {
        let a = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0], [0.0, 1.0]]).unwrap();
        let s = cosine_sim(&a, &a).unwrap();
        assert_eq!(s.data, vec![1.0, 0.0, 0.0, 1.0]);

        let x = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0]]).unwrap();
        let y = EmbeddingMatrix::from_rows(&[[0.0f32, 1.0]]).unwrap();
        assert_eq!(cosine_sim(&x, &y).unwrap().get(0, 0), 0.0);

        let z = EmbeddingMatrix::from_rows(&[[1.0f32, 0.0, 0.0]]).unwrap();
        assert!(matches!(cosine_sim(&x, &z), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn labels_reject_newlines_and_empty() {
        assert!(LabelList::new(vec![]).is_err());
        assert!(LabelList::new(vec!["a\nb".into()]).is_err());
        let l = LabelList::read_from("cat\ndog\r\n".as_bytes()).unwrap();
        assert_eq!(l.as_slice(), &["cat".to_string(), "dog".to_string()]);
    }
}
