//! Dynamic time warping and the safety-aware distance between segments.
//!
//! DTW here uses the Euclidean distance between error vectors as local cost
//! and the symmetric match/insert/delete step pattern over the full window.
//! It is not a metric (the triangle inequality can fail), and nothing below
//! relies on one.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::TrainingDatum;
use crate::error::{Error, Result};

pub const DISTANCE_MAGIC: &[u8; 8] = b"SAFDIST1";

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// DTW over two flattened sequences of `dim`-vectors.
fn dtw_flat(a: &[f64], b: &[f64], dim: usize, prev: &mut Vec<f64>, curr: &mut Vec<f64>) -> f64 {
    let n = a.len() / dim;
    let m = b.len() / dim;
    prev.clear();
    prev.resize(m + 1, f64::INFINITY);
    curr.clear();
    curr.resize(m + 1, f64::INFINITY);
    prev[0] = 0.0;
    for i in 1..=n {
        curr[0] = f64::INFINITY;
        let ai = &a[(i - 1) * dim..i * dim];
        for j in 1..=m {
            let cost = euclid(ai, &b[(j - 1) * dim..j * dim]);
            curr[j] = cost + prev[j - 1].min(prev[j]).min(curr[j - 1]);
        }
        std::mem::swap(prev, curr);
    }
    prev[m]
}

/// Minimal accumulated Euclidean cost over all warping paths.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("dtw needs non-empty sequences"));
    }
    let dim = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(Error::invalid("dtw sequences must share one vector dimension"));
    }
    let fa: Vec<f64> = a.iter().flatten().copied().collect();
    let fb: Vec<f64> = b.iter().flatten().copied().collect();
    if dim == 0 {
        return Ok(0.0);
    }
    Ok(dtw_flat(&fa, &fb, dim, &mut Vec::new(), &mut Vec::new()))
}

/// Dense symmetric `n x n` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    values: Vec<f64>,
    /// Largest raw DTW value, used for normalisation.
    pub w_max: f64,
}

impl DistanceMatrix {
    pub fn from_values(n: usize, values: Vec<f64>, w_max: f64) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::invalid("distance matrix has wrong size"));
        }
        Ok(DistanceMatrix { n, values, w_max })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.n..(i + 1) * self.n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Little-endian binary export: `SAFDIST1`, `u32 n`, `u32 0`, then the
    /// row-major doubles.
    pub fn write_binary<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(DISTANCE_MAGIC)?;
        out.write_all(&(self.n as u32).to_le_bytes())?;
        out.write_all(&0u32.to_le_bytes())?;
        for v in &self.values {
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_binary(std::io::BufWriter::new(file)).map_err(|e| Error::io(path, e))
    }

    /// Reads a matrix written by [`DistanceMatrix::write_binary`]. `w_max`
    /// is not stored and comes back as NaN.
    pub fn read_binary<R: Read>(mut input: R) -> Result<Self> {
        let mut header = [0u8; 16];
        input
            .read_exact(&mut header)
            .map_err(|e| Error::invalid(format!("distance file header: {e}")))?;
        if &header[..8] != DISTANCE_MAGIC {
            return Err(Error::invalid("distance file has wrong magic"));
        }
        let n = u32::from_le_bytes(header[8..12].try_into().expect("4 bytes")) as usize;
        let mut bytes = vec![0u8; n * n * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|e| Error::invalid(format!("distance file body: {e}")))?;
        let values = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        DistanceMatrix::from_values(n, values, f64::NAN)
    }
}

/// `dtw(e_i, e_j) / w_max + weight * |lambda_i - lambda_j|` over error
/// sequences. When every sequence is identical (`w_max = 0`) the DTW term is
/// zero.
pub fn distance_matrix_from(errors: &[Vec<Vec<f64>>], lambdas: &[f64], weight: f64) -> Result<DistanceMatrix> {
    let n = errors.len();
    if n < 2 {
        return Err(Error::invalid("distance matrix needs at least two data"));
    }
    if lambdas.len() != n {
        return Err(Error::invalid("one score per sequence required"));
    }
    let dim = errors[0].first().map_or(0, Vec::len);
    if errors.iter().any(|e| e.is_empty() || e.iter().any(|v| v.len() != dim)) {
        return Err(Error::invalid("error sequences must be non-empty with one vector dimension"));
    }
    let flat: Vec<Vec<f64>> = errors.iter().map(|e| e.iter().flatten().copied().collect()).collect();

    let mut values = vec![0.0; n * n];
    values.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let (mut prev, mut curr) = (Vec::new(), Vec::new());
        for j in i + 1..n {
            row[j] = if dim == 0 {
                0.0
            } else {
                dtw_flat(&flat[i], &flat[j], dim, &mut prev, &mut curr)
            };
        }
    });
    let w_max = values.iter().copied().fold(0.0, f64::max);
    if w_max == 0.0 {
        log::warn!("all error sequences coincide; DTW term of the distance set to zero");
    }
    for i in 0..n {
        for j in i + 1..n {
            let raw = values[i * n + j];
            let w = if w_max > 0.0 { raw / w_max } else { 0.0 };
            let d = w + weight * (lambdas[i] - lambdas[j]).abs();
            values[i * n + j] = d;
            values[j * n + i] = d;
        }
    }
    DistanceMatrix::from_values(n, values, w_max)
}

pub fn distance_matrix(data: &[TrainingDatum], weight: f64) -> Result<DistanceMatrix> {
    let errors: Vec<Vec<Vec<f64>>> = data.iter().map(|d| d.segment.errors()).collect();
    let lambdas: Vec<f64> = data.iter().map(|d| d.lambda).collect();
    distance_matrix_from(&errors, &lambdas, weight)
}
