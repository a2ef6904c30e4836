//! Dense matrices and vectors, row-norm machinery, the ReLU convention,
//! and seeded Gaussian/Rademacher sampling.
//!
//! Everything here is pure: values are immutable after construction and a
//! [`RngStream`] identified by `(seed, stream_id)` reproduces its draws
//! bit-for-bit, so experiment cells can run in parallel on disjoint streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        assert!(!rows.is_empty() && !rows[0].is_empty());
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in &rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * x` for a column vector `x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dimension mismatch");
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(y.len(), self.rows, "matvec_t dimension mismatch");
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let yi = y[i];
            if yi == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += yi * v;
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += c * other`.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scale row `i` in place.
    pub fn scale_row(&mut self, i: usize, c: f64) {
        for v in self.row_mut(i) {
            *v *= c;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Row `ℓ_p` norm: `(Σ_i ‖row_i‖₂^p)^{1/p}`; `p = ∞` gives the max row norm.
pub fn row_lp_norm(w: &Matrix, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(LabError::InvalidParameter(format!(
            "row_lp_norm requires p >= 1, got {p}"
        )));
    }
    let row_norms = (0..w.rows).map(|i| norm2(w.row(i)));
    if p.is_infinite() {
        return Ok(row_norms.fold(0.0, f64::max));
    }
    Ok(row_norms.map(|r| r.powf(p)).sum::<f64>().powf(1.0 / p))
}

/// ReLU with the subgradient convention `∇σ(0) = 1`.
#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Indicator `𝕀[x ≥ 0]`; note the value 1 at exactly 0.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// A reproducible random stream identified by `(seed, stream_id)`.
///
/// Backed by ChaCha8 with the stream id folded into the word position, so
/// distinct stream ids of the same seed are independent and any cell of an
/// experiment grid can re-derive its stream without coordination.
#[derive(Debug, Clone)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream {
            seed,
            stream_id,
            rng,
        }
    }

    /// Derive an independent child stream. Children of distinct labels and
    /// streams never overlap (label is mixed into the id with a 64-bit FNV).
    pub fn child(&self, label: u64) -> RngStream {
        let mixed = self
            .stream_id
            .wrapping_mul(0x100000001b3)
            .wrapping_add(label)
            .wrapping_mul(0x9e3779b97f4a7c15)
            | 1;
        RngStream::new(self.seed, mixed)
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn sign(&mut self) -> f64 {
        if self.rng.random::<bool>() {
            1.0
        } else {
            -1.0
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.rng.random_range(0..=i);
            xs.swap(i, j);
        }
    }
}

/// Matrix with i.i.d. `𝒩(0, variance)` entries.
pub fn sample_gaussian_matrix(
    rows: usize,
    cols: usize,
    variance: f64,
    rng: &mut RngStream,
) -> Result<Matrix> {
    if variance < 0.0 {
        return Err(LabError::InvalidParameter(format!(
            "negative variance {variance}"
        )));
    }
    let sd = variance.sqrt();
    let data = (0..rows * cols).map(|_| sd * rng.standard_normal()).collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Vector with i.i.d. `𝒩(0, variance)` entries.
pub fn sample_gaussian_vector(n: usize, variance: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    if variance < 0.0 {
        return Err(LabError::InvalidParameter(format!(
            "negative variance {variance}"
        )));
    }
    let sd = variance.sqrt();
    Ok((0..n).map(|_| sd * rng.standard_normal()).collect())
}

/// Diagonal of a random sign matrix: entries i.i.d. uniform on `{+1, −1}`.
pub fn sample_sign_diagonal(n: usize, rng: &mut RngStream) -> Vec<f64> {
    (0..n).map(|_| rng.sign()).collect()
}
