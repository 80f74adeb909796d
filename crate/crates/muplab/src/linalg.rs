//! Dense vectors and matrices plus the spectral quantities the rest of the
//! crate is built on: spectral norm by power iteration, Frobenius norm,
//! stable rank, alignment, natural (RMS-rescaled) operator norms, and seeded
//! Gaussian / semi-orthogonal sampling.
//!
//! Everything here is `f64`, row-major, and pure: no operation mutates its
//! inputs, so values can be shared freely across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Default relative tolerance for power iteration.
pub const DEFAULT_SPECTRAL_TOL: f64 = 1e-6;
/// Default iteration cap for power iteration.
pub const DEFAULT_SPECTRAL_MAX_ITERS: usize = 1000;

/// Fixed seed for the power-iteration start vector. Estimates are
/// deterministic for a given matrix shape.
const POWER_ITERATION_SEED: u64 = 0x54ec_7a11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("operation undefined on an all-zero matrix")]
    ZeroMatrix,
    #[error("operation undefined on an all-zero vector")]
    ZeroVector,
    #[error("entries must be finite")]
    NonFinite,
    #[error("dimension must be at least 1")]
    EmptyDimension,
}

/// Whether a vector space counts every entry toward its norm (dense) or only
/// a constant number of entries (sparse, e.g. one-hot encodings).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityTag {
    Dense,
    Sparse,
}

// ---------------------------------------------------------------------------
// Inner kernels
// ---------------------------------------------------------------------------

pub(crate) mod kernels {
    /// Dot product with sixteen independent accumulators so the reduction
    /// vectorizes across wide SIMD lanes. `mul_add` maps to FMA on targets
    /// that have it.
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; 16];
        let main = a.len() / 16 * 16;
        for (ca, cb) in a[..main].chunks_exact(16).zip(b[..main].chunks_exact(16)) {
            for k in 0..16 {
                acc[k] = ca[k].mul_add(cb[k], acc[k]);
            }
        }
        let mut tail = 0.0;
        for (x, y) in a[main..].iter().zip(&b[main..]) {
            tail = x.mul_add(*y, tail);
        }
        let mut half = [0.0f64; 8];
        for k in 0..8 {
            half[k] = acc[k] + acc[k + 8];
        }
        (half[0] + half[4]) + (half[1] + half[5]) + ((half[2] + half[6]) + (half[3] + half[7]))
            + tail
    }

    /// `y += alpha * x`
    #[inline]
    pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
        debug_assert_eq!(y.len(), x.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = xi.mul_add(alpha, *yi);
        }
    }

    #[inline]
    pub fn scale(x: &mut [f64], alpha: f64) {
        for xi in x.iter_mut() {
            *xi *= alpha;
        }
    }

    #[inline]
    pub fn norm2(x: &[f64]) -> f64 {
        dot(x, x).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// Dense real vector with at least one entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Validates that the data is nonempty and finite.
    pub fn new(data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.is_empty() {
            return Err(LinalgError::EmptyDimension);
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim >= 1, "vector dimension must be at least 1");
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn from_fn(dim: usize, f: impl FnMut(usize) -> f64) -> Self {
        assert!(dim >= 1, "vector dimension must be at least 1");
        Self {
            data: (0..dim).map(f).collect(),
        }
    }

    /// One-hot basis vector `e_index` in `dim` dimensions.
    pub fn one_hot(dim: usize, index: usize) -> Self {
        assert!(index < dim);
        let mut v = Self::zeros(dim);
        v.data[index] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn l2_norm(&self) -> f64 {
        kernels::norm2(&self.data)
    }

    /// `l2_norm / sqrt(dim)`: the typical entry size.
    pub fn rms_norm(&self) -> f64 {
        self.l2_norm() / (self.dim() as f64).sqrt()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(kernels::dot(&self.data, &other.data))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(Vector {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|a| a * alpha).collect(),
        }
    }
}

fn check_dims(expected: usize, got: usize) -> Result<(), LinalgError> {
    if expected != got {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("{expected}"),
            got: format!("{got}"),
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// Dense real matrix, row-major. `rows` is fan-out, `cols` is fan-in.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Validates shape consistency and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyDimension);
        }
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch {
                expected: format!("{} entries", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be at least 1");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(rows >= 1 && cols >= 1, "matrix dimensions must be at least 1");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        if rows.is_empty() {
            return Err(LinalgError::EmptyDimension);
        }
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(LinalgError::ShapeMismatch {
                    expected: format!("{cols} columns"),
                    got: format!("{} columns", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        // Tiled to keep both source and destination access cache-friendly.
        const TILE: usize = 32;
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i0 in (0..self.rows).step_by(TILE) {
            let i1 = (i0 + TILE).min(self.rows);
            for j0 in (0..self.cols).step_by(TILE) {
                let j1 = (j0 + TILE).min(self.cols);
                for j in j0..j1 {
                    for i in i0..i1 {
                        out.data[j * self.rows + i] = self.data[i * self.cols + j];
                    }
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &Vector) -> Result<Vector, LinalgError> {
        check_dims(self.cols, v.dim())?;
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            out.data[i] = kernels::dot(self.row(i), v.as_slice());
        }
        Ok(out)
    }

    /// `Mᵀ v` without materializing the transpose.
    pub fn matvec_transpose(&self, v: &Vector) -> Result<Vector, LinalgError> {
        check_dims(self.rows, v.dim())?;
        let mut out = Vector::zeros(self.cols);
        for i in 0..self.rows {
            kernels::axpy(&mut out.data, v.data[i], self.row(i));
        }
        Ok(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        check_dims(self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a_ik) in a_row.iter().enumerate() {
                kernels::axpy(out_row, a_ik, other.row(k));
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, LinalgError> {
        self.same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * alpha).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        kernels::norm2(&self.data)
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    fn same_shape(&self, other: &Matrix) -> Result<(), LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::ShapeMismatch {
                expected: format!("{}x{}", self.rows, self.cols),
                got: format!("{}x{}", other.rows, other.cols),
            });
        }
        Ok(())
    }
}

/// Rank-one matrix `u vᵀ`.
pub fn outer(u: &Vector, v: &Vector) -> Matrix {
    let mut out = Matrix::zeros(u.dim(), v.dim());
    for i in 0..u.dim() {
        let ui = u.as_slice()[i];
        let row = out.row_mut(i);
        for (r, vj) in row.iter_mut().zip(v.as_slice()) {
            *r = ui * vj;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Spectral norm by power iteration
// ---------------------------------------------------------------------------

/// Result of a power-iteration run. `converged == false` flags that the
/// iteration cap was reached before the estimate settled; the value is still
/// the best available estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Top singular value via power iteration on the smaller Gram matrix,
/// run with the default tolerance and iteration cap.
pub fn spectral_norm(m: &Matrix) -> f64 {
    spectral_norm_est(m, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITERS).value
}

/// Top singular value via power iteration, iterating `v → MᵀMv` (or `MMᵀ`,
/// whichever Gram side is smaller) until the Rayleigh-quotient estimate moves
/// by a relative amount below `tol`, or `max_iters` is reached.
///
/// The start vector is Gaussian with a fixed seed, so results are
/// deterministic for a given shape.
pub fn spectral_norm_est(m: &Matrix, tol: f64, max_iters: usize) -> SpectralEstimate {
    assert!(tol > 0.0, "tolerance must be positive");
    assert!(max_iters >= 1, "max_iters must be at least 1");
    if m.is_zero() {
        return SpectralEstimate {
            value: 0.0,
            converged: true,
            iterations: 0,
        };
    }
    // Iterate on the side with the smaller Gram matrix.
    let small_is_cols = m.cols <= m.rows;
    let small = if small_is_cols { m.cols } else { m.rows };
    let big = if small_is_cols { m.rows } else { m.cols };

    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v: Vec<f64> = (0..small).map(|_| normal.sample(&mut rng)).collect();
    let mut w = vec![0.0; big];

    let mut sigma_prev = f64::NAN;
    let mut sigma = 0.0;
    let mut iterations = 0;
    for it in 1..=max_iters {
        iterations = it;
        let norm_v = kernels::norm2(&v);
        if norm_v == 0.0 {
            // Start vector annihilated (possible only for singular M);
            // reseed deterministically and continue.
            v = (0..small).map(|_| normal.sample(&mut rng)).collect();
            continue;
        }
        kernels::scale(&mut v, 1.0 / norm_v);

        // w = M v (or Mᵀ v), sigma = ‖w‖ is the Rayleigh-quotient estimate.
        apply(m, small_is_cols, &v, &mut w);
        sigma = kernels::norm2(&w);
        if sigma == 0.0 {
            // v is in the null space; restart from a fresh direction.
            v = (0..small).map(|_| normal.sample(&mut rng)).collect();
            sigma_prev = f64::NAN;
            continue;
        }
        // v ← Mᵀ w (or M w), closing one multiplication by the Gram matrix.
        apply_adjoint(m, small_is_cols, &w, &mut v);

        if sigma_prev.is_finite() && (sigma - sigma_prev).abs() <= tol * sigma {
            return SpectralEstimate {
                value: sigma,
                converged: true,
                iterations,
            };
        }
        sigma_prev = sigma;
    }
    SpectralEstimate {
        value: sigma,
        converged: false,
        iterations,
    }
}

fn apply(m: &Matrix, small_is_cols: bool, v: &[f64], out: &mut [f64]) {
    if small_is_cols {
        // out = M v
        for i in 0..m.rows {
            out[i] = kernels::dot(m.row(i), v);
        }
    } else {
        // out = Mᵀ v
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m.rows {
            kernels::axpy(out, v[i], m.row(i));
        }
    }
}

fn apply_adjoint(m: &Matrix, small_is_cols: bool, w: &[f64], out: &mut [f64]) {
    if small_is_cols {
        // out = Mᵀ w
        out.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..m.rows {
            kernels::axpy(out, w[i], m.row(i));
        }
    } else {
        // out = M w
        for i in 0..m.rows {
            out[i] = kernels::dot(m.row(i), w);
        }
    }
}

// ---------------------------------------------------------------------------
// Derived spectral quantities
// ---------------------------------------------------------------------------

/// `‖M‖_F² / ‖M‖_*²`: a smooth effective-rank measure in `[1, min(rows, cols)]`.
pub fn stable_rank(m: &Matrix) -> Result<f64, LinalgError> {
    stable_rank_est(m, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITERS)
}

pub fn stable_rank_est(m: &Matrix, tol: f64, max_iters: usize) -> Result<f64, LinalgError> {
    if m.is_zero() {
        return Err(LinalgError::ZeroMatrix);
    }
    let f = m.frobenius_norm();
    let s = spectral_norm_est(m, tol, max_iters).value;
    Ok((f / s).powi(2))
}

/// `A(P, Q) = ‖PQ‖_* / (‖P‖_* ‖Q‖_*)`, in the unit interval; 1 when the top
/// singular subspaces mesh maximally.
pub fn alignment(p: &Matrix, q: &Matrix) -> Result<f64, LinalgError> {
    alignment_est(p, q, DEFAULT_SPECTRAL_TOL, DEFAULT_SPECTRAL_MAX_ITERS)
}

pub fn alignment_est(
    p: &Matrix,
    q: &Matrix,
    tol: f64,
    max_iters: usize,
) -> Result<f64, LinalgError> {
    if p.cols != q.rows {
        return Err(LinalgError::ShapeMismatch {
            expected: format!("{} rows", p.cols),
            got: format!("{} rows", q.rows),
        });
    }
    if p.is_zero() || q.is_zero() {
        return Err(LinalgError::ZeroMatrix);
    }
    let pq = p.matmul(q)?;
    let num = spectral_norm_est(&pq, tol, max_iters).value;
    let den =
        spectral_norm_est(p, tol, max_iters).value * spectral_norm_est(q, tol, max_iters).value;
    Ok(num / den)
}

/// Operator norm induced by the natural norms of the input and output spaces.
///
/// Dense spaces carry the RMS norm `‖v‖₂/√dim`, sparse spaces the plain
/// `‖v‖₂`, so for an `m×n` matrix the induced norm picks up a factor
/// `√n` per dense input space and `1/√m` per dense output space. A matrix in
/// a healthy parametrization has natural norm `Θ(1)` irrespective of shape.
pub fn natural_spectral_norm(
    m: &Matrix,
    in_density: DensityTag,
    out_density: DensityTag,
) -> Result<f64, LinalgError> {
    if m.is_zero() {
        return Err(LinalgError::ZeroMatrix);
    }
    let in_factor = match in_density {
        DensityTag::Dense => (m.cols as f64).sqrt(),
        DensityTag::Sparse => 1.0,
    };
    let out_factor = match out_density {
        DensityTag::Dense => (m.rows as f64).sqrt(),
        DensityTag::Sparse => 1.0,
    };
    Ok(spectral_norm(m) * in_factor / out_factor)
}

// ---------------------------------------------------------------------------
// Random sampling
// ---------------------------------------------------------------------------

/// Matrix with i.i.d. `N(0, sigma²)` entries, reproducible from `seed`.
pub fn sample_gaussian(rows: usize, cols: usize, sigma: f64, seed: u64) -> Matrix {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return Matrix::zeros(rows, cols);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    Matrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

/// Gaussian vector with i.i.d. `N(0, sigma²)` entries.
pub fn sample_gaussian_vector(dim: usize, sigma: f64, seed: u64) -> Vector {
    assert!(sigma >= 0.0, "sigma must be nonnegative");
    if sigma == 0.0 {
        return Vector::zeros(dim);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid normal");
    Vector::from_fn(dim, |_| normal.sample(&mut rng))
}

/// Random semi-orthogonal matrix: `BᵀB = I` when `rows ≥ cols`, `BBᵀ = I`
/// otherwise. All singular values are 1.
///
/// Built by Gram–Schmidt with one re-orthogonalization pass over a Gaussian
/// sample, orthonormalizing along the shorter dimension.
pub fn sample_semi_orthogonal(rows: usize, cols: usize, seed: u64) -> Matrix {
    let ortho_rows = rows < cols;
    let (k, n) = if ortho_rows { (rows, cols) } else { (cols, rows) };
    // Orthonormalize the k rows of a k×n Gaussian sample (k ≤ n, so the rows
    // are linearly independent with probability one).
    let mut g = sample_gaussian(k, n, 1.0, seed);
    for i in 0..k {
        // Two projection passes keep the basis orthogonal to ~1e-15.
        for _pass in 0..2 {
            for j in 0..i {
                let proj = kernels::dot(g.row(i), g.row(j));
                let (head, tail) = g.data.split_at_mut(i * n);
                kernels::axpy(&mut tail[..n], -proj, &head[j * n..(j + 1) * n]);
            }
        }
        let norm = kernels::norm2(g.row(i));
        kernels::scale(g.row_mut(i), 1.0 / norm);
    }
    if ortho_rows {
        g
    } else {
        g.transpose()
    }
}
