//! Deterministic dense linear algebra: SPD solves, Gram products,
//! orthogonal sampling, norms.
//!
//! Everything here is plain `f64` with a fixed accumulation order, so
//! identical inputs (and seeds) produce bit-identical outputs. Inverses are
//! never formed explicitly; every `(..)⁻¹` is realized as a linear solve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted by [`solve_spd`].
pub const SYMMETRY_TOL: f64 = 1e-9;

/// A pivot below `SINGULAR_TOL * max|diag|` is treated as singular.
pub const SINGULAR_TOL: f64 = 1e-12;

/// Dense row-major matrix of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        debug_assert!(data.iter().all(|v| v.is_finite()), "non-finite matrix entry");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Scalar multiple of the identity.
    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = scale;
        }
        m
    }

    /// Build from nested rows; convenient in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    /// Stack column vectors (each of length `rows`) into a rows×n matrix.
    pub fn from_columns(columns: &[Vec<f64>]) -> Self {
        let n = columns.len();
        assert!(n > 0, "from_columns needs at least one column");
        let rows = columns[0].len();
        let mut m = Matrix::zeros(rows, n);
        for (j, col) in columns.iter().enumerate() {
            assert_eq!(col.len(), rows, "ragged columns");
            for i in 0..rows {
                m.data[i * n + j] = col[i];
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("add", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::new(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape("sub", other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::new(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// In-place `self += other`, shapes must already match.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, op: &'static str, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                op,
                lhs_rows: self.rows,
                lhs_cols: self.cols,
                rhs_rows: other.rows,
                rhs_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Standard product `a·b` with a fixed left-to-right accumulation order per
/// output entry, so results are reproducible bit for bit.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a·bᵀ` without materializing the transpose.
pub fn matmul_bt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_bt",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        for j in 0..b.rows {
            let mut acc = 0.0;
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[j * b.cols + k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// Gram product `K·Kᵀ`. Symmetrized exactly by mirroring the lower triangle.
pub fn gram(k: &Matrix) -> Matrix {
    let d = k.rows;
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let mut acc = 0.0;
            for e in 0..k.cols {
                acc += k.data[i * k.cols + e] * k.data[j * k.cols + e];
            }
            g.data[i * d + j] = acc;
            g.data[j * d + i] = acc;
        }
    }
    g
}

/// √(Σ entries²).
pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Relative Frobenius distance ‖a − b‖_F / ‖b‖_F (absolute when b = 0).
pub fn rel_frobenius(a: &Matrix, b: &Matrix) -> f64 {
    let mut num = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        let d = x - y;
        num += d * d;
    }
    let num = num.sqrt();
    let den = frobenius_norm(b);
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Solve `a·X = b` for symmetric positive-definite `a`.
///
/// Uses a Cholesky factorization and falls back to a partially pivoted
/// general factorization if the SPD factorization breaks down. Symmetry is
/// required on input within [`SYMMETRY_TOL`] relative to the largest entry.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols || a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "solve_spd",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let scale = a.max_abs();
    let mut max_asym = 0.0_f64;
    for i in 0..a.rows {
        for j in 0..i {
            max_asym = max_asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    if max_asym > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
        return Err(Error::NotSymmetric { max_asym });
    }
    match cholesky(a) {
        Some(l) => Ok(cholesky_solve(&l, b)),
        None => solve_lu(a, b),
    }
}

/// Lower Cholesky factor, or None if a pivot is not strictly positive.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l.set(i, i, acc.sqrt());
            } else {
                l.set(i, j, acc / l.get(j, j));
            }
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows;
    let m = b.cols;
    let mut x = b.clone();
    // forward: L·Y = B
    for col in 0..m {
        for i in 0..n {
            let mut acc = x.get(i, col);
            for k in 0..i {
                acc -= l.get(i, k) * x.get(k, col);
            }
            x.set(i, col, acc / l.get(i, i));
        }
    }
    // backward: Lᵀ·X = Y
    for col in 0..m {
        for i in (0..n).rev() {
            let mut acc = x.get(i, col);
            for k in (i + 1)..n {
                acc -= l.get(k, i) * x.get(k, col);
            }
            x.set(i, col, acc / l.get(i, i));
        }
    }
    x
}

/// General solve with partial pivoting. The singularity threshold is
/// `SINGULAR_TOL` times the largest diagonal magnitude of the input.
pub fn solve_lu(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols || a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "solve_lu",
            lhs_rows: a.rows,
            lhs_cols: a.cols,
            rhs_rows: b.rows,
            rhs_cols: b.cols,
        });
    }
    let n = a.rows;
    let mut lu = a.clone();
    let mut x = b.clone();
    let max_diag = (0..n).fold(0.0_f64, |m, i| m.max(a.get(i, i).abs()));
    let threshold = SINGULAR_TOL * max_diag;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = lu.get(col, col).abs();
        for r in (col + 1)..n {
            let v = lu.get(r, col).abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = r;
            }
        }
        if pivot_val <= threshold {
            return Err(Error::Singular { pivot: col });
        }
        if pivot_row != col {
            for j in 0..n {
                let tmp = lu.get(col, j);
                lu.set(col, j, lu.get(pivot_row, j));
                lu.set(pivot_row, j, tmp);
            }
            for j in 0..x.cols() {
                let tmp = x.get(col, j);
                x.set(col, j, x.get(pivot_row, j));
                x.set(pivot_row, j, tmp);
            }
        }
        let p = lu.get(col, col);
        for r in (col + 1)..n {
            let f = lu.get(r, col) / p;
            lu.set(r, col, f);
            for j in (col + 1)..n {
                let v = lu.get(r, j) - f * lu.get(col, j);
                lu.set(r, j, v);
            }
            for j in 0..x.cols() {
                let v = x.get(r, j) - f * x.get(col, j);
                x.set(r, j, v);
            }
        }
    }
    for col in 0..x.cols() {
        for i in (0..n).rev() {
            let mut acc = x.get(i, col);
            for k in (i + 1)..n {
                acc -= lu.get(i, k) * x.get(k, col);
            }
            x.set(i, col, acc / lu.get(i, i));
        }
    }
    Ok(x)
}

/// Solve `X·a = b` for symmetric `a` by solving `a·Xᵀ = bᵀ`.
pub fn solve_spd_right(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let xt = solve_spd(a, &b.transpose())?;
    Ok(xt.transpose())
}

/// Deterministic RNG stream for a (seed, domain-tag) pair.
///
/// The 32-byte ChaCha seed is assembled from little-endian words so streams
/// are stable across platforms and releases.
pub fn seeded_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    let mut acc: u64 = 0x9e37_79b9_7f4a_7c15;
    for (i, t) in tags.iter().enumerate() {
        acc = acc
            .wrapping_mul(0xbf58_476d_1ce4_e5b9)
            .wrapping_add(t.wrapping_add(i as u64 + 1));
        let slot = 8 + 8 * (i % 3);
        let mut w = [0u8; 8];
        w.copy_from_slice(&bytes[slot..slot + 8]);
        let mixed = u64::from_le_bytes(w) ^ acc ^ t.rotate_left((i as u32 % 63) + 1);
        bytes[slot..slot + 8].copy_from_slice(&mixed.to_le_bytes());
    }
    ChaCha8Rng::from_seed(bytes)
}

/// Gaussian matrix with entries from a seeded stream, row-major fill order.
pub fn random_gaussian(rows: usize, cols: usize, seed: u64, tags: &[u64]) -> Matrix {
    let mut rng = seeded_rng(seed, tags);
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Matrix::new(rows, cols, data)
}

/// Random n×n orthogonal matrix, deterministic in the seed.
///
/// A seeded Gaussian matrix is orthogonalized column by column with
/// modified Gram-Schmidt plus one reorthogonalization pass, which keeps
/// ‖QQᵀ − I‖_F at machine-precision levels for n ≤ 256. Column signs are
/// fixed so the result is unique given the Gaussian draw.
pub fn random_orthogonal(n: usize, seed: u64) -> Matrix {
    assert!(n >= 1, "orthogonal matrix needs n >= 1");
    let g = random_gaussian(n, n, seed, &[0x6f72_7468]);
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| g.column(j)).collect();
    for j in 0..n {
        for _pass in 0..2 {
            for i in 0..j {
                let proj: f64 = (0..n).map(|r| cols[i][r] * cols[j][r]).sum();
                for r in 0..n {
                    cols[j][r] -= proj * cols[i][r];
                }
            }
        }
        let norm: f64 = (0..n).map(|r| cols[j][r] * cols[j][r]).sum::<f64>().sqrt();
        // A zero column after projection has probability zero under the
        // Gaussian draw; renormalize defensively against tiny norms anyway.
        let inv = if norm > 0.0 { 1.0 / norm } else { 1.0 };
        for r in 0..n {
            cols[j][r] *= inv;
        }
        if cols[j][0] < 0.0 {
            for r in 0..n {
                cols[j][r] = -cols[j][r];
            }
        }
    }
    Matrix::from_columns(&cols)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

/// `W·v` for a column vector.
pub fn matvec(w: &Matrix, v: &[f64]) -> Vec<f64> {
    assert_eq!(w.cols(), v.len(), "matvec dimension mismatch");
    let mut out = vec![0.0; w.rows()];
    for i in 0..w.rows() {
        let mut acc = 0.0;
        for k in 0..w.cols() {
            acc += w.data[i * w.cols + k] * v[k];
        }
        out[i] = acc;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_leaves_operand() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = matmul(&Matrix::identity(2), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_instance() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let out = matmul(&a, &b).unwrap();
        assert_eq!(out, Matrix::from_rows(&[vec![2.0], vec![4.0]]));
    }

    #[test]
    fn matmul_zero_annihilates() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = matmul(&a, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(out, Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 2);
        assert!(matches!(
            matmul(&a, &b),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn solve_spd_identity_returns_rhs() {
        let b = Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let x = solve_spd(&Matrix::identity(2), &b).unwrap();
        for (xi, bi) in x.data().iter().zip(b.data()) {
            assert!((xi - bi).abs() < 1e-14);
        }
    }

    #[test]
    fn solve_spd_diagonal_inverse() {
        let a = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 9.0]]);
        let x = solve_spd(&a, &Matrix::identity(2)).unwrap();
        assert!((x.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((x.get(1, 1) - 1.0 / 9.0).abs() < 1e-15);
        assert!(x.get(0, 1).abs() < 1e-15 && x.get(1, 0).abs() < 1e-15);
    }

    #[test]
    fn solve_spd_hand_instance() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![3.0]]);
        let x = solve_spd(&a, &b).unwrap();
        assert!((x.get(0, 0) - 1.0).abs() < 1e-14);
        assert!((x.get(1, 0) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn solve_spd_rejects_asymmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(
            solve_spd(&a, &Matrix::identity(2)),
            Err(Error::NotSymmetric { .. })
        ));
    }

    #[test]
    fn singular_reports_pivot_index() {
        // Cholesky fails on the zero pivot, LU then flags column 1.
        let a = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        match solve_spd(&a, &Matrix::identity(2)) {
            Err(Error::Singular { pivot }) => assert_eq!(pivot, 1),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn orthogonal_1x1_is_sign() {
        let q = random_orthogonal(1, 3);
        assert!((q.get(0, 0).abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_defining_property() {
        for n in [2usize, 4, 8, 32, 64] {
            let q = random_orthogonal(n, 42);
            let qqt = matmul_bt(&q, &q).unwrap();
            let err = rel_frobenius(&qqt, &Matrix::identity(n));
            let id_norm = (n as f64).sqrt();
            assert!(
                err * id_norm <= 1e-10 * n as f64,
                "n={n}: ||QQt - I|| = {}",
                err * id_norm
            );
        }
    }

    #[test]
    fn orthogonal_large_n() {
        let n = 256;
        let q = random_orthogonal(n, 7);
        let qqt = matmul_bt(&q, &q).unwrap();
        let diff = qqt.sub(&Matrix::identity(n)).unwrap();
        assert!(frobenius_norm(&diff) <= 1e-10 * n as f64);
    }

    #[test]
    fn orthogonal_distinct_seeds_differ() {
        let q1 = random_orthogonal(8, 1);
        let q2 = random_orthogonal(8, 2);
        assert!(frobenius_norm(&q1.sub(&q2).unwrap()) > 0.0);
    }

    #[test]
    fn orthogonal_deterministic_in_seed() {
        let q1 = random_orthogonal(16, 99);
        let q2 = random_orthogonal(16, 99);
        assert_eq!(q1, q2);
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 2)), 0.0);
        let v = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        assert_eq!(frobenius_norm(&v), 5.0);
        assert!((frobenius_norm(&Matrix::identity(3)) - 3.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spd_solve_residual_bound_random() {
        // A = G·Gᵀ + εI is SPD; check the residual bound on a batch of sizes.
        for (n, seed) in [(4usize, 1u64), (16, 2), (48, 3)] {
            let g = random_gaussian(n, n + 3, seed, &[77]);
            let mut a = super::gram(&g);
            for i in 0..n {
                a.set(i, i, a.get(i, i) + 1e-6);
            }
            let b = random_gaussian(n, 3, seed, &[78]);
            let x = solve_spd(&a, &b).unwrap();
            let ax = matmul(&a, &x).unwrap();
            let resid = frobenius_norm(&ax.sub(&b).unwrap());
            let bound = 1e-9
                * (frobenius_norm(&a) * frobenius_norm(&x) + frobenius_norm(&b));
            assert!(resid <= bound, "n={n}: residual {resid} > bound {bound}");
        }
    }

    #[test]
    fn operations_are_pure() {
        let a = random_gaussian(5, 5, 11, &[1]);
        let b = random_gaussian(5, 2, 12, &[2]);
        let g1 = gram(&a);
        let g2 = gram(&a);
        assert_eq!(g1, g2);
        let mut spd = g1.clone();
        for i in 0..5 {
            spd.set(i, i, spd.get(i, i) + 1.0);
        }
        assert_eq!(
            solve_spd(&spd, &b).unwrap(),
            solve_spd(&spd, &b).unwrap()
        );
    }
}
