//! Dense row-major kernels for the curvature update and the QP solver:
//! vector helpers, Householder QR, an RQ variant with upper-triangular left
//! factor, orthogonal complements, and a quasi-definite LDL^T solve.
//!
//! Problem sizes here are at most a few thousand, so everything is dense and
//! unblocked.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("pivot {pivot:e} below threshold at index {index} (matrix numerically singular)")]
    SingularSystem { index: usize, pivot: f64 },
    #[error("zero vector has no orthogonal complement basis")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
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

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.at(i, j)).collect()
    }

    /// Columns `lo..hi` as a new matrix.
    pub fn col_slice(&self, lo: usize, hi: usize) -> Matrix {
        assert!(lo <= hi && hi <= self.cols);
        Matrix::from_fn(self.rows, hi - lo, |i, j| self.at(i, lo + j))
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.at(j, i))
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x`.
    pub fn tr_matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            if xi != 0.0 {
                let row = self.row(i);
                for j in 0..self.cols {
                    out[j] += xi * row[j];
                }
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                if a != 0.0 {
                    for j in 0..other.cols {
                        out.data[i * other.cols + j] += a * other.at(k, j);
                    }
                }
            }
        }
        out
    }

    /// Horizontal concatenation; all blocks must have equal row counts.
    pub fn hstack(blocks: &[&Matrix]) -> Matrix {
        assert!(!blocks.is_empty());
        let rows = blocks[0].rows;
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for b in blocks {
            assert_eq!(b.rows, rows);
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + b.cols].copy_from_slice(b.row(i));
            }
            off += b.cols;
        }
        out
    }

    pub fn frob_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `y += alpha * x`.
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(alpha: f64, a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| alpha * x).collect()
}

/// Householder QR of a square matrix: `b = q * r` with `r` upper triangular
/// and nonnegative diagonal.
pub fn qr_square(b: &Matrix) -> (Matrix, Matrix) {
    assert_eq!(b.rows(), b.cols());
    let n = b.rows();
    let mut r = b.clone();
    let mut q = Matrix::identity(n);
    let mut v = vec![0.0; n];
    for k in 0..n {
        // Householder vector for column k below the diagonal.
        let mut norm = 0.0;
        for i in k..n {
            norm += r.at(i, k) * r.at(i, k);
        }
        let norm = norm.sqrt();
        if norm == 0.0 {
            continue;
        }
        let akk = r.at(k, k);
        let alpha = if akk >= 0.0 { -norm } else { norm };
        let mut vnorm_sq = 0.0;
        for i in k..n {
            v[i] = if i == k { akk - alpha } else { r.at(i, k) };
            vnorm_sq += v[i] * v[i];
        }
        if vnorm_sq == 0.0 {
            continue;
        }
        // r <- (I - 2 v v^T / v^T v) r
        for j in k..n {
            let mut s = 0.0;
            for i in k..n {
                s += v[i] * r.at(i, j);
            }
            let s = 2.0 * s / vnorm_sq;
            for i in k..n {
                *r.at_mut(i, j) -= s * v[i];
            }
        }
        // q <- q (I - 2 v v^T / v^T v)
        for i in 0..n {
            let mut s = 0.0;
            for j in k..n {
                s += q.at(i, j) * v[j];
            }
            let s = 2.0 * s / vnorm_sq;
            for j in k..n {
                *q.at_mut(i, j) -= s * v[j];
            }
        }
    }
    // Zero the strictly lower part (rounded garbage) and fix diagonal signs.
    for i in 0..n {
        for j in 0..i {
            *r.at_mut(i, j) = 0.0;
        }
    }
    for i in 0..n {
        if r.at(i, i) < 0.0 {
            for j in 0..n {
                *r.at_mut(i, j) = -r.at(i, j);
                *q.at_mut(j, i) = -q.at(j, i);
            }
        }
    }
    (q, r)
}

/// RQ decomposition `b = r * q` with `r` upper triangular, nonnegative
/// diagonal, and `q` orthogonal. Computed through a QR of the transpose with
/// rows and columns reversed.
pub fn rq_upper(b: &Matrix) -> (Matrix, Matrix) {
    assert_eq!(b.rows(), b.cols());
    let n = b.rows();
    // c = b^T J, i.e. c[i][j] = b[n-1-j][i]
    let c = Matrix::from_fn(n, n, |i, j| b.at(n - 1 - j, i));
    let (qc, rc) = qr_square(&c);
    // b = (J rc^T J)(J qc^T), both factors read back by index reversal.
    let r = Matrix::from_fn(n, n, |i, j| if j >= i { rc.at(n - 1 - j, n - 1 - i) } else { 0.0 });
    let q = Matrix::from_fn(n, n, |i, j| qc.at(j, n - 1 - i));
    (r, q)
}

/// Orthonormal basis of the complement of `w` in `R^dim(w)`, as the trailing
/// `dim-1` columns of the Householder reflector taking `w` to `±|w| e_1`.
pub fn orth_complement(w: &[f64]) -> Result<Matrix, LinalgError> {
    let r2 = w.len();
    let norm = norm2(w);
    if norm == 0.0 || !norm.is_finite() {
        return Err(LinalgError::ZeroVector);
    }
    if r2 == 1 {
        return Ok(Matrix::zeros(1, 0));
    }
    // v = w + sign(w_0) |w| e_0, H = I - 2 v v^T / v^T v
    let mut v = w.to_vec();
    let sgn = if w[0] >= 0.0 { 1.0 } else { -1.0 };
    v[0] += sgn * norm;
    let vnorm_sq = dot(&v, &v);
    let mut out = Matrix::zeros(r2, r2 - 1);
    for j in 1..r2 {
        let s = 2.0 * v[j] / vnorm_sq;
        for i in 0..r2 {
            let e = if i == j { 1.0 } else { 0.0 };
            *out.at_mut(i, j - 1) = e - s * v[i];
        }
    }
    Ok(out)
}

/// Unpivoted LDL^T factorization held as packed L (unit lower) and D.
struct Ldl {
    n: usize,
    l: Vec<f64>, // row-major lower triangle, unit diagonal implied
    d: Vec<f64>,
}

const PIVOT_MIN: f64 = 1e-14;

fn ldl_factor(k: &Matrix, reg: f64, pos_dim: usize) -> Result<Ldl, LinalgError> {
    let n = k.rows();
    assert_eq!(k.cols(), n);
    let mut l = vec![0.0; n * n];
    let mut d = vec![0.0; n];
    for j in 0..n {
        let shift = if j < pos_dim { reg } else { -reg };
        let mut dj = k.at(j, j) + shift;
        for p in 0..j {
            dj -= l[j * n + p] * l[j * n + p] * d[p];
        }
        if dj.abs() < PIVOT_MIN {
            return Err(LinalgError::SingularSystem { index: j, pivot: dj });
        }
        d[j] = dj;
        for i in (j + 1)..n {
            let mut v = k.at(i, j);
            for p in 0..j {
                v -= l[i * n + p] * l[j * n + p] * d[p];
            }
            l[i * n + j] = v / dj;
        }
    }
    Ok(Ldl { n, l, d })
}

impl Ldl {
    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x = rhs.to_vec();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.l[i * n + j] * x[j];
            }
        }
        for i in 0..n {
            x[i] /= self.d[i];
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                x[i] -= self.l[j * n + i] * x[j];
            }
        }
        x
    }
}

/// Multiply by `k` with the signed diagonal regularization applied.
fn regularized_matvec(k: &Matrix, reg: f64, pos_dim: usize, x: &[f64]) -> Vec<f64> {
    let mut y = k.matvec(x);
    for (i, yi) in y.iter_mut().enumerate() {
        let shift = if i < pos_dim { reg } else { -reg };
        *yi += shift * x[i];
    }
    y
}

/// Solve `(K + S) u = rhs` where `S` adds `+reg` to the first `pos_dim`
/// diagonal entries and `-reg` to the rest (the quasi-definite sign pattern).
/// One round of iterative refinement is applied.
pub fn ldl_solve(k: &Matrix, rhs: &[f64], reg: f64, pos_dim: usize) -> Result<Vec<f64>, LinalgError> {
    assert_eq!(k.rows(), rhs.len());
    let fac = ldl_factor(k, reg, pos_dim)?;
    let mut u = fac.solve(rhs);
    // One refinement pass against the regularized operator.
    let ku = regularized_matvec(k, reg, pos_dim, &u);
    let resid: Vec<f64> = rhs.iter().zip(&ku).map(|(r, v)| r - v).collect();
    let corr = fac.solve(&resid);
    for (ui, ci) in u.iter_mut().zip(&corr) {
        *ui += ci;
    }
    Ok(u)
}

/// Solve `K u = rhs` using the factorization of the regularized matrix as a
/// preconditioner: refinement residuals are taken against the unshifted `K`,
/// so the static shift does not bias the answer (it only stabilizes the
/// pivots).
pub fn ldl_solve_unshifted(
    k: &Matrix,
    rhs: &[f64],
    reg: f64,
    pos_dim: usize,
    passes: usize,
) -> Result<Vec<f64>, LinalgError> {
    assert_eq!(k.rows(), rhs.len());
    let fac = ldl_factor(k, reg, pos_dim)?;
    let mut u = fac.solve(rhs);
    for _ in 0..passes {
        let ku = k.matvec(&u);
        let resid: Vec<f64> = rhs.iter().zip(&ku).map(|(r, v)| r - v).collect();
        let corr = fac.solve(&resid);
        for (ui, ci) in u.iter_mut().zip(&corr) {
            *ui += ci;
        }
    }
    Ok(u)
}

/// Lower Cholesky factor of a symmetric PSD matrix, tolerating exact zero
/// tail pivots (used to turn small dense quadratic forms into factors).
pub fn cholesky_psd(a: &Matrix, jitter: f64) -> Result<Matrix, LinalgError> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut dj = a.at(j, j) + jitter;
        for p in 0..j {
            dj -= l.at(j, p) * l.at(j, p);
        }
        if dj < -1e-10 {
            return Err(LinalgError::SingularSystem { index: j, pivot: dj });
        }
        let dj = dj.max(0.0).sqrt();
        *l.at_mut(j, j) = dj;
        for i in (j + 1)..n {
            let mut v = a.at(i, j);
            for p in 0..j {
                v -= l.at(i, p) * l.at(j, p);
            }
            *l.at_mut(i, j) = if dj > 0.0 { v / dj } else { 0.0 };
        }
    }
    Ok(l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn ldl_identity() {
        let k = Matrix::identity(3);
        let u = ldl_solve(&k, &[1.0, 2.0, 3.0], 0.0, 3).unwrap();
        assert_close(&u, &[1.0, 2.0, 3.0], 1e-14);
    }

    #[test]
    fn ldl_diagonal() {
        let k = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 4.0]]);
        let u = ldl_solve(&k, &[2.0, 8.0], 0.0, 2).unwrap();
        assert_close(&u, &[1.0, 2.0], 1e-14);
    }

    #[test]
    fn ldl_two_by_two() {
        let k = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]);
        let u = ldl_solve(&k, &[1.0, 2.0], 0.0, 2).unwrap();
        assert_close(&u, &[1.0 / 11.0, 7.0 / 11.0], 1e-12);
    }

    #[test]
    fn ldl_singular_detected() {
        let k = Matrix::zeros(2, 2);
        let err = ldl_solve(&k, &[1.0, 1.0], 0.0, 2).unwrap_err();
        assert!(matches!(err, LinalgError::SingularSystem { .. }));
    }

    #[test]
    fn ldl_quasi_definite_with_regularization() {
        // [[1, 1], [1, -1]] with +/- reg keeps both pivots away from zero.
        let k = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, -1.0]]);
        let rhs = [3.0, -1.0];
        let u = ldl_solve(&k, &rhs, 1e-9, 1).unwrap();
        let ku = regularized_matvec(&k, 1e-9, 1, &u);
        for (r, v) in rhs.iter().zip(&ku) {
            assert!((r - v).abs() <= 1e-10 * (1.0 + norm_inf(&rhs)));
        }
    }

    #[test]
    fn ldl_random_well_conditioned_residuals() {
        let mut rng = crate::rng::StreamRng::new(7, 0);
        for trial in 0..1000 {
            let n = 1 + (trial % 8);
            // A = B B^T + 0.1 I is symmetric positive definite.
            let b = Matrix::from_fn(n, n, |_, _| rng.normal());
            let mut a = b.matmul(&b.transpose());
            for i in 0..n {
                *a.at_mut(i, i) += 0.1;
            }
            let rhs: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            let u = ldl_solve(&a, &rhs, 0.0, n).unwrap();
            let au = a.matvec(&u);
            let err = norm_inf(&sub(&rhs, &au));
            assert!(err <= 1e-10 * (1.0 + norm_inf(&rhs)), "residual {err}");
        }
    }

    #[test]
    fn rq_diagonal() {
        let b = Matrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]);
        let (r, q) = rq_upper(&b);
        assert!((r.at(0, 0) - 2.0).abs() < 1e-12 && (r.at(1, 1) - 3.0).abs() < 1e-12);
        assert!((q.at(0, 0) - 1.0).abs() < 1e-12 && (q.at(1, 1) - 1.0).abs() < 1e-12);
        assert!(q.at(0, 1).abs() < 1e-12 && r.at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn rq_rotation() {
        // 90 degree rotation: already orthogonal, so r should be I.
        let b = Matrix::from_rows(&[vec![0.0, -1.0], vec![1.0, 0.0]]);
        let (r, q) = rq_upper(&b);
        assert!((r.at(0, 0) - 1.0).abs() < 1e-12 && (r.at(1, 1) - 1.0).abs() < 1e-12);
        assert!(r.at(0, 1).abs() < 1e-12);
        let rq = r.matmul(&q);
        for i in 0..2 {
            for j in 0..2 {
                assert!((rq.at(i, j) - b.at(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rq_lower_triangular_input() {
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![-2.0, 1.0]]);
        let (r, q) = rq_upper(&b);
        let rq = r.matmul(&q);
        for i in 0..2 {
            for j in 0..2 {
                assert!((rq.at(i, j) - b.at(i, j)).abs() < 1e-12);
            }
        }
        assert_eq!(r.at(1, 0), 0.0);
        assert!(r.at(0, 0) >= 0.0 && r.at(1, 1) >= 0.0);
    }

    #[test]
    fn orth_complement_axis() {
        let m = orth_complement(&[1.0, 0.0, 0.0]).unwrap();
        assert_eq!((m.rows(), m.cols()), (3, 2));
        // Columns span {e2, e3}: first row must vanish.
        assert!(m.at(0, 0).abs() < 1e-12 && m.at(0, 1).abs() < 1e-12);
    }

    #[test]
    fn orth_complement_diagonal_direction() {
        let s = 1.0 / 2.0f64.sqrt();
        let m = orth_complement(&[s, s]).unwrap();
        assert_eq!((m.rows(), m.cols()), (2, 1));
        let c = m.col(0);
        let expected = [s, -s];
        let same = (c[0] - expected[0]).abs() < 1e-12 && (c[1] - expected[1]).abs() < 1e-12;
        let flipped = (c[0] + expected[0]).abs() < 1e-12 && (c[1] + expected[1]).abs() < 1e-12;
        assert!(same || flipped, "got {c:?}");
    }

    #[test]
    fn orth_complement_zero_vector_rejected() {
        assert_eq!(orth_complement(&[0.0, 0.0]).unwrap_err(), LinalgError::ZeroVector);
    }

    #[test]
    fn orth_complement_single_coordinate() {
        let m = orth_complement(&[2.5]).unwrap();
        assert_eq!((m.rows(), m.cols()), (1, 0));
    }

    proptest! {
        #[test]
        fn rq_reconstructs(entries in proptest::collection::vec(-10.0f64..10.0, 16)) {
            let b = Matrix::from_fn(4, 4, |i, j| entries[i * 4 + j]);
            let (r, q) = rq_upper(&b);
            let rq = r.matmul(&q);
            let scale = 1.0 + b.max_abs();
            for i in 0..4 {
                for j in 0..4 {
                    prop_assert!((rq.at(i, j) - b.at(i, j)).abs() <= 1e-12 * scale);
                    if j < i {
                        prop_assert!(r.at(i, j) == 0.0);
                    }
                }
                prop_assert!(r.at(i, i) >= 0.0);
            }
            // q^T q = I
            let qtq = q.transpose().matmul(&q);
            for i in 0..4 {
                for j in 0..4 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((qtq.at(i, j) - e).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn orth_complement_properties(entries in proptest::collection::vec(-5.0f64..5.0, 4)) {
            prop_assume!(norm2(&entries) > 1e-6);
            let m = orth_complement(&entries).unwrap();
            let mtm = m.transpose().matmul(&m);
            for i in 0..3 {
                for j in 0..3 {
                    let e = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((mtm.at(i, j) - e).abs() <= 1e-12);
                }
            }
            let mtw = m.tr_matvec(&entries);
            for v in mtw {
                prop_assert!(v.abs() <= 1e-12 * (1.0 + norm2(&entries)));
            }
        }
    }
}
