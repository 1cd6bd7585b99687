//! Low-rank quasi-Newton curvature model `H = G G^T` maintained in product
//! form (a Fletcher-style update). `G` is split into a leading block `G1`
//! (first `r1` columns), which absorbs new secant pairs through a small R-Q
//! factorization, and a trailing block `G2`, which is rotated onto the
//! orthogonal complement of its projection of the step so stale curvature
//! along the step direction is removed. Positive semidefiniteness holds by
//! construction and the trace stays bounded across iterations.

use thiserror::Error;

use crate::linalg::{dot, norm2, orth_complement, rq_upper, Matrix};

#[derive(Debug, Error, PartialEq)]
pub enum CurvatureError {
    #[error("dimension mismatch: model dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// `H = G G^T` with `G` of shape `n x r`.
#[derive(Debug, Clone)]
pub struct CurvatureModel {
    g: Matrix,
    r1: usize,
    eps_abs: f64,
    eps_rel: f64,
}

impl CurvatureModel {
    /// Zero curvature of maximum rank `rank` (the first step of the solver is
    /// then a pure proximal-bundle step).
    pub fn new(dim: usize, rank: usize) -> Self {
        CurvatureModel { g: Matrix::zeros(dim, rank), r1: 0, eps_abs: 1e-8, eps_rel: 1e-3 }
    }

    /// Wrap an explicit factor; all columns are treated as the leading block.
    pub fn from_factor(g: Matrix) -> Self {
        let r1 = g.cols();
        CurvatureModel { g, r1, eps_abs: 1e-8, eps_rel: 1e-3 }
    }

    pub fn dim(&self) -> usize {
        self.g.rows()
    }

    pub fn rank(&self) -> usize {
        self.g.cols()
    }

    pub fn r1(&self) -> usize {
        self.r1
    }

    pub fn factor(&self) -> &Matrix {
        &self.g
    }

    /// `Tr(H) / n = |G|_F^2 / n`, the scale fed to the trust parameter.
    pub fn tau(&self) -> f64 {
        if self.g.rows() == 0 {
            return 0.0;
        }
        self.g.frob_norm_sq() / self.g.rows() as f64
    }

    /// `G^T x`, so quadratic forms with `H` never materialize the n-by-n
    /// matrix.
    pub fn apply_factor(&self, x: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        if x.len() != self.g.rows() {
            return Err(CurvatureError::DimensionMismatch { expected: self.g.rows(), got: x.len() });
        }
        Ok(self.g.tr_matvec(x))
    }

    /// `(H + lambda I) x` through the factor.
    pub fn apply_h_plus_lambda(&self, lambda: f64, x: &[f64]) -> Result<Vec<f64>, CurvatureError> {
        let w = self.apply_factor(x)?;
        let mut out = self.g.matvec(&w);
        for (o, xi) in out.iter_mut().zip(x) {
            *o += lambda * xi;
        }
        Ok(out)
    }

    /// `x^T (H + lambda I) x = |G^T x|^2 + lambda |x|^2`.
    pub fn quad_form_plus_lambda(&self, lambda: f64, x: &[f64]) -> Result<f64, CurvatureError> {
        let w = self.apply_factor(x)?;
        Ok(dot(&w, &w) + lambda * dot(x, x))
    }

    /// Absorb the secant pair `s = x_next - x`, `y = grad_next - grad`.
    ///
    /// When the curvature condition `s^T y > max(eps_abs, eps_rel |s||y|)`
    /// holds, the leading block grows by one column through the R-Q step and
    /// the trailing block is rotated off the step direction, so `H_new s = y`
    /// whenever no truncation occurs. When it fails but the trailing block
    /// still sees the step, only that block is updated (zero-padded back to
    /// full width); otherwise the factor is left untouched.
    pub fn update(&mut self, s: &[f64], y: &[f64]) -> Result<(), CurvatureError> {
        let n = self.g.rows();
        let r = self.g.cols();
        if s.len() != n || y.len() != n {
            return Err(CurvatureError::DimensionMismatch { expected: n, got: s.len().max(y.len()) });
        }
        if r == 0 {
            return Ok(());
        }
        let sty = dot(s, y);
        let s_norm = norm2(s);
        let y_norm = norm2(y);
        if sty > f64::max(self.eps_abs, self.eps_rel * s_norm * y_norm) {
            // Pick the largest leading width in [0, min(r, r1+1)] for which
            // the remaining gap along s exceeds the residual scale; width 0
            // always qualifies given the curvature condition above.
            let mut sel = 0;
            for cand in (0..=self.r1.saturating_add(1).min(r)).rev() {
                let g1 = self.g.col_slice(0, cand);
                let w1 = g1.tr_matvec(s);
                let lhs = sty - dot(&w1, &w1);
                let mut resid = y.to_vec();
                let g1w1 = g1.matvec(&w1);
                for (ri, vi) in resid.iter_mut().zip(&g1w1) {
                    *ri -= vi;
                }
                if lhs > self.eps_rel * s_norm * norm2(&resid) {
                    sel = cand;
                    break;
                }
            }
            let g1 = self.g.col_slice(0, sel);
            let w1 = g1.tr_matvec(s);
            let denom = (sty - dot(&w1, &w1)).sqrt();
            // B = [[1/denom, 0], [-w1/denom, I]]
            let mut b = Matrix::zeros(sel + 1, sel + 1);
            *b.at_mut(0, 0) = 1.0 / denom;
            for i in 0..sel {
                *b.at_mut(i + 1, 0) = -w1[i] / denom;
                *b.at_mut(i + 1, i + 1) = 1.0;
            }
            let (r_fac, _q) = rq_upper(&b);
            let y_col = Matrix::from_fn(n, 1, |i, _| y[i]);
            let g1_new = Matrix::hstack(&[&y_col, &g1]).matmul(&r_fac);
            if sel + 1 >= r {
                // Trailing block vanishes; keep the first r columns.
                self.g = g1_new.col_slice(0, r);
                self.r1 = r;
            } else {
                let g2 = self.g.col_slice(sel, r);
                let w2 = g2.tr_matvec(s);
                let g2_new = rotate_off(&g2, &w2);
                self.g = Matrix::hstack(&[&g1_new, &g2_new]);
                self.r1 = sel + 1;
            }
            debug_assert_eq!(self.g.cols(), r);
        } else {
            let g2 = self.g.col_slice(self.r1, r);
            let w2 = g2.tr_matvec(s);
            if norm2(&w2) > self.eps_abs {
                let g1 = self.g.col_slice(0, self.r1);
                let g2_new = rotate_off(&g2, &w2);
                let pad = Matrix::zeros(n, 1);
                self.g = Matrix::hstack(&[&g1, &g2_new, &pad]);
                debug_assert_eq!(self.g.cols(), r);
            }
            // Otherwise the factor is unchanged, bit for bit.
        }
        Ok(())
    }
}

/// `g2 * Q` where the columns of `Q` are orthonormal and orthogonal to `w2`,
/// removing the step direction from the trailing block. A zero projection
/// means there is nothing to remove; the leading columns of the identity are
/// then a valid (deterministic) basis.
fn rotate_off(g2: &Matrix, w2: &[f64]) -> Matrix {
    let r2 = g2.cols();
    if r2 == 0 {
        return g2.clone();
    }
    if norm2(w2) == 0.0 {
        return g2.col_slice(0, r2 - 1);
    }
    let q2 = orth_complement(w2).expect("nonzero projection");
    g2.matmul(&q2)
}
