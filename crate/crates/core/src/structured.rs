//! The structured part `g`: a declarative composition of cost and constraint
//! atoms (linear cost, convex quadratic cost given by a factor, box,
//! nonnegativity, simplex, linear equalities/inequalities, l1 ball, and a
//! separable hinge budget). Atoms evaluate exactly and lower to one equality
//! block plus one inequality block in a lifted variable space for the QP
//! subproblems.

use thiserror::Error;

use crate::linalg::{dot, norm2, Matrix};
use crate::rng::StreamRng;

#[derive(Debug, Error, PartialEq)]
pub enum StructuredError {
    #[error("base point is infeasible for g")]
    InfeasibleBase,
}

#[derive(Debug, Clone)]
struct L1Ball {
    coords: Vec<usize>,
    radius: f64,
}

/// Budget constraint `a^T x_S + scale * a^T (x_S - kink)_+ <= limit` over a
/// coordinate subset, lowered with one epigraph variable per coordinate.
#[derive(Debug, Clone)]
struct HingeBudget {
    coords: Vec<usize>,
    lin_coeff: Vec<f64>,
    kink: Vec<f64>,
    scale: f64,
    limit: f64,
}

/// Extended-value convex function built from atoms; infinite values encode
/// the constraints.
#[derive(Debug, Clone)]
pub struct StructuredFunction {
    dim: usize,
    linear: Option<Vec<f64>>,
    quad_factor: Option<Matrix>,
    box_lower: Option<Vec<f64>>,
    box_upper: Option<Vec<f64>>,
    nonneg: Vec<usize>,
    simplex: Option<Vec<usize>>,
    equalities: Option<(Matrix, Vec<f64>)>,
    inequalities: Option<(Matrix, Vec<f64>)>,
    l1_ball: Option<L1Ball>,
    hinge_budget: Option<HingeBudget>,
}

pub const DEFAULT_FEAS_TOL: f64 = 1e-8;

impl StructuredFunction {
    pub fn new(dim: usize) -> Self {
        StructuredFunction {
            dim,
            linear: None,
            quad_factor: None,
            box_lower: None,
            box_upper: None,
            nonneg: Vec::new(),
            simplex: None,
            equalities: None,
            inequalities: None,
            l1_ball: None,
            hinge_budget: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn with_linear_cost(mut self, c: Vec<f64>) -> Self {
        assert_eq!(c.len(), self.dim);
        self.linear = Some(c);
        self
    }

    /// Quadratic cost `0.5 x^T (F F^T) x` given by the factor `F` (n x p).
    pub fn with_quadratic_cost(mut self, factor: Matrix) -> Self {
        assert_eq!(factor.rows(), self.dim);
        assert!(factor.is_finite());
        self.quad_factor = Some(factor);
        self
    }

    /// Box `lower <= x <= upper`; infinite entries leave a side open.
    pub fn with_box(mut self, lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), self.dim);
        assert_eq!(upper.len(), self.dim);
        self.box_lower = Some(lower);
        self.box_upper = Some(upper);
        self
    }

    pub fn with_nonneg(mut self, coords: Vec<usize>) -> Self {
        self.nonneg = coords;
        self
    }

    /// Probability simplex over a coordinate subset: sum = 1 and x >= 0 there.
    pub fn with_simplex(mut self, coords: Vec<usize>) -> Self {
        self.simplex = Some(coords);
        self
    }

    pub fn with_equalities(mut self, a: Matrix, b: Vec<f64>) -> Self {
        assert_eq!(a.cols(), self.dim);
        assert_eq!(a.rows(), b.len());
        self.equalities = Some((a, b));
        self
    }

    /// Rows `C x <= d`.
    pub fn with_inequalities(mut self, c: Matrix, d: Vec<f64>) -> Self {
        assert_eq!(c.cols(), self.dim);
        assert_eq!(c.rows(), d.len());
        self.inequalities = Some((c, d));
        self
    }

    pub fn with_l1_ball(mut self, coords: Vec<usize>, radius: f64) -> Self {
        assert!(radius >= 0.0);
        self.l1_ball = Some(L1Ball { coords, radius });
        self
    }

    pub fn with_hinge_budget(
        mut self,
        coords: Vec<usize>,
        lin_coeff: Vec<f64>,
        kink: Vec<f64>,
        scale: f64,
        limit: f64,
    ) -> Self {
        assert_eq!(coords.len(), lin_coeff.len());
        assert_eq!(coords.len(), kink.len());
        self.hinge_budget = Some(HingeBudget { coords, lin_coeff, kink, scale, limit });
        self
    }

    pub fn has_cost(&self) -> bool {
        self.linear.is_some() || self.quad_factor.is_some()
    }

    /// Cost part `c^T x + 0.5 |F^T x|^2` (no feasibility check).
    pub fn cost(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        if let Some(c) = &self.linear {
            v += dot(c, x);
        }
        if let Some(f) = &self.quad_factor {
            let fx = f.tr_matvec(x);
            v += 0.5 * dot(&fx, &fx);
        }
        v
    }

    /// Largest scaled constraint violation at `x`; feasible points give <= 0
    /// up to rounding.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim);
        let mut worst: f64 = 0.0;
        let mut push = |violation: f64, scale: f64| {
            worst = worst.max(violation / (1.0 + scale.abs()));
        };
        if let (Some(lo), Some(hi)) = (&self.box_lower, &self.box_upper) {
            for i in 0..self.dim {
                if lo[i].is_finite() {
                    push(lo[i] - x[i], lo[i]);
                }
                if hi[i].is_finite() {
                    push(x[i] - hi[i], hi[i]);
                }
            }
        }
        for &i in &self.nonneg {
            push(-x[i], 0.0);
        }
        if let Some(coords) = &self.simplex {
            let s: f64 = coords.iter().map(|&i| x[i]).sum();
            push((s - 1.0).abs(), 1.0);
            for &i in coords {
                push(-x[i], 0.0);
            }
        }
        if let Some((a, b)) = &self.equalities {
            for r in 0..a.rows() {
                push((dot(a.row(r), x) - b[r]).abs(), b[r]);
            }
        }
        if let Some((c, d)) = &self.inequalities {
            for r in 0..c.rows() {
                push(dot(c.row(r), x) - d[r], d[r]);
            }
        }
        if let Some(l1) = &self.l1_ball {
            let s: f64 = l1.coords.iter().map(|&i| x[i].abs()).sum();
            push(s - l1.radius, l1.radius);
        }
        if let Some(h) = &self.hinge_budget {
            let mut phi = 0.0;
            for (k, &i) in h.coords.iter().enumerate() {
                phi += h.lin_coeff[k] * x[i] + h.scale * h.lin_coeff[k] * (x[i] - h.kink[k]).max(0.0);
            }
            push(phi - h.limit, h.limit);
        }
        worst
    }

    /// `g(x)`: the cost if every constraint atom holds within `feas_tol`
    /// (scaled), `+inf` otherwise.
    pub fn eval(&self, x: &[f64], feas_tol: f64) -> f64 {
        if self.max_violation(x) > feas_tol {
            f64::INFINITY
        } else {
            self.cost(x)
        }
    }

    /// Equality rows of the original space (user equalities plus the simplex
    /// sum row), used to project probe directions onto the feasible affine
    /// hull.
    fn original_equality_rows(&self) -> Vec<Vec<f64>> {
        let mut rows = Vec::new();
        if let Some((a, _)) = &self.equalities {
            for r in 0..a.rows() {
                rows.push(a.row(r).to_vec());
            }
        }
        if let Some(coords) = &self.simplex {
            let mut row = vec![0.0; self.dim];
            for &i in coords {
                row[i] = 1.0;
            }
            rows.push(row);
        }
        rows
    }

    /// Sampling check of the subgradient inequality
    /// `g(u) >= g(x) + q^T (u - x)` at `probes` random feasible points; the
    /// returned value is the largest violation (a valid subgradient stays
    /// below ~1e-7 for exact data).
    pub fn subgradient_valid(
        &self,
        x: &[f64],
        q: &[f64],
        probes: usize,
        seed: u64,
    ) -> Result<f64, StructuredError> {
        let gx = self.eval(x, DEFAULT_FEAS_TOL);
        if !gx.is_finite() {
            return Err(StructuredError::InfeasibleBase);
        }
        // Orthonormalize the equality rows once.
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for row in self.original_equality_rows() {
            let mut r = row;
            for b in &basis {
                let c = dot(&r, b);
                for (ri, bi) in r.iter_mut().zip(b) {
                    *ri -= c * bi;
                }
            }
            let n = norm2(&r);
            if n > 1e-12 {
                basis.push(r.iter().map(|v| v / n).collect());
            }
        }
        let mut rng = StreamRng::new(seed, 0);
        let mut worst: f64 = f64::NEG_INFINITY;
        let mut found = 0;
        let mut attempts = 0;
        let scale = 1.0 + norm2(x);
        // Probe points are held essentially on the feasible set (up to the
        // base point's own slack), so boundary overshoot cannot manufacture
        // spurious violations of the subgradient inequality.
        let probe_tol = (1.05 * self.max_violation(x)).max(1e-12);
        while found < probes && attempts < 20 * probes + 100 {
            attempts += 1;
            let mut d = rng.normal_vec(self.dim);
            for b in &basis {
                let c = dot(&d, b);
                for (di, bi) in d.iter_mut().zip(b) {
                    *di -= c * bi;
                }
            }
            let dn = norm2(&d);
            if dn < 1e-12 {
                continue;
            }
            for di in d.iter_mut() {
                *di /= dn;
            }
            // Largest feasible step along d from x, found by bisection.
            let feasible_at = |t: f64| {
                let u: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
                self.max_violation(&u) <= probe_tol
            };
            let cap = 10.0 * scale;
            let mut lo = 0.0;
            let mut hi = cap;
            if !feasible_at(cap) {
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if feasible_at(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
            } else {
                lo = cap;
            }
            if lo <= 1e-12 {
                continue;
            }
            let t = rng.uniform() * lo;
            let u: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + t * di).collect();
            let gu = self.eval(&u, DEFAULT_FEAS_TOL);
            if !gu.is_finite() {
                continue;
            }
            let step: Vec<f64> = u.iter().zip(x).map(|(ui, xi)| ui - xi).collect();
            worst = worst.max(gx + dot(q, &step) - gu);
            found += 1;
        }
        Ok(if worst == f64::NEG_INFINITY { 0.0 } else { worst })
    }

    /// Lower every atom to one equality block and one inequality block over a
    /// lifted variable vector whose first `dim` coordinates are the original
    /// ones. With `include_l1_split` the l1 ball becomes a positive/negative
    /// split (`x_S = u - v`, `u, v >= 0`, `sum(u+v) <= radius`); without it
    /// the ball is enumerated as `2^|S|` sign-pattern rows, which is only
    /// sensible for very small subsets but needs no extra variables.
    pub fn canonicalize(&self, include_l1_split: bool) -> CanonicalPieces {
        let n = self.dim;
        let l1_coords: Vec<usize> = self.l1_ball.iter().flat_map(|b| b.coords.clone()).collect();
        let n_split = if include_l1_split { 2 * l1_coords.len() } else { 0 };
        let hinge_coords: Vec<usize> =
            self.hinge_budget.iter().flat_map(|h| h.coords.clone()).collect();
        let dim = n + n_split + hinge_coords.len();
        let split_base = n;
        let hinge_base = n + n_split;

        let mut eq_rows: Vec<Vec<f64>> = Vec::new();
        let mut eq_rhs: Vec<f64> = Vec::new();
        let mut ineq_rows: Vec<Vec<f64>> = Vec::new();
        let mut ineq_rhs: Vec<f64> = Vec::new();
        let unit = |i: usize, s: f64| {
            let mut row = vec![0.0; dim];
            row[i] = s;
            row
        };

        if let Some((a, b)) = &self.equalities {
            for r in 0..a.rows() {
                let mut row = vec![0.0; dim];
                row[..n].copy_from_slice(a.row(r));
                eq_rows.push(row);
                eq_rhs.push(b[r]);
            }
        }
        if let Some(coords) = &self.simplex {
            let mut row = vec![0.0; dim];
            for &i in coords {
                row[i] = 1.0;
            }
            eq_rows.push(row);
            eq_rhs.push(1.0);
            for &i in coords {
                ineq_rows.push(unit(i, -1.0));
                ineq_rhs.push(0.0);
            }
        }
        if let Some((c, d)) = &self.inequalities {
            for r in 0..c.rows() {
                let mut row = vec![0.0; dim];
                row[..n].copy_from_slice(c.row(r));
                ineq_rows.push(row);
                ineq_rhs.push(d[r]);
            }
        }
        if let (Some(lo), Some(hi)) = (&self.box_lower, &self.box_upper) {
            for i in 0..n {
                if lo[i].is_finite() {
                    ineq_rows.push(unit(i, -1.0));
                    ineq_rhs.push(-lo[i]);
                }
                if hi[i].is_finite() {
                    ineq_rows.push(unit(i, 1.0));
                    ineq_rhs.push(hi[i]);
                }
            }
        }
        for &i in &self.nonneg {
            ineq_rows.push(unit(i, -1.0));
            ineq_rhs.push(0.0);
        }
        if let Some(l1) = &self.l1_ball {
            if include_l1_split {
                // x_i = u - v with u, v >= 0 and a shared budget row.
                let mut budget = vec![0.0; dim];
                for (k, &i) in l1.coords.iter().enumerate() {
                    let (ui, vi) = (split_base + 2 * k, split_base + 2 * k + 1);
                    let mut link = vec![0.0; dim];
                    link[i] = 1.0;
                    link[ui] = -1.0;
                    link[vi] = 1.0;
                    eq_rows.push(link);
                    eq_rhs.push(0.0);
                    ineq_rows.push(unit(ui, -1.0));
                    ineq_rhs.push(0.0);
                    ineq_rows.push(unit(vi, -1.0));
                    ineq_rhs.push(0.0);
                    budget[ui] = 1.0;
                    budget[vi] = 1.0;
                }
                ineq_rows.push(budget);
                ineq_rhs.push(l1.radius);
            } else {
                let s = l1.coords.len();
                assert!(s <= 20, "sign enumeration of the l1 ball needs a small subset");
                for mask in 0..(1usize << s) {
                    let mut row = vec![0.0; dim];
                    for (k, &i) in l1.coords.iter().enumerate() {
                        row[i] = if mask >> k & 1 == 1 { 1.0 } else { -1.0 };
                    }
                    ineq_rows.push(row);
                    ineq_rhs.push(l1.radius);
                }
            }
        }
        if let Some(h) = &self.hinge_budget {
            let mut budget = vec![0.0; dim];
            for (k, &i) in h.coords.iter().enumerate() {
                let ei = hinge_base + k;
                ineq_rows.push(unit(ei, -1.0));
                ineq_rhs.push(0.0);
                let mut row = vec![0.0; dim];
                row[i] = 1.0;
                row[ei] = -1.0;
                ineq_rows.push(row);
                ineq_rhs.push(h.kink[k]);
                budget[i] = h.lin_coeff[k];
                budget[ei] = h.scale * h.lin_coeff[k];
            }
            ineq_rows.push(budget);
            ineq_rhs.push(h.limit);
        }

        let mut lin = vec![0.0; dim];
        if let Some(c) = &self.linear {
            lin[..n].copy_from_slice(c);
        }
        let quad_factor = self.quad_factor.as_ref().map(|f| {
            Matrix::from_fn(dim, f.cols(), |i, j| if i < n { f.at(i, j) } else { 0.0 })
        });

        CanonicalPieces {
            orig_dim: n,
            dim,
            lin,
            quad_factor,
            eq_a: Matrix::from_rows(&eq_rows),
            eq_b: eq_rhs,
            ineq_c: Matrix::from_rows(&ineq_rows),
            ineq_d: ineq_rhs,
            l1_split: if include_l1_split { l1_coords } else { Vec::new() },
            hinge_coords,
            hinge_kink: self.hinge_budget.as_ref().map(|h| h.kink.clone()).unwrap_or_default(),
        }
    }
}

/// Standard-form blocks of `g` over the lifted variables; the first
/// `orig_dim` coordinates of a lifted point are the original ones.
#[derive(Debug, Clone)]
pub struct CanonicalPieces {
    pub orig_dim: usize,
    pub dim: usize,
    pub lin: Vec<f64>,
    pub quad_factor: Option<Matrix>,
    pub eq_a: Matrix,
    pub eq_b: Vec<f64>,
    pub ineq_c: Matrix,
    pub ineq_d: Vec<f64>,
    l1_split: Vec<usize>,
    hinge_coords: Vec<usize>,
    hinge_kink: Vec<f64>,
}

impl CanonicalPieces {
    /// Embed an original-space point using the natural lift (positive and
    /// negative parts for the split variables, hinge values for the epigraph
    /// variables).
    pub fn lift(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.orig_dim);
        let mut u = vec![0.0; self.dim];
        u[..self.orig_dim].copy_from_slice(x);
        for (k, &i) in self.l1_split.iter().enumerate() {
            u[self.orig_dim + 2 * k] = x[i].max(0.0);
            u[self.orig_dim + 2 * k + 1] = (-x[i]).max(0.0);
        }
        let hinge_base = self.orig_dim + 2 * self.l1_split.len();
        for (k, &i) in self.hinge_coords.iter().enumerate() {
            u[hinge_base + k] = (x[i] - self.hinge_kink[k]).max(0.0);
        }
        u
    }

    /// Whether a lifted point satisfies both blocks within `tol` (scaled).
    pub fn feasible(&self, u: &[f64], tol: f64) -> bool {
        for r in 0..self.eq_a.rows() {
            let v = (dot(self.eq_a.row(r), u) - self.eq_b[r]).abs();
            if v > tol * (1.0 + self.eq_b[r].abs()) {
                return false;
            }
        }
        for r in 0..self.ineq_c.rows() {
            let v = dot(self.ineq_c.row(r), u) - self.ineq_d[r];
            if v > tol * (1.0 + self.ineq_d[r].abs()) {
                return false;
            }
        }
        true
    }
}
