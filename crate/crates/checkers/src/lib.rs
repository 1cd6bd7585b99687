//! Independent reference routines for the oscmin test suites. Everything in
//! here is deliberately brute force and self-contained (its own dense solve,
//! no shared code with the solver), so it can serve as an oracle for the
//! production paths.

/// Gaussian elimination with partial pivoting. Returns `None` on a
/// (numerically) singular system.
pub fn gauss_solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = a.len();
    if n == 0 {
        return Some(Vec::new());
    }
    for row in &a {
        if row.len() != n {
            return None;
        }
    }
    for col in 0..n {
        let (pivot_row, pivot_val) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.partial_cmp(&y.1).unwrap())?;
        if pivot_val < 1e-12 {
            return None;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for r in (col + 1)..n {
            let factor = a[r][col] / a[col][col];
            if factor != 0.0 {
                for c in col..n {
                    a[r][c] -= factor * a[col][c];
                }
                b[r] -= factor * b[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut v = b[r];
        for c in (r + 1)..n {
            v -= a[r][c] * x[c];
        }
        x[r] = v / a[r][r];
    }
    Some(x)
}

/// Solution of a convex QP found by exhaustive enumeration of active sets.
#[derive(Debug, Clone)]
pub struct ActiveSetSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub active: Vec<usize>,
}

fn qp_objective(p: &[Vec<f64>], c: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    let mut quad = 0.0;
    for i in 0..n {
        for j in 0..n {
            quad += x[i] * p[i][j] * x[j];
        }
    }
    0.5 * quad + c.iter().zip(x).map(|(ci, xi)| ci * xi).sum::<f64>()
}

/// Minimize `0.5 x^T P x + c^T x` over `Ax = b`, `Cx <= d` by solving the
/// KKT system of every subset of inequality rows treated as active. Only
/// sensible for a handful of rows; intended as a test oracle. Returns `None`
/// when no subset yields a feasible KKT point (infeasible or unbounded
/// problems).
pub fn active_set_qp(
    p: &[Vec<f64>],
    c: &[f64],
    eq_a: &[Vec<f64>],
    eq_b: &[f64],
    ineq_c: &[Vec<f64>],
    ineq_d: &[f64],
    tol: f64,
) -> Option<ActiveSetSolution> {
    let n = c.len();
    let me = eq_b.len();
    let mi = ineq_d.len();
    assert!(mi <= 20, "active-set enumeration is exponential in the rows");
    let mut best: Option<ActiveSetSolution> = None;
    for mask in 0..(1usize << mi) {
        let active: Vec<usize> = (0..mi).filter(|i| mask >> i & 1 == 1).collect();
        let na = active.len();
        let dim = n + me + na;
        let mut k = vec![vec![0.0; dim]; dim];
        let mut rhs = vec![0.0; dim];
        for i in 0..n {
            for j in 0..n {
                k[i][j] = p[i][j];
            }
            rhs[i] = -c[i];
        }
        for (r, row) in eq_a.iter().enumerate() {
            for j in 0..n {
                k[n + r][j] = row[j];
                k[j][n + r] = row[j];
            }
            rhs[n + r] = eq_b[r];
        }
        for (idx, &r) in active.iter().enumerate() {
            for j in 0..n {
                k[n + me + idx][j] = ineq_c[r][j];
                k[j][n + me + idx] = ineq_c[r][j];
            }
            rhs[n + me + idx] = ineq_d[r];
        }
        let Some(u) = gauss_solve(k, rhs) else { continue };
        let x = &u[..n];
        // Multipliers of the active rows must be nonnegative.
        if u[n + me..].iter().any(|&z| z < -tol) {
            continue;
        }
        // Primal feasibility of every row.
        let feasible = (0..mi).all(|r| {
            let lhs: f64 = ineq_c[r].iter().zip(x).map(|(a, b)| a * b).sum();
            lhs <= ineq_d[r] + tol * (1.0 + ineq_d[r].abs())
        }) && (0..me).all(|r| {
            let lhs: f64 = eq_a[r].iter().zip(x).map(|(a, b)| a * b).sum();
            (lhs - eq_b[r]).abs() <= tol * (1.0 + eq_b[r].abs())
        });
        if !feasible {
            continue;
        }
        let obj = qp_objective(p, c, x);
        if best.as_ref().map_or(true, |b| obj < b.objective - 1e-14) {
            best = Some(ActiveSetSolution { x: x.to_vec(), objective: obj, active });
        }
    }
    best
}

/// Euclidean projection onto the probability simplex by the sorted
/// threshold rule.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|vi| (vi - theta).max(0.0)).collect()
}

/// CVaR and EVaR of a loss sample by two-stage dense grid search over the
/// scalarization variable.
pub fn risk_grid(losses: &[f64], eta: f64) -> (f64, f64) {
    let n = losses.len() as f64;
    let cvar_obj = |alpha: f64| {
        alpha + losses.iter().map(|l| (l - alpha).max(0.0)).sum::<f64>() / ((1.0 - eta) * n)
    };
    let max_l = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_l = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let evar_obj = |alpha: f64| {
        let s: f64 = losses.iter().map(|l| ((l - max_l) / alpha).exp()).sum::<f64>() / n;
        max_l + alpha * s.ln() - alpha * (1.0 - eta).ln()
    };
    let refine = |f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64| {
        let mut best = (f(lo), lo);
        for _stage in 0..6 {
            let steps = 400;
            let h = (hi - lo) / steps as f64;
            best = (f(lo), lo);
            for i in 0..=steps {
                let a = lo + i as f64 * h;
                let v = f(a);
                if v < best.0 {
                    best = (v, a);
                }
            }
            lo = best.1 - 2.0 * h;
            hi = best.1 + 2.0 * h;
        }
        best.0
    };
    let spread = (max_l - min_l).max(1e-9);
    let cvar = refine(&cvar_obj, min_l - 0.1 * spread, max_l + 0.1 * spread);
    let mut hi = spread.max(1.0);
    while hi < 1e10 && evar_obj(2.0 * hi) < evar_obj(hi) {
        hi *= 2.0;
    }
    let evar = refine(&evar_obj, 1e-9 * spread, 2.0 * hi);
    (cvar, evar)
}

/// Minimize a convex function over the 3-point probability simplex by a
/// refining grid over the first two barycentric coordinates.
pub fn grid_min_simplex3(f: &dyn Fn(&[f64]) -> f64, stages: usize) -> (Vec<f64>, f64) {
    let mut lo = [0.0f64, 0.0];
    let mut hi = [1.0f64, 1.0];
    let mut best = (f(&[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]), vec![1.0 / 3.0; 3]);
    for _ in 0..stages {
        let steps = 60;
        for i in 0..=steps {
            let x1 = lo[0] + (hi[0] - lo[0]) * i as f64 / steps as f64;
            for j in 0..=steps {
                let x2 = lo[1] + (hi[1] - lo[1]) * j as f64 / steps as f64;
                let x3 = 1.0 - x1 - x2;
                if !(0.0..=1.0).contains(&x3) || !(0.0..=1.0).contains(&x1) || !(0.0..=1.0).contains(&x2) {
                    continue;
                }
                let x = vec![x1, x2, x3];
                let v = f(&x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
        let hx = (hi[0] - lo[0]) / steps as f64;
        let hy = (hi[1] - lo[1]) / steps as f64;
        lo = [(best.1[0] - 2.0 * hx).max(0.0), (best.1[1] - 2.0 * hy).max(0.0)];
        hi = [(best.1[0] + 2.0 * hx).min(1.0), (best.1[1] + 2.0 * hy).min(1.0)];
    }
    (best.1, best.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_small_system() {
        let x = gauss_solve(vec![vec![2.0, 1.0], vec![1.0, 3.0]], vec![3.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
        assert!(gauss_solve(vec![vec![1.0, 1.0], vec![2.0, 2.0]], vec![1.0, 2.0]).is_none());
    }

    #[test]
    fn active_set_projection() {
        // min 0.5|x - (2, 0)|^2 over the simplex: (1, 0).
        let p = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let c = vec![-2.0, 0.0];
        let eq = vec![vec![1.0, 1.0]];
        let sol = active_set_qp(
            &p,
            &c,
            &eq,
            &[1.0],
            &[vec![-1.0, 0.0], vec![0.0, -1.0]],
            &[0.0, 0.0],
            1e-9,
        )
        .unwrap();
        assert!((sol.x[0] - 1.0).abs() < 1e-10 && sol.x[1].abs() < 1e-10);
    }

    #[test]
    fn simplex_projection_known_values() {
        let x = project_simplex(&[0.5, 0.5]);
        assert!((x[0] - 0.5).abs() < 1e-15);
        let x = project_simplex(&[2.0, 0.0]);
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15);
        let x = project_simplex(&[0.3, 0.3, 0.1]);
        let s: f64 = x.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn risk_grid_small_sample() {
        let (cvar, _evar) = risk_grid(&[1.0, 2.0, 3.0, 4.0], 0.5);
        assert!((cvar - 3.5).abs() < 1e-6);
    }

    #[test]
    fn grid_min_quadratic_on_simplex() {
        let f = |x: &[f64]| (x[0] - 0.5f64).powi(2) + (x[1] - 0.3f64).powi(2) + (x[2] - 0.2f64).powi(2);
        let (x, _v) = grid_min_simplex3(&f, 6);
        assert!((x[0] - 0.5).abs() < 1e-4 && (x[1] - 0.3).abs() < 1e-4);
    }
}
