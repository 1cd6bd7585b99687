//! The outer solver loop: build the piecewise-affine model plus curvature
//! quadratic, minimize it (plus `g` and a proximal trust penalty) with the QP
//! backend, recover a subgradient of `g` from the epigraph duals, run the
//! chord line search, adapt the trust weight, and track gap and residual
//! stopping tests.

use std::time::Instant;

use thiserror::Error;

use crate::bundle::{Bundle, BundlePiece};
use crate::curvature::{CurvatureError, CurvatureModel};
use crate::linalg::{dot, norm2, Matrix};
use crate::oracle::{Oracle, OracleError};
use crate::qp::{self, QpProblem, QpStatus};
use crate::structured::StructuredFunction;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("starting point is infeasible (f or g is infinite there)")]
    InfeasibleStart,
    #[error("oracle failure: {0}")]
    Oracle(#[from] OracleError),
    #[error("curvature model failure: {0}")]
    Curvature(#[from] CurvatureError),
    #[error("QP backend failure: {0}")]
    Qp(#[from] qp::QpError),
    #[error("subproblem did not reach an optimal point ({status:?}) while {context}")]
    SubproblemFailed { status: QpStatus, context: &'static str },
    #[error("line search exhausted its halving budget")]
    LineSearchStalled,
    #[error("epigraph dual weights sum to {sum}, expected 1")]
    DualSumMismatch { sum: f64 },
}

/// All solver knobs with their defaults.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub memory: usize,
    pub rank: usize,
    /// Line search sufficient-decrease fraction.
    pub alpha: f64,
    /// Line search backtracking factor.
    pub beta: f64,
    pub tau_min: f64,
    pub gamma_dec: f64,
    pub gamma_inc: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub mu0: f64,
    pub eps_gap_abs: f64,
    pub eps_gap_rel: f64,
    pub eps_res_abs: f64,
    pub eps_res_rel: f64,
    pub max_iters: usize,
    /// Lower bounds are evaluated every this many iterations (and at the end).
    pub bound_cadence: usize,
    pub max_halvings: usize,
    /// Strong-convexity modulus for the model; leave 0 unless the oracle
    /// function is known to be strongly convex.
    pub strong_convexity: f64,
    /// Box known to contain the oracle domain, added to the model.
    pub model_box: Option<(Vec<f64>, Vec<f64>)>,
    /// Known constant lower bound on the oracle function.
    pub model_floor: Option<f64>,
    /// Widen the absolute gap tolerance by the sampling error measured with
    /// the oracle's validation twin.
    pub use_validation: bool,
    /// Keep per-iteration diagnostic snapshots in the report.
    pub collect_trace: bool,
    pub qp_tol: f64,
    pub qp_max_iters: usize,
    pub feas_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            memory: 20,
            rank: 20,
            alpha: 0.05,
            beta: 0.5,
            tau_min: 1e-3,
            gamma_dec: 0.8,
            gamma_inc: 1.1,
            mu_min: 1e-4,
            mu_max: 1e5,
            mu0: 1.0,
            eps_gap_abs: 1e-4,
            eps_gap_rel: 1e-3,
            eps_res_abs: 1e-4,
            eps_res_rel: 1e-3,
            max_iters: 200,
            bound_cadence: 10,
            max_halvings: 60,
            strong_convexity: 0.0,
            model_box: None,
            model_floor: None,
            use_validation: false,
            collect_trace: false,
            qp_tol: qp::DEFAULT_TOL,
            qp_max_iters: qp::DEFAULT_MAX_ITERS,
            feas_tol: crate::structured::DEFAULT_FEAS_TOL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    GapConverged,
    ResidualConverged,
    MaxIters,
    LineSearchStalled,
}

/// One row of the per-iteration log. Row `k` describes iterate `x^k`; the
/// step fields (`t`, `f_evals`, ...) describe the step that produced it, so
/// they are zero/empty on row 0.
#[derive(Debug, Clone)]
pub struct IterRecord {
    pub k: usize,
    pub f: f64,
    pub g: f64,
    pub h: f64,
    /// Best lower bound known when the row was written (`-inf` before any
    /// finite bound exists).
    pub lower_bound: f64,
    pub gap: f64,
    /// Present only for undamped steps.
    pub rms_residual: Option<f64>,
    pub t: f64,
    pub lambda: f64,
    pub mu: f64,
    pub r1: usize,
    /// Oracle value calls made during this iteration.
    pub f_evals: u64,
    pub wall_time_s: f64,
}

/// Per-iteration diagnostics kept when `collect_trace` is set.
#[derive(Debug, Clone)]
pub struct TraceRecord {
    pub k: usize,
    pub x: Vec<f64>,
    pub x_half: Vec<f64>,
    pub x_next: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_floor: f64,
    pub z_half: f64,
    pub piece_values_at_half: Vec<f64>,
    pub v_norm: f64,
    pub quad: f64,
    pub grad_dot_v: f64,
    pub g_k: f64,
    pub g_half: f64,
    pub h_k: f64,
    pub t: f64,
    pub lambda: f64,
    pub tau_next: f64,
    pub q: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub h: f64,
    pub lower_bound: f64,
    pub records: Vec<IterRecord>,
    pub trace: Vec<TraceRecord>,
    pub f_value_calls: u64,
    pub f_grad_calls: u64,
    pub wall_time_s: f64,
}

impl SolveReport {
    pub fn gap(&self) -> f64 {
        self.h - self.lower_bound
    }

    pub fn iters(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

/// Result of the tentative-step QP.
#[derive(Debug, Clone)]
pub struct TentativeStep {
    /// Minimizer restricted to the original coordinates.
    pub x_half: Vec<f64>,
    /// Optimal epigraph scalar (the model value at `x_half`).
    pub z_half: f64,
    /// Dual weights of the tangent-plane rows, oldest piece first.
    pub gamma: Vec<f64>,
    /// Dual weight of the floor row, when the model has a floor.
    pub gamma_floor: f64,
    /// Normal-cone contribution of the model box rows (zero without a box).
    pub model_normal: Vec<f64>,
    pub qp_iterations: usize,
}

struct Subproblem {
    qp: QpProblem,
    orig_dim: usize,
    z_index: usize,
    /// Inequality row range holding the tangent-plane rows (piece order).
    piece_rows: std::ops::Range<usize>,
    floor_row: Option<usize>,
    /// `(row, coord, sign)` for model box rows: sign +1 for upper bounds.
    box_rows: Vec<(usize, usize, f64)>,
}

/// Build the QP for `min z + g(x) [+ curvature/trust quadratic]` subject to
/// the epigraph rows of the model and the canonical atoms of `g`.
fn assemble(
    bundle: &Bundle,
    g: &StructuredFunction,
    curvature: Option<(&CurvatureModel, f64, &[f64])>,
) -> Result<Subproblem, SolveError> {
    let n = g.dim();
    assert_eq!(bundle.dim(), n);
    let canon = g.canonicalize(true);
    let d = canon.dim;
    let z_index = d;
    let total = d + 1;

    let pad = |row: &[f64], z_coeff: f64| {
        let mut out = vec![0.0; total];
        out[..row.len()].copy_from_slice(row);
        out[z_index] = z_coeff;
        out
    };

    let mut eq_rows = Vec::with_capacity(canon.eq_a.rows());
    for r in 0..canon.eq_a.rows() {
        eq_rows.push(pad(canon.eq_a.row(r), 0.0));
    }
    let eq_b = canon.eq_b.clone();

    let mut ineq_rows = Vec::new();
    let mut ineq_d = Vec::new();
    for r in 0..canon.ineq_c.rows() {
        ineq_rows.push(pad(canon.ineq_c.row(r), 0.0));
        ineq_d.push(canon.ineq_d[r]);
    }
    let epigraph = bundle.epigraph_rows().map_err(|_| SolveError::SubproblemFailed {
        status: QpStatus::Infeasible,
        context: "assembling an empty model",
    })?;
    let n_pieces = bundle.len();
    let piece_start = ineq_rows.len();
    for row in &epigraph {
        // z >= slope^T x + offset  <=>  slope^T x - z <= -offset
        ineq_rows.push(pad(&row.slope, -1.0));
        ineq_d.push(-row.offset);
    }
    let piece_rows = piece_start..piece_start + n_pieces;
    let floor_row = (epigraph.len() > n_pieces).then(|| piece_start + n_pieces);

    let mut box_rows = Vec::new();
    if let Some((lower, upper)) = bundle.box_bounds() {
        for i in 0..n {
            if lower[i].is_finite() {
                let mut row = vec![0.0; total];
                row[i] = -1.0;
                box_rows.push((ineq_rows.len(), i, -1.0));
                ineq_rows.push(row);
                ineq_d.push(-lower[i]);
            }
            if upper[i].is_finite() {
                let mut row = vec![0.0; total];
                row[i] = 1.0;
                box_rows.push((ineq_rows.len(), i, 1.0));
                ineq_rows.push(row);
                ineq_d.push(upper[i]);
            }
        }
    }

    // Objective: z + g cost (+ model quadratic rho/2 |x|^2)
    // (+ 0.5 |G^T (x - x_k)|^2 + lambda/2 |x - x_k|^2 when curvature is given).
    let mut lin = vec![0.0; total];
    lin[..d].copy_from_slice(&canon.lin);
    lin[z_index] = 1.0;
    let mut factor_cols: Vec<Vec<f64>> = Vec::new();
    let push_block = |cols: &mut Vec<Vec<f64>>, m: &Matrix| {
        for j in 0..m.cols() {
            let mut col = vec![0.0; total];
            for i in 0..m.rows() {
                col[i] = m.at(i, j);
            }
            cols.push(col);
        }
    };
    if let Some(f) = &canon.quad_factor {
        push_block(&mut factor_cols, f);
    }
    if bundle.rho() > 0.0 {
        let sq = bundle.rho().sqrt();
        for i in 0..n {
            let mut col = vec![0.0; total];
            col[i] = sq;
            factor_cols.push(col);
        }
    }
    if let Some((model, lambda, x_k)) = curvature {
        push_block(&mut factor_cols, model.factor());
        let sql = lambda.sqrt();
        for i in 0..n {
            let mut col = vec![0.0; total];
            col[i] = sql;
            factor_cols.push(col);
        }
        // Linear part of 0.5 (x - x_k)^T (H + lambda I) (x - x_k).
        let shift = model.apply_h_plus_lambda(lambda, x_k)?;
        for i in 0..n {
            lin[i] -= shift[i];
        }
    }
    let quad_factor = if factor_cols.is_empty() {
        None
    } else {
        let p = factor_cols.len();
        Some(Matrix::from_fn(total, p, |i, j| factor_cols[j][i]))
    };

    Ok(Subproblem {
        qp: QpProblem {
            quad_factor,
            lin,
            eq_a: if eq_rows.is_empty() { Matrix::zeros(0, total) } else { Matrix::from_rows(&eq_rows) },
            eq_b,
            ineq_c: Matrix::from_rows(&ineq_rows),
            ineq_d,
        },
        orig_dim: n,
        z_index,
        piece_rows,
        floor_row,
        box_rows,
    })
}

/// Minimize the model + `g` + trust quadratic around `x_k`; returns the
/// tentative point together with the epigraph dual weights needed for
/// subgradient recovery.
pub fn tentative_step(
    bundle: &Bundle,
    curvature: &CurvatureModel,
    g: &StructuredFunction,
    x_k: &[f64],
    lambda: f64,
    qp_tol: f64,
    qp_max_iters: usize,
) -> Result<TentativeStep, SolveError> {
    assert!(lambda > 0.0, "trust weight must be positive");
    let sub = assemble(bundle, g, Some((curvature, lambda, x_k)))?;
    let sol = qp::solve(&sub.qp, qp_tol, qp_max_iters)?;
    if sol.status != QpStatus::Optimal {
        if std::env::var_os("OSCMIN_DEBUG").is_some() {
            eprintln!(
                "tentative QP failed: status {:?} it {} prim {:.3e} dual {:.3e} comp {:.3e} lambda {lambda:.3e}",
                sol.status, sol.iterations, sol.primal_residual, sol.dual_residual, sol.comp_residual
            );
        }
        return Err(SolveError::SubproblemFailed { status: sol.status, context: "computing the tentative step" });
    }
    let gamma: Vec<f64> = sub.piece_rows.clone().map(|r| sol.ineq_duals[r]).collect();
    let gamma_floor = sub.floor_row.map_or(0.0, |r| sol.ineq_duals[r]);
    let mut model_normal = vec![0.0; sub.orig_dim];
    for &(row, coord, sign) in &sub.box_rows {
        model_normal[coord] += sign * sol.ineq_duals[row];
    }
    Ok(TentativeStep {
        x_half: sol.x[..sub.orig_dim].to_vec(),
        z_half: sol.x[sub.z_index],
        gamma,
        gamma_floor,
        model_normal,
        qp_iterations: sol.iterations,
    })
}

/// `inf_x model(x) + g(x)` — a lower bound on the optimum; `-inf` when the
/// problem is unbounded below (or the bound could not be certified).
pub fn lower_bound(
    bundle: &Bundle,
    g: &StructuredFunction,
    qp_tol: f64,
    qp_max_iters: usize,
) -> Result<f64, SolveError> {
    let sub = assemble(bundle, g, None)?;
    let sol = qp::solve(&sub.qp, qp_tol, qp_max_iters)?;
    match sol.status {
        QpStatus::Optimal => Ok(sol.objective),
        QpStatus::Unbounded | QpStatus::MaxIters => Ok(f64::NEG_INFINITY),
        QpStatus::Infeasible => Err(SolveError::SubproblemFailed {
            status: QpStatus::Infeasible,
            context: "computing the lower bound (the atoms of g look inconsistent)",
        }),
    }
}

/// The specific subgradient of `g` at the tentative point implied by the
/// subproblem optimality conditions: `-sum_i gamma_i grad_i - (H + lambda I) v`.
/// The weights must lie on the unit simplex up to QP accuracy.
pub fn recover_subgradient(
    gamma: &[f64],
    bundle: &Bundle,
    curvature: &CurvatureModel,
    lambda: f64,
    v: &[f64],
) -> Result<Vec<f64>, SolveError> {
    recover_with_extras(gamma, 0.0, None, None, bundle, curvature, lambda, v)
}

#[allow(clippy::too_many_arguments)]
fn recover_with_extras(
    gamma: &[f64],
    gamma_floor: f64,
    model_normal: Option<&[f64]>,
    x_half: Option<&[f64]>,
    bundle: &Bundle,
    curvature: &CurvatureModel,
    lambda: f64,
    v: &[f64],
) -> Result<Vec<f64>, SolveError> {
    let sum: f64 = gamma.iter().sum::<f64>() + gamma_floor;
    if (sum - 1.0).abs() > 1e-6 {
        return Err(SolveError::DualSumMismatch { sum });
    }
    let n = bundle.dim();
    let rho = bundle.rho();
    let mut q = vec![0.0; n];
    for (p, &w) in bundle.pieces().zip(gamma) {
        for i in 0..n {
            let slope = p.gradient[i] - rho * p.anchor[i];
            q[i] -= w * slope;
        }
    }
    if rho > 0.0 {
        let xh = x_half.expect("x_half required when the model carries a quadratic");
        for i in 0..n {
            q[i] -= rho * xh[i];
        }
    }
    if let Some(normal) = model_normal {
        for i in 0..n {
            q[i] -= normal[i];
        }
    }
    let hv = curvature.apply_h_plus_lambda(lambda, v)?;
    for i in 0..n {
        q[i] -= hv[i];
    }
    Ok(q)
}

#[derive(Debug, Clone, Copy)]
pub struct LineSearchResult {
    pub t: f64,
    pub f_new: f64,
    pub value_calls: u64,
    pub halvings: usize,
}

/// Backtracking search on `phi(t) = f(x_k + t v) + t g(x_half) + (1-t) g(x_k)`
/// (the chord over `g`, so `g` is never re-evaluated): accept the first
/// `t = beta^j` with `phi(t) <= h_k - (alpha t / 2) quad`. A `+inf` trial
/// value simply fails the test and backtracking continues.
#[allow(clippy::too_many_arguments)]
pub fn line_search(
    oracle: &Oracle,
    x_k: &[f64],
    x_half: &[f64],
    g_k: f64,
    g_half: f64,
    h_k: f64,
    quad: f64,
    alpha: f64,
    beta: f64,
    max_halvings: usize,
) -> Result<LineSearchResult, SolveError> {
    let v: Vec<f64> = x_half.iter().zip(x_k).map(|(a, b)| a - b).collect();
    let mut t = 1.0;
    let mut calls = 0;
    for j in 0..=max_halvings {
        let trial: Vec<f64> = if j == 0 {
            x_half.to_vec()
        } else {
            x_k.iter().zip(&v).map(|(xi, vi)| xi + t * vi).collect()
        };
        let f_trial = oracle.value(&trial)?;
        calls += 1;
        let phi = f_trial + t * g_half + (1.0 - t) * g_k;
        if phi <= h_k - 0.5 * alpha * t * quad {
            return Ok(LineSearchResult { t, f_new: f_trial, value_calls: calls, halvings: j });
        }
        t *= beta;
    }
    Err(SolveError::LineSearchStalled)
}

/// Trust weight update: relax after an undamped step, tighten after a damped
/// one, and rescale by the curvature trace.
pub fn trust_update(mu: f64, t: f64, tau_next: f64, cfg: &SolverConfig) -> (f64, f64) {
    let mu_next = if t == 1.0 {
        (cfg.gamma_dec * mu).max(cfg.mu_min)
    } else {
        (cfg.gamma_inc * mu).min(cfg.mu_max)
    };
    (mu_next, mu_next * (tau_next + cfg.tau_min))
}

/// Run the full solver from `x0` (which must be feasible for both parts).
pub fn solve(
    oracle: &Oracle,
    g: &StructuredFunction,
    x0: &[f64],
    config: &SolverConfig,
) -> Result<SolveReport, SolveError> {
    let n = oracle.dim();
    assert_eq!(g.dim(), n);
    assert_eq!(x0.len(), n);
    let started = Instant::now();

    let first = oracle.evaluate(x0)?;
    if !first.value.is_finite() {
        return Err(SolveError::InfeasibleStart);
    }
    let g0 = g.eval(x0, config.feas_tol);
    if !g0.is_finite() {
        return Err(SolveError::InfeasibleStart);
    }

    let mut bundle = Bundle::new(n, config.memory);
    if config.strong_convexity > 0.0 {
        bundle = bundle.with_strong_convexity(config.strong_convexity);
    }
    if let Some((lo, hi)) = &config.model_box {
        bundle = bundle.with_box(lo.clone(), hi.clone());
    }
    if let Some(floor) = config.model_floor {
        bundle = bundle.with_floor(floor);
    }
    let mut curv = CurvatureModel::new(n, config.rank);

    let mut x_k = x0.to_vec();
    let mut f_k = first.value;
    let mut grad_k = first.gradient.expect("finite value carries a gradient");
    let mut g_k = g0;
    let mut h_k = f_k + g_k;
    let mut mu = config.mu0;
    let mut lambda = config.mu0 * config.tau_min;
    let mut l_best = f64::NEG_INFINITY;

    let mut records: Vec<IterRecord> = Vec::new();
    let mut trace: Vec<TraceRecord> = Vec::new();

    records.push(IterRecord {
        k: 0,
        f: f_k,
        g: g_k,
        h: h_k,
        lower_bound: l_best,
        gap: f64::INFINITY,
        rms_residual: None,
        t: 0.0,
        lambda,
        mu,
        r1: curv.r1(),
        f_evals: 1,
        wall_time_s: started.elapsed().as_secs_f64(),
    });

    let mut status = SolveStatus::MaxIters;
    // Set when the loop exits with a final iterate whose tangent plane has
    // not been folded into the model yet.
    let mut push_final_piece = true;

    'outer: for k in 0..config.max_iters {
        bundle.push(BundlePiece { anchor: x_k.clone(), value: f_k, gradient: grad_k.clone() });
        let calls_at_start = oracle.value_calls();

        // Inner loop: when a step yields no strict decrease (the tentative
        // point crossed a kink of a nonsmooth oracle, or the decrease
        // requirement drowned in rounding), take a null step — add the
        // tentative point's cut to the model, tighten trust, and retry —
        // instead of recording a wasted move.
        let mut null_steps = 0usize;
        let (step, v, quad, g_half, grad_dot_v, ls, x_next, g_next, h_next) = loop {
            let mut step =
                tentative_step(&bundle, &curv, g, &x_k, lambda, config.qp_tol, config.qp_max_iters)?;
            // A tentative point within QP accuracy of the iterate is a fixed
            // point; snap it exactly so the line search and residual recovery
            // see a true zero step instead of solver noise.
            let mut v: Vec<f64> = step.x_half.iter().zip(&x_k).map(|(a, b)| a - b).collect();
            let fixed_point = norm2(&v) <= 1e-9 * (1.0 + norm2(&x_k));
            if fixed_point {
                step.x_half = x_k.clone();
                v = vec![0.0; n];
            }
            let quad = curv.quad_form_plus_lambda(lambda, &v)?;
            let g_half = g.eval(&step.x_half, config.feas_tol);
            if !g_half.is_finite() {
                return Err(SolveError::SubproblemFailed {
                    status: QpStatus::Optimal,
                    context: "the tentative point violates the atoms of g beyond tolerance",
                });
            }
            let grad_dot_v = dot(&grad_k, &v);

            let attempt = line_search(
                oracle, &x_k, &step.x_half, g_k, g_half, h_k, quad,
                config.alpha, config.beta, config.max_halvings,
            );
            match attempt {
                Ok(ls) => {
                    let x_next: Vec<f64> = if ls.t == 1.0 {
                        step.x_half.clone()
                    } else {
                        x_k.iter().zip(&v).map(|(xi, vi)| xi + ls.t * vi).collect()
                    };
                    let g_next = g.eval(&x_next, config.feas_tol);
                    let h_next = ls.f_new + g_next;
                    // A zero-step fixed point is terminal, not a null step.
                    if fixed_point || h_next < h_k {
                        break (step, v, quad, g_half, grad_dot_v, ls, x_next, g_next, h_next);
                    }
                }
                Err(SolveError::LineSearchStalled) => {}
                Err(e) => return Err(e),
            }
            null_steps += 1;
            if null_steps > 30 {
                status = SolveStatus::LineSearchStalled;
                push_final_piece = false;
                break 'outer;
            }
            // Cut at the tentative point when it is in the oracle domain and
            // the model has room to keep the current iterate's plane.
            if null_steps < bundle.memory() {
                let half_eval = oracle.evaluate(&step.x_half)?;
                if let (true, Some(grad_half)) = (half_eval.value.is_finite(), half_eval.gradient) {
                    bundle.push(BundlePiece {
                        anchor: step.x_half.clone(),
                        value: half_eval.value,
                        gradient: grad_half,
                    });
                }
            }
            let (mu_next, lambda_next) = trust_update(mu, 0.5, curv.tau(), config);
            mu = mu_next;
            lambda = lambda_next;
        };
        let t = ls.t;

        let next_eval = oracle.evaluate(&x_next)?;
        if !next_eval.value.is_finite() {
            return Err(SolveError::SubproblemFailed {
                status: QpStatus::Optimal,
                context: "accepted step left the oracle domain",
            });
        }
        let grad_next = next_eval.gradient.expect("finite value carries a gradient");

        let mut rms_residual = None;
        let mut q_vec = None;
        if t == 1.0 {
            let q = recover_with_extras(
                &step.gamma,
                step.gamma_floor,
                Some(&step.model_normal),
                Some(&step.x_half),
                &bundle,
                &curv,
                lambda,
                &v,
            )?;
            let resid: Vec<f64> = grad_next.iter().zip(&q).map(|(a, b)| a + b).collect();
            rms_residual = Some(norm2(&resid) / (n as f64).sqrt());
            q_vec = Some(q);
        }

        let s: Vec<f64> = x_next.iter().zip(&x_k).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_next.iter().zip(&grad_k).map(|(a, b)| a - b).collect();
        curv.update(&s, &y)?;
        let tau_next = curv.tau();
        let lambda_used = lambda;
        let mu_used = mu;
        let (mu_next, lambda_next) = trust_update(mu, t, tau_next, config);
        mu = mu_next;
        lambda = lambda_next;

        // Lower bound on the cadence; the model here is exactly the one the
        // tentative step used.
        let mut gap_check = false;
        if k % config.bound_cadence == 0 {
            let ell = lower_bound(&bundle, g, config.qp_tol, config.qp_max_iters)?;
            l_best = l_best.max(ell);
            gap_check = true;
        }

        if config.collect_trace {
            let piece_values_at_half: Vec<f64> = bundle
                .pieces()
                .map(|p| {
                    p.value
                        + dot(&p.gradient, &step.x_half)
                        - dot(&p.gradient, &p.anchor)
                })
                .collect();
            trace.push(TraceRecord {
                k,
                x: x_k.clone(),
                x_half: step.x_half.clone(),
                x_next: x_next.clone(),
                gamma: step.gamma.clone(),
                gamma_floor: step.gamma_floor,
                z_half: step.z_half,
                piece_values_at_half,
                v_norm: norm2(&v),
                quad,
                grad_dot_v,
                g_k,
                g_half,
                h_k,
                t,
                lambda: lambda_used,
                tau_next,
                q: q_vec.clone(),
            });
        }

        records.push(IterRecord {
            k: k + 1,
            f: ls.f_new,
            g: g_next,
            h: h_next,
            lower_bound: l_best,
            gap: h_next - l_best,
            rms_residual,
            t,
            lambda: lambda_used,
            mu: mu_used,
            r1: curv.r1(),
            f_evals: oracle.value_calls() - calls_at_start,
            wall_time_s: started.elapsed().as_secs_f64(),
        });

        x_k = x_next;
        f_k = ls.f_new;
        grad_k = grad_next;
        g_k = g_next;
        h_k = h_next;

        // Residual test (only meaningful after an undamped step), then the
        // gap test at cadence points.
        if let (Some(rms), Some(q)) = (rms_residual, &q_vec) {
            let scale = (norm2(&grad_k) + norm2(q)) / (n as f64).sqrt();
            if rms <= config.eps_res_abs + config.eps_res_rel * scale {
                status = SolveStatus::ResidualConverged;
                break;
            }
        }
        if gap_check {
            let mut eff_abs = config.eps_gap_abs;
            if config.use_validation {
                if let Some(fv) = oracle.validation_value(&x_k) {
                    eff_abs = eff_abs.max((fv - f_k).abs());
                }
            }
            if h_k - l_best <= eff_abs + config.eps_gap_rel * h_k.abs() {
                status = SolveStatus::GapConverged;
                break;
            }
        }
    }

    // Fold the final iterate's tangent plane into the model and refresh the
    // bound so reports carry the best certificate available.
    if push_final_piece {
        bundle.push(BundlePiece { anchor: x_k.clone(), value: f_k, gradient: grad_k.clone() });
    }
    let ell = lower_bound(&bundle, g, config.qp_tol, config.qp_max_iters)?;
    l_best = l_best.max(ell);
    if let Some(last) = records.last_mut() {
        last.lower_bound = l_best;
        last.gap = last.h - l_best;
    }

    Ok(SolveReport {
        status,
        x: x_k,
        h: h_k,
        lower_bound: l_best,
        records,
        trace,
        f_value_calls: oracle.value_calls(),
        f_grad_calls: oracle.grad_calls(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    fn quadratic_oracle(a: Vec<f64>) -> Oracle {
        let a2 = a.clone();
        Oracle::from_value_grad(
            a.len(),
            move |x| 0.5 * x.iter().zip(&a).map(|(xi, ai)| (xi - ai) * (xi - ai)).sum::<f64>(),
            move |x| x.iter().zip(&a2).map(|(xi, ai)| xi - ai).collect(),
        )
    }

    #[test]
    fn trust_update_examples() {
        let cfg = SolverConfig::default();
        let (mu, lambda) = trust_update(1.0, 1.0, 0.0, &cfg);
        assert!((mu - 0.8).abs() < 1e-15);
        assert!((lambda - 0.8e-3).abs() < 1e-18);
        let (mu, _) = trust_update(1.0, 0.5, 0.0, &cfg);
        assert!((mu - 1.1).abs() < 1e-15);
        let (mu, _) = trust_update(1e-4, 1.0, 0.0, &cfg);
        assert_eq!(mu, 1e-4);
        let (mu, _) = trust_update(1e5, 0.25, 1.0, &cfg);
        assert_eq!(mu, 1e5);
    }

    #[test]
    fn tentative_step_is_prox_gradient_without_curvature() {
        // Memory 1, H = 0, g == 0, lambda = 1: the step is x - grad f(x).
        let n = 3;
        let g = StructuredFunction::new(n);
        let mut bundle = Bundle::new(n, 1);
        let x_k = vec![0.4, -0.2, 1.0];
        let grad = vec![1.0, 2.0, -0.5];
        bundle.push(BundlePiece { anchor: x_k.clone(), value: 0.7, gradient: grad.clone() });
        let curv = CurvatureModel::new(n, 0);
        let step = tentative_step(&bundle, &curv, &g, &x_k, 1.0, 1e-10, 100).unwrap();
        for i in 0..n {
            assert!((step.x_half[i] - (x_k[i] - grad[i])).abs() < 1e-7, "coord {i}");
        }
        assert!((step.gamma.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn line_search_unit_step_for_exact_model() {
        // f quadratic with curvature exactly its Hessian: t = 1 accepted at j=0.
        let oracle = quadratic_oracle(vec![1.0, -2.0]);
        let x_k = vec![0.0, 0.0];
        let e = oracle.evaluate(&x_k).unwrap();
        let (f_k, grad) = (e.value, e.gradient.unwrap());
        let lambda = 1e-3;
        let curv = CurvatureModel::from_factor(Matrix::identity(2));
        // Minimize tangent + 0.5 (x - x_k)^T (H + lambda I)(x - x_k) by hand.
        let x_half: Vec<f64> = x_k.iter().zip(&grad).map(|(xi, gi)| xi - gi / (1.0 + lambda)).collect();
        let v: Vec<f64> = x_half.iter().zip(&x_k).map(|(a, b)| a - b).collect();
        let quad = curv.quad_form_plus_lambda(lambda, &v).unwrap();
        let ls = line_search(&oracle, &x_k, &x_half, 0.0, 0.0, f_k, quad, 0.05, 0.5, 60).unwrap();
        assert_eq!(ls.t, 1.0);
        assert_eq!(ls.halvings, 0);
    }

    #[test]
    fn line_search_backtracks_out_of_domain() {
        // f = -ln(1 - x) - 3x: finite only for x < 1, decreasing at the
        // origin toward the boundary. A tentative point beyond the boundary
        // forces at least one halving before a finite trial is found.
        let oracle = Oracle::new(1, |x, want| {
            if x[0] < 1.0 {
                (-(1.0 - x[0]).ln() - 3.0 * x[0], want.then(|| vec![1.0 / (1.0 - x[0]) - 3.0]))
            } else {
                (f64::INFINITY, None)
            }
        });
        let x_k = vec![0.0];
        let x_half = vec![1.5];
        let quad = 2.25; // lambda = 1, |v|^2 = 2.25
        let ls = line_search(&oracle, &x_k, &x_half, 0.0, 0.0, 0.0, quad, 0.05, 0.5, 60).unwrap();
        assert!(ls.halvings >= 1);
        assert!(ls.t < 1.0);
        assert!(ls.f_new.is_finite());
    }

    #[test]
    fn line_search_stalls_on_garbage_direction() {
        // Ascent direction with a decrease requirement that can never hold.
        let oracle = Oracle::from_value_grad(1, |x| x[0], |_| vec![1.0]);
        let err = line_search(&oracle, &[0.0], &[1.0], 0.0, 0.0, 0.0, 1.0, 0.05, 0.5, 10);
        assert!(matches!(err, Err(SolveError::LineSearchStalled)));
    }

    #[test]
    fn recover_single_piece() {
        let n = 2;
        let mut bundle = Bundle::new(n, 3);
        let grad = vec![0.5, -1.5];
        bundle.push(BundlePiece { anchor: vec![0.0, 0.0], value: 0.0, gradient: grad.clone() });
        let curv = CurvatureModel::new(n, 0);
        let v = vec![0.2, 0.1];
        let q = recover_subgradient(&[1.0], &bundle, &curv, 2.0, &v).unwrap();
        for i in 0..n {
            assert!((q[i] + grad[i] + 2.0 * v[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn recover_rejects_bad_dual_sum() {
        let mut bundle = Bundle::new(1, 2);
        bundle.push(BundlePiece { anchor: vec![0.0], value: 0.0, gradient: vec![1.0] });
        let curv = CurvatureModel::new(1, 0);
        let err = recover_subgradient(&[0.4], &bundle, &curv, 1.0, &[0.0]);
        assert!(matches!(err, Err(SolveError::DualSumMismatch { .. })));
    }

    #[test]
    fn lower_bound_simplex_vertex_formula() {
        // Single piece with gradient c over the simplex: the model LP attains
        // at a vertex, giving f0 + min_i c_i - c^T x0.
        let n = 3;
        let g = StructuredFunction::new(n).with_simplex(vec![0, 1, 2]);
        let mut bundle = Bundle::new(n, 2);
        let x0 = vec![1.0 / 3.0; 3];
        let c = vec![0.3, -0.7, 1.1];
        let f0 = 0.25;
        bundle.push(BundlePiece { anchor: x0.clone(), value: f0, gradient: c.clone() });
        let ell = lower_bound(&bundle, &g, 1e-10, 100).unwrap();
        let expect = f0 + c.iter().cloned().fold(f64::INFINITY, f64::min) - dot(&c, &x0);
        assert!((ell - expect).abs() < 1e-8, "{ell} vs {expect}");
    }

    #[test]
    fn lower_bound_unconstrained_affine_is_minus_infinity() {
        let g = StructuredFunction::new(2);
        let mut bundle = Bundle::new(2, 2);
        bundle.push(BundlePiece { anchor: vec![0.0, 0.0], value: 1.0, gradient: vec![1.0, -1.0] });
        let ell = lower_bound(&bundle, &g, 1e-9, 100).unwrap();
        assert_eq!(ell, f64::NEG_INFINITY);
    }

    #[test]
    fn solve_quadratic_reaches_tiny_residual_quickly() {
        let n = 50;
        let mut rng = StreamRng::new(3, 0);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let oracle = quadratic_oracle(a.clone());
        let g = StructuredFunction::new(n);
        let cfg = SolverConfig {
            eps_gap_abs: 0.0,
            eps_gap_rel: 0.0,
            eps_res_abs: 1e-8,
            eps_res_rel: 0.0,
            max_iters: 50,
            ..SolverConfig::default()
        };
        let report = solve(&oracle, &g, &vec![0.0; n], &cfg).unwrap();
        assert_eq!(report.status, SolveStatus::ResidualConverged);
        assert!(report.iters() <= 5, "took {} iterations", report.iters());
        for (xi, ai) in report.x.iter().zip(&a) {
            assert!((xi - ai).abs() < 1e-6);
        }
    }

    #[test]
    fn solve_rejects_infeasible_start() {
        let oracle = quadratic_oracle(vec![0.0, 0.0]);
        let g = StructuredFunction::new(2).with_simplex(vec![0, 1]);
        let err = solve(&oracle, &g, &[2.0, 2.0], &SolverConfig::default());
        assert!(matches!(err, Err(SolveError::InfeasibleStart)));
    }

    #[test]
    fn solve_fixed_point_stops_immediately() {
        // Start at the unconstrained minimizer: the tentative step is the
        // fixed point and the residual test fires at once.
        let a = vec![0.3, -0.4];
        let oracle = quadratic_oracle(a.clone());
        let g = StructuredFunction::new(2);
        let cfg = SolverConfig { eps_gap_abs: 0.0, eps_gap_rel: 0.0, ..SolverConfig::default() };
        let report = solve(&oracle, &g, &a, &cfg).unwrap();
        assert_eq!(report.status, SolveStatus::ResidualConverged);
        assert_eq!(report.iters(), 1);
        assert!(report.records.last().unwrap().rms_residual.unwrap() <= 1e-10);
    }

    #[test]
    fn strict_descent_and_sandwich_on_constrained_quadratic() {
        let n = 6;
        let mut rng = StreamRng::new(9, 0);
        let a: Vec<f64> = (0..n).map(|_| rng.uniform_in(-0.5, 1.5)).collect();
        let oracle = quadratic_oracle(a);
        let g = StructuredFunction::new(n).with_simplex((0..n).collect());
        let cfg = SolverConfig { collect_trace: true, ..SolverConfig::default() };
        let report = solve(&oracle, &g, &vec![1.0 / n as f64; n], &cfg).unwrap();
        assert!(matches!(report.status, SolveStatus::GapConverged | SolveStatus::ResidualConverged));
        for w in report.records.windows(2) {
            assert!(w[1].h < w[0].h, "descent violated: {} -> {}", w[0].h, w[1].h);
        }
        assert!(report.lower_bound <= report.h + 1e-12);
        for r in &report.records {
            assert!(r.gap >= -1e-10);
        }
    }
}
