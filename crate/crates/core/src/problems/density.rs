//! Exponential-family density fitting on the square `[-1,1]^2` with Legendre
//! polynomial sufficient statistics up to total degree four (14 terms). The
//! oracle part is the log-normalizer, approximated by a midpoint Riemann sum
//! on a lattice; the structured part carries the data term and an optional
//! quadratic regularizer (plain squared norm, or the gradient-smoothness form
//! built from the statistic Jacobians).
//!
//! Streams: 0 the data sample (mixture of three Gaussians, rejected to the
//! square).

use std::sync::Arc;

use crate::linalg::{cholesky_psd, dot, Matrix};
use crate::oracle::Oracle;
use crate::par::{map_reduce_chunks, ExecMode};
use crate::rng::StreamRng;
use crate::structured::StructuredFunction;

use super::{InstanceKind, ProblemInstance};

/// Legendre polynomial and derivative values `P_0..P_max`, `P'_0..P'_max`
/// by the three-term and derivative recurrences.
pub fn legendre_with_deriv(max_deg: usize, x: f64) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; max_deg + 1];
    let mut dp = vec![0.0; max_deg + 1];
    p[0] = 1.0;
    if max_deg >= 1 {
        p[1] = x;
        dp[1] = 1.0;
    }
    for k in 1..max_deg {
        p[k + 1] = ((2 * k + 1) as f64 * x * p[k] - k as f64 * p[k - 1]) / (k + 1) as f64;
        dp[k + 1] = dp[k - 1] + (2 * k + 1) as f64 * p[k];
    }
    (p, dp)
}

pub fn legendre(deg: usize, x: f64) -> f64 {
    legendre_with_deriv(deg, x).0[deg]
}

/// Exponent pairs `(a, b)` with `1 <= a + b <= 4`, ordered by total degree
/// then by the first exponent: 14 statistics.
pub fn statistic_exponents() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for total in 1..=4 {
        for a in 0..=total {
            out.push((a, total - a));
        }
    }
    out
}

/// Statistic vector `phi(z) = (P_a(z1) P_b(z2))` at a point of the square.
pub fn statistics(z: &[f64; 2]) -> Vec<f64> {
    let (p1, _) = legendre_with_deriv(4, z[0]);
    let (p2, _) = legendre_with_deriv(4, z[1]);
    statistic_exponents().iter().map(|&(a, b)| p1[a] * p2[b]).collect()
}

/// Statistic Jacobian rows `(d phi_k / d z1, d phi_k / d z2)`.
fn statistic_jacobian(z: &[f64; 2]) -> Vec<[f64; 2]> {
    let (p1, d1) = legendre_with_deriv(4, z[0]);
    let (p2, d2) = legendre_with_deriv(4, z[1]);
    statistic_exponents()
        .iter()
        .map(|&(a, b)| [d1[a] * p2[b], p1[a] * d2[b]])
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DensityRegularizer {
    /// `lambda |theta|^2`
    L2,
    /// `lambda theta^T Q theta` with `Q` the Riemann sum of the statistic
    /// Jacobian outer products (log-density gradient smoothness).
    Grad,
}

#[derive(Debug)]
pub struct DensityData {
    pub n_grid: usize,
    pub m_data: usize,
    pub seed: u64,
    pub lambda: f64,
    pub regularizer: DensityRegularizer,
    /// Data points in the square, row-major m x 2.
    pub data_z: Matrix,
    /// Lattice statistics, n_grid x 14.
    pub phi_grid: Matrix,
    pub exec: ExecMode,
}

pub const DENSITY_DIM: usize = 14;

/// Midpoint lattice of the square with `side^2` cells, row-major over
/// (z1, z2).
fn lattice_points(side: usize) -> Vec<[f64; 2]> {
    let h = 2.0 / side as f64;
    let mut pts = Vec::with_capacity(side * side);
    for i in 0..side {
        let z1 = -1.0 + (i as f64 + 0.5) * h;
        for j in 0..side {
            let z2 = -1.0 + (j as f64 + 0.5) * h;
            pts.push([z1, z2]);
        }
    }
    pts
}

const MIX_MEANS: [[f64; 2]; 3] = [[1.0 / 3.0, 1.0 / 3.0], [1.0 / 3.0, -1.0 / 3.0], [-1.0 / 3.0, -1.0 / 3.0]];
const MIX_WEIGHTS: [f64; 3] = [0.4, 0.3, 0.3];
const MIX_STD: f64 = 1.0 / 6.0;

pub(super) fn generate_data(
    n_grid: usize,
    m_data: usize,
    seed: u64,
    lambda: f64,
    regularizer: DensityRegularizer,
    exec: ExecMode,
) -> DensityData {
    let side = (n_grid as f64).sqrt().round() as usize;
    assert_eq!(side * side, n_grid, "grid size must be a perfect square");
    let pts = lattice_points(side);
    let mut phi_grid = Matrix::zeros(n_grid, DENSITY_DIM);
    for (i, z) in pts.iter().enumerate() {
        let phi = statistics(z);
        for (k, v) in phi.iter().enumerate() {
            *phi_grid.at_mut(i, k) = *v;
        }
    }
    let mut rng = StreamRng::new(seed, 0);
    let mut data_z = Matrix::zeros(m_data, 2);
    for i in 0..m_data {
        loop {
            let u = rng.uniform();
            let comp = if u < MIX_WEIGHTS[0] {
                0
            } else if u < MIX_WEIGHTS[0] + MIX_WEIGHTS[1] {
                1
            } else {
                2
            };
            let z1 = MIX_MEANS[comp][0] + MIX_STD * rng.normal();
            let z2 = MIX_MEANS[comp][1] + MIX_STD * rng.normal();
            if (-1.0..=1.0).contains(&z1) && (-1.0..=1.0).contains(&z2) {
                *data_z.at_mut(i, 0) = z1;
                *data_z.at_mut(i, 1) = z2;
                break;
            }
        }
    }
    DensityData { n_grid, m_data, seed, lambda, regularizer, data_z, phi_grid, exec }
}

/// Log of the Riemann-sum normalizer `log((|S|/N) sum exp(-phi^T theta))`,
/// evaluated in shifted form; the gradient is minus the statistic average
/// under the implied softmax weights.
pub(super) fn eval_data(data: &DensityData, theta: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = DENSITY_DIM;
    let n_grid = data.n_grid;
    // Pass 1: the largest exponent.
    let m = map_reduce_chunks(
        data.exec,
        n_grid,
        |range| {
            let mut best = f64::NEG_INFINITY;
            for i in range {
                best = best.max(-dot(data.phi_grid.row(i), theta));
            }
            best
        },
        f64::NEG_INFINITY,
        f64::max,
    );
    // Pass 2: shifted sum and (optionally) the weighted statistic total.
    struct Partial {
        sum: f64,
        grad: Option<Vec<f64>>,
    }
    let out = map_reduce_chunks(
        data.exec,
        n_grid,
        |range| {
            let mut part = Partial { sum: 0.0, grad: want_grad.then(|| vec![0.0; n]) };
            for i in range {
                let row = data.phi_grid.row(i);
                let w = (-dot(row, theta) - m).exp();
                part.sum += w;
                if let Some(g) = &mut part.grad {
                    for k in 0..n {
                        g[k] += w * row[k];
                    }
                }
            }
            part
        },
        Partial { sum: 0.0, grad: want_grad.then(|| vec![0.0; n]) },
        |mut acc, part| {
            acc.sum += part.sum;
            if let (Some(g), Some(pg)) = (&mut acc.grad, &part.grad) {
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b;
                }
            }
            acc
        },
    );
    let value = (4.0 / n_grid as f64).ln() + m + out.sum.ln();
    let grad = out.grad.map(|g| g.iter().map(|v| -v / out.sum).collect());
    (value, grad)
}

/// The gradient-smoothness quadratic `Q = (|S|/N) sum J J^T` over the lattice.
pub fn smoothness_quadratic(n_grid: usize) -> Matrix {
    let side = (n_grid as f64).sqrt().round() as usize;
    assert_eq!(side * side, n_grid);
    let mut q = Matrix::zeros(DENSITY_DIM, DENSITY_DIM);
    let w = 4.0 / n_grid as f64;
    for z in lattice_points(side) {
        let jac = statistic_jacobian(&z);
        for a in 0..DENSITY_DIM {
            for b in 0..DENSITY_DIM {
                *q.at_mut(a, b) += w * (jac[a][0] * jac[b][0] + jac[a][1] * jac[b][1]);
            }
        }
    }
    q
}

pub(super) fn build_oracle(data: Arc<DensityData>) -> Oracle {
    Oracle::new(DENSITY_DIM, move |theta, want_grad| eval_data(&data, theta, want_grad))
}

pub(super) fn build_instance(data: DensityData) -> ProblemInstance {
    let data = Arc::new(data);
    let oracle = build_oracle(data.clone());
    let mut c = vec![0.0; DENSITY_DIM];
    for i in 0..data.m_data {
        let z = [data.data_z.at(i, 0), data.data_z.at(i, 1)];
        for (k, v) in statistics(&z).iter().enumerate() {
            c[k] += v;
        }
    }
    let lin: Vec<f64> = c.iter().map(|v| v / data.m_data as f64).collect();
    let mut g = StructuredFunction::new(DENSITY_DIM).with_linear_cost(lin);
    if data.lambda > 0.0 {
        let factor = match data.regularizer {
            DensityRegularizer::L2 => {
                let s = (2.0 * data.lambda).sqrt();
                Matrix::from_fn(DENSITY_DIM, DENSITY_DIM, |i, j| if i == j { s } else { 0.0 })
            }
            DensityRegularizer::Grad => {
                let q = smoothness_quadratic(data.n_grid);
                let scaled = Matrix::from_fn(DENSITY_DIM, DENSITY_DIM, |i, j| 2.0 * data.lambda * q.at(i, j));
                cholesky_psd(&scaled, 0.0).expect("smoothness quadratic is PSD")
            }
        };
        g = g.with_quadratic_cost(factor);
    }
    ProblemInstance {
        name: format!("density_N{}_s{}", data.n_grid, data.seed),
        dim: DENSITY_DIM,
        num_samples: data.n_grid,
        seed: data.seed,
        oracle,
        g,
        x0: vec![0.0; DENSITY_DIM],
        kind: InstanceKind::Density(data),
    }
}

/// Seeded density-fitting instance. With `lambda = 0` the structured part is
/// purely linear, so the model lower bound is `-inf` throughout a run.
pub fn gen_density(
    n_grid: usize,
    m_data: usize,
    seed: u64,
    lambda: f64,
    regularizer: DensityRegularizer,
) -> ProblemInstance {
    build_instance(generate_data(n_grid, m_data, seed, lambda, regularizer, ExecMode::default()))
}

pub fn gen_density_with_exec(n_grid: usize, seed: u64, exec: ExecMode) -> ProblemInstance {
    build_instance(generate_data(n_grid, 2000, seed, 0.0, DensityRegularizer::L2, exec))
}
