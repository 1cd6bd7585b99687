//! Vector news vendor under an entropic tail-risk objective: choose
//! production quantities (plus the risk scale variable) to minimize the
//! exponential-moment bound on the negative profit, with a piecewise-affine
//! production cost kept inside the budget through an epigraph lift in `g`.
//!
//! Streams: 0 covariance factor, 1 means, 2 demand/price samples (factor
//! normals per sample), 3 linear cost coefficients, 4 cost kink points.

use std::sync::Arc;

use crate::linalg::{dot, Matrix};
use crate::oracle::Oracle;
use crate::par::{map_reduce_chunks, ExecMode};
use crate::rng::StreamRng;
use crate::structured::StructuredFunction;

use super::{InstanceKind, ProblemInstance};

pub const ALPHA_FLOOR: f64 = 1e-6;

#[derive(Debug)]
pub struct NewsVendorData {
    pub n: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub eta: f64,
    pub budget: f64,
    /// Demand per sample, N x n.
    pub demand: Matrix,
    /// Prices per sample, N x n.
    pub price: Matrix,
    pub cost_lin: Vec<f64>,
    pub cost_kink: Vec<f64>,
    pub q_max: Vec<f64>,
    pub exec: ExecMode,
}

impl NewsVendorData {
    /// Production cost `a^T q + 0.5 a^T (q - b)_+`.
    pub fn production_cost(&self, q: &[f64]) -> f64 {
        let mut phi = 0.0;
        for j in 0..self.n {
            phi += self.cost_lin[j] * (q[j] + 0.5 * (q[j] - self.cost_kink[j]).max(0.0));
        }
        phi
    }

    fn production_cost_grad(&self, q: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|j| self.cost_lin[j] * if q[j] > self.cost_kink[j] { 1.5 } else { 1.0 })
            .collect()
    }
}

pub(super) fn generate_data(
    n: usize,
    num_samples: usize,
    seed: u64,
    eta: f64,
    budget: f64,
    exec: ExecMode,
) -> NewsVendorData {
    assert!(n >= 1);
    let mut f_rng = StreamRng::new(seed, 0);
    let factor = Matrix::from_fn(2 * n, 5, |_, _| f_rng.normal());
    let mut mu_rng = StreamRng::new(seed, 1);
    let mu = mu_rng.uniform_vec_in(2 * n, -0.2, 0.0);
    let mut s_rng = StreamRng::new(seed, 2);
    let scale = 0.1f64.sqrt();
    let mut demand = Matrix::zeros(num_samples, n);
    let mut price = Matrix::zeros(num_samples, n);
    for i in 0..num_samples {
        let u = s_rng.normal_vec(5);
        for j in 0..n {
            *demand.at_mut(i, j) = (mu[j] + scale * dot(factor.row(j), &u)).exp();
            *price.at_mut(i, j) = (mu[n + j] + scale * dot(factor.row(n + j), &u)).exp();
        }
    }
    let mut a_rng = StreamRng::new(seed, 3);
    let cost_lin = a_rng.uniform_vec_in(n, 0.2, 0.9);
    let mut b_rng = StreamRng::new(seed, 4);
    let cost_kink = b_rng.uniform_vec_in(n, 0.01, 0.03);
    let q_max = cost_kink.iter().map(|b| 5.0 * b).collect();
    NewsVendorData { n, num_samples, seed, eta, budget, demand, price, cost_lin, cost_kink, q_max, exec }
}

struct Partial {
    sum: f64,
    weighted_loss: f64,
    grad: Option<Vec<f64>>,
}

/// Entropic risk of the negative profit over `(q, alpha)`, evaluated in
/// shifted log-sum-exp form. Below the alpha floor the value is `+inf`. The
/// min-kink subgradient convention counts ties (`q <= d`) as selling `q`.
pub(super) fn eval_data(data: &NewsVendorData, x: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = data.n;
    let q = &x[..n];
    let alpha = x[n];
    if alpha < ALPHA_FLOOR {
        return (f64::INFINITY, None);
    }
    let phi = data.production_cost(q);
    let num = data.num_samples;
    // Pass 1: the largest loss.
    let m = map_reduce_chunks(
        data.exec,
        num,
        |range| {
            let mut best = f64::NEG_INFINITY;
            for i in range {
                let d = data.demand.row(i);
                let p = data.price.row(i);
                let mut revenue = 0.0;
                for j in 0..n {
                    revenue += p[j] * q[j].min(d[j]);
                }
                best = best.max(phi - revenue);
            }
            best
        },
        f64::NEG_INFINITY,
        f64::max,
    );
    // Pass 2: shifted exponential sum, weighted losses, revenue gradient.
    let out = map_reduce_chunks(
        data.exec,
        num,
        |range| {
            let mut part = Partial { sum: 0.0, weighted_loss: 0.0, grad: want_grad.then(|| vec![0.0; n]) };
            for i in range {
                let d = data.demand.row(i);
                let p = data.price.row(i);
                let mut revenue = 0.0;
                for j in 0..n {
                    revenue += p[j] * q[j].min(d[j]);
                }
                let loss = phi - revenue;
                let w = ((loss - m) / alpha).exp();
                part.sum += w;
                part.weighted_loss += w * loss;
                if let Some(g) = &mut part.grad {
                    for j in 0..n {
                        if q[j] <= d[j] {
                            g[j] -= w * p[j];
                        }
                    }
                }
            }
            part
        },
        Partial { sum: 0.0, weighted_loss: 0.0, grad: want_grad.then(|| vec![0.0; n]) },
        |mut acc, part| {
            acc.sum += part.sum;
            acc.weighted_loss += part.weighted_loss;
            if let (Some(g), Some(pg)) = (&mut acc.grad, &part.grad) {
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b;
                }
            }
            acc
        },
    );
    let log_norm = ((1.0 - data.eta) * num as f64).ln();
    let value = m + alpha * out.sum.ln() - alpha * log_norm;
    let grad = out.grad.map(|g| {
        let phi_grad = data.production_cost_grad(q);
        let mut full: Vec<f64> = (0..n).map(|j| g[j] / out.sum + phi_grad[j]).collect();
        let mean_loss = out.weighted_loss / out.sum;
        full.push((value - mean_loss) / alpha);
        full
    });
    (value, grad)
}

pub(super) fn build_oracle(data: Arc<NewsVendorData>) -> Oracle {
    let n = data.n + 1;
    Oracle::new(n, move |x, want_grad| eval_data(&data, x, want_grad))
}

pub(super) fn build_instance(data: NewsVendorData) -> ProblemInstance {
    let n = data.n;
    let dim = n + 1;
    let data = Arc::new(data);
    let oracle = build_oracle(data.clone());

    let mut lower = vec![0.0; dim];
    lower[n] = ALPHA_FLOOR;
    let mut upper: Vec<f64> = data.q_max.clone();
    upper.push(f64::INFINITY);
    let g = StructuredFunction::new(dim)
        .with_box(lower, upper)
        .with_hinge_budget((0..n).collect(), data.cost_lin.clone(), data.cost_kink.clone(), 0.5, data.budget);

    // Half of the production caps, scaled back onto the budget when needed.
    let mut q0: Vec<f64> = data.q_max.iter().map(|v| 0.5 * v).collect();
    if data.production_cost(&q0) > 0.9 * data.budget {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let scaled: Vec<f64> = q0.iter().map(|v| mid * v).collect();
            if data.production_cost(&scaled) <= 0.9 * data.budget {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        for v in q0.iter_mut() {
            *v *= lo;
        }
    }
    let phi0 = data.production_cost(&q0);
    let losses: Vec<f64> = (0..data.num_samples)
        .map(|i| {
            let d = data.demand.row(i);
            let p = data.price.row(i);
            let mut revenue = 0.0;
            for j in 0..n {
                revenue += p[j] * q0[j].min(d[j]);
            }
            phi0 - revenue
        })
        .collect();
    let mean: f64 = losses.iter().sum::<f64>() / losses.len() as f64;
    let var: f64 = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / losses.len() as f64;
    let mut x0 = q0;
    x0.push(var.sqrt().max(10.0 * ALPHA_FLOOR));

    ProblemInstance {
        name: format!("newsvendor_n{}_N{}_s{}", n, data.num_samples, data.seed),
        dim,
        num_samples: data.num_samples,
        seed: data.seed,
        oracle,
        g,
        x0,
        kind: InstanceKind::NewsVendor(data),
    }
}

/// Seeded news-vendor instance: lognormal demand/price with a rank-5 factor
/// covariance, uniform cost coefficients, production caps at five kink
/// lengths, unit budget.
pub fn gen_newsvendor(n: usize, num_samples: usize, seed: u64) -> ProblemInstance {
    gen_newsvendor_custom(n, num_samples, seed, 0.9, 1.0)
}

pub fn gen_newsvendor_custom(
    n: usize,
    num_samples: usize,
    seed: u64,
    eta: f64,
    budget: f64,
) -> ProblemInstance {
    build_instance(generate_data(n, num_samples, seed, eta, budget, ExecMode::default()))
}

pub fn gen_newsvendor_with_exec(n: usize, num_samples: usize, seed: u64, exec: ExecMode) -> ProblemInstance {
    build_instance(generate_data(n, num_samples, seed, 0.9, 1.0, exec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cost_at_kink_has_inactive_hinge() {
        let data = generate_data(5, 50, 0, 0.9, 1.0, ExecMode::Sequential);
        let phi = data.production_cost(&data.cost_kink.clone());
        let direct = dot(&data.cost_lin, &data.cost_kink);
        assert_eq!(phi, direct);
    }

    #[test]
    fn eta_zero_reduces_to_plain_log_mean() {
        // With eta = 0 the normalizer is just N, so the value at fixed alpha
        // is alpha * log(mean exp(loss / alpha)).
        let data = generate_data(3, 40, 1, 0.0, 1.0, ExecMode::Sequential);
        let inst = build_instance(generate_data(3, 40, 1, 0.0, 1.0, ExecMode::Sequential));
        let x = inst.x0.clone();
        let alpha = x[3];
        let q = &x[..3];
        let phi = data.production_cost(q);
        let mut acc = 0.0;
        for i in 0..40 {
            let mut revenue = 0.0;
            for j in 0..3 {
                revenue += data.price.at(i, j) * q[j].min(data.demand.at(i, j));
            }
            acc += ((phi - revenue) / alpha).exp();
        }
        let direct = alpha * (acc / 40.0).ln();
        let e = inst.oracle.evaluate(&x).unwrap();
        assert!((e.value - direct).abs() <= 1e-10 * (1.0 + direct.abs()), "{} vs {direct}", e.value);
    }

    #[test]
    fn alpha_below_floor_is_outside_domain() {
        let inst = gen_newsvendor(4, 60, 2);
        let mut x = inst.x0.clone();
        x[4] = 0.0;
        let e = inst.oracle.evaluate(&x).unwrap();
        assert!(e.value.is_infinite());
    }

    #[test]
    fn start_point_feasible_and_finite() {
        let inst = gen_newsvendor(6, 200, 3);
        assert!(inst.g.eval(&inst.x0, 1e-8).is_finite());
        assert!(inst.oracle.evaluate(&inst.x0).unwrap().value.is_finite());
        let data = match &inst.kind {
            InstanceKind::NewsVendor(d) => d.clone(),
            _ => unreachable!(),
        };
        assert!(data.production_cost(&inst.x0[..6]) <= data.budget);
    }
}
