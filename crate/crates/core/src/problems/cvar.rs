//! CVaR-minimizing portfolio over stocks plus one call and one put per stock.
//! The loss quantile variable is adjoined to the portfolio weights, making
//! the sample-average CVaR objective jointly convex (but kinked) in the
//! combined variable.
//!
//! Streams: 0 covariance factor, 1 price-change samples (per sample: the
//! idiosyncratic normals then the factor normals).

use std::sync::Arc;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::linalg::{dot, Matrix};
use crate::oracle::Oracle;
use crate::par::{map_reduce_chunks, ExecMode};
use crate::rng::StreamRng;
use crate::structured::StructuredFunction;

use super::risk::quantile;
use super::{InstanceKind, ProblemInstance};

/// Call premium under a lognormal terminal ratio with zero discount:
/// the expectation of `(omega - strike)_+` for `log omega ~ N(log f - v^2/2 + v^2/2 ...)`
/// parameterized by the forward `f = E[omega]` and total volatility `vol`.
pub fn black_scholes_call(forward: f64, strike: f64, vol: f64) -> f64 {
    if vol <= 0.0 {
        return (forward - strike).max(0.0);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d1 = ((forward / strike).ln() + 0.5 * vol * vol) / vol;
    let d2 = d1 - vol;
    forward * normal.cdf(d1) - strike * normal.cdf(d2)
}

/// Put premium via the same expectation; with zero discount the parity
/// `call - put = forward - strike` holds identically.
pub fn black_scholes_put(forward: f64, strike: f64, vol: f64) -> f64 {
    if vol <= 0.0 {
        return (strike - forward).max(0.0);
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d1 = ((forward / strike).ln() + 0.5 * vol * vol) / vol;
    let d2 = d1 - vol;
    strike * normal.cdf(-d2) - forward * normal.cdf(-d1)
}

#[derive(Debug)]
pub struct CvarData {
    pub m: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub eta: f64,
    pub x_min: f64,
    pub leverage: f64,
    /// Asset returns per sample over the 3m assets (stocks, calls, puts).
    pub returns: Matrix,
    pub strike_call: Vec<f64>,
    pub strike_put: Vec<f64>,
    pub premium_call: Vec<f64>,
    pub premium_put: Vec<f64>,
    pub exec: ExecMode,
}

pub(super) fn generate_data(
    m: usize,
    num_samples: usize,
    seed: u64,
    eta: f64,
    x_min: f64,
    leverage: f64,
    exec: ExecMode,
) -> CvarData {
    assert!(m >= 2);
    let sigma = 1.0 / 2.0f64.sqrt();
    let mut f_rng = StreamRng::new(seed, 0);
    let factor = Matrix::from_fn(m, 5, |_, _| f_rng.normal());
    // Sigma = sigma^2 (I + 0.2 F F^T); only diagonals and a square root of the
    // factor form are needed.
    let var: Vec<f64> = (0..m)
        .map(|j| sigma * sigma * (1.0 + 0.2 * dot(factor.row(j), factor.row(j))))
        .collect();
    let mu: Vec<f64> = var.iter().map(|&v| 0.03 * v.sqrt() - 0.5 * v).collect();

    let normal = Normal::new(0.0, 1.0).unwrap();
    let q80 = normal.inverse_cdf(0.8);
    let q20 = normal.inverse_cdf(0.2);
    let strike_call: Vec<f64> = (0..m).map(|j| (mu[j] + var[j].sqrt() * q80).exp()).collect();
    let strike_put: Vec<f64> = (0..m).map(|j| (mu[j] + var[j].sqrt() * q20).exp()).collect();
    let forward: Vec<f64> = (0..m).map(|j| (mu[j] + 0.5 * var[j]).exp()).collect();
    let premium_call: Vec<f64> =
        (0..m).map(|j| black_scholes_call(forward[j], strike_call[j], var[j].sqrt())).collect();
    let premium_put: Vec<f64> =
        (0..m).map(|j| black_scholes_put(forward[j], strike_put[j], var[j].sqrt())).collect();

    let mut s_rng = StreamRng::new(seed, 1);
    let factor_scale = (0.2f64).sqrt() * sigma;
    let mut returns = Matrix::zeros(num_samples, 3 * m);
    for i in 0..num_samples {
        let u = s_rng.normal_vec(m);
        let uf = s_rng.normal_vec(5);
        for j in 0..m {
            let z = mu[j] + sigma * u[j] + factor_scale * dot(factor.row(j), &uf);
            let omega = z.exp();
            *returns.at_mut(i, j) = omega;
            *returns.at_mut(i, m + j) = (omega - strike_call[j]).max(0.0) / premium_call[j];
            *returns.at_mut(i, 2 * m + j) = (strike_put[j] - omega).max(0.0) / premium_put[j];
        }
    }
    CvarData {
        m,
        num_samples,
        seed,
        eta,
        x_min,
        leverage,
        returns,
        strike_call,
        strike_put,
        premium_call,
        premium_put,
        exec,
    }
}

struct Partial {
    f: f64,
    count: f64,
    grad: Option<Vec<f64>>,
}

/// Sample-average CVaR objective over `(portfolio, alpha)`. The hinge
/// subgradient convention takes the derivative of `(z)_+` to be zero at the
/// kink, so ties contribute nothing.
pub(super) fn eval_data(data: &CvarData, x: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n_assets = 3 * data.m;
    let alpha = x[n_assets];
    let weights = &x[..n_assets];
    let scale = 1.0 / ((1.0 - data.eta) * data.num_samples as f64);
    let out = map_reduce_chunks(
        data.exec,
        data.num_samples,
        |range| {
            let mut part = Partial { f: 0.0, count: 0.0, grad: want_grad.then(|| vec![0.0; n_assets]) };
            for i in range {
                let row = data.returns.row(i);
                let excess = -dot(row, weights) - alpha;
                if excess > 0.0 {
                    part.f += excess;
                    part.count += 1.0;
                    if let Some(g) = &mut part.grad {
                        for j in 0..n_assets {
                            g[j] -= row[j];
                        }
                    }
                }
            }
            part
        },
        Partial { f: 0.0, count: 0.0, grad: want_grad.then(|| vec![0.0; n_assets]) },
        |mut acc, part| {
            acc.f += part.f;
            acc.count += part.count;
            if let (Some(g), Some(pg)) = (&mut acc.grad, &part.grad) {
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b;
                }
            }
            acc
        },
    );
    let value = alpha + scale * out.f;
    let grad = out.grad.map(|g| {
        let mut full: Vec<f64> = g.iter().map(|v| scale * v).collect();
        full.push(1.0 - scale * out.count);
        full
    });
    (value, grad)
}

pub(super) fn build_oracle(data: Arc<CvarData>) -> Oracle {
    let n = 3 * data.m + 1;
    Oracle::new(n, move |x, want_grad| eval_data(&data, x, want_grad))
}

pub(super) fn build_instance(data: CvarData) -> ProblemInstance {
    let m = data.m;
    let n_assets = 3 * m;
    let n = n_assets + 1;
    let data = Arc::new(data);
    let oracle = build_oracle(data.clone());

    let mut lower = vec![data.x_min; n];
    lower[n_assets] = f64::NEG_INFINITY; // alpha is free
    let upper = vec![f64::INFINITY; n];
    let mut sum_row = vec![0.0; n];
    for v in sum_row.iter_mut().take(n_assets) {
        *v = 1.0;
    }
    let g = StructuredFunction::new(n)
        .with_box(lower, upper)
        .with_equalities(Matrix::from_rows(&[sum_row]), vec![1.0])
        .with_l1_ball((0..n_assets).collect(), data.leverage);

    // Equal weight on the underlying stocks; alpha starts at the empirical
    // loss quantile there.
    let mut x0 = vec![0.0; n];
    for v in x0.iter_mut().take(m) {
        *v = 1.0 / m as f64;
    }
    let losses: Vec<f64> =
        (0..data.num_samples).map(|i| -dot(&data.returns.row(i)[..m], &x0[..m])).collect();
    x0[n_assets] = quantile(&losses, data.eta);

    ProblemInstance {
        name: format!("cvar_m{}_N{}_s{}", m, data.num_samples, data.seed),
        dim: n,
        num_samples: data.num_samples,
        seed: data.seed,
        oracle,
        g,
        x0,
        kind: InstanceKind::Cvar(data),
    }
}

/// Seeded option-portfolio instance: lognormal price changes with a low-rank
/// factor covariance, strikes at the 80th/20th percentile, premia from the
/// zero-discount expectation, leverage and short limits on the weights.
pub fn gen_cvar_portfolio(m: usize, num_samples: usize, seed: u64) -> ProblemInstance {
    gen_cvar_portfolio_custom(m, num_samples, seed, 0.8, -0.1, 1.6)
}

pub fn gen_cvar_portfolio_custom(
    m: usize,
    num_samples: usize,
    seed: u64,
    eta: f64,
    x_min: f64,
    leverage: f64,
) -> ProblemInstance {
    build_instance(generate_data(m, num_samples, seed, eta, x_min, leverage, ExecMode::default()))
}

pub fn gen_cvar_with_exec(m: usize, num_samples: usize, seed: u64, exec: ExecMode) -> ProblemInstance {
    build_instance(generate_data(m, num_samples, seed, 0.8, -0.1, 1.6, exec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn put_call_parity_zero_discount() {
        for (f, k, vol) in [(1.0, 1.1, 0.3), (0.9, 0.8, 0.7), (1.2, 1.2, 0.05)] {
            let c = black_scholes_call(f, k, vol);
            let p = black_scholes_put(f, k, vol);
            assert!((c - p - (f - k)).abs() <= 1e-12, "parity off: {}", c - p - (f - k));
        }
    }

    #[test]
    fn vanishing_volatility_limit() {
        let f = 1.05;
        let k = 0.95;
        let c = black_scholes_call(f, k, 1e-8);
        assert!((c - (f - k)).abs() <= 1e-9, "call {c}");
        let p = black_scholes_put(f, 1.2, 1e-8);
        assert!((p - (1.2 - f)).abs() <= 1e-9, "put {p}");
    }

    #[test]
    fn start_point_matches_direct_recomputation() {
        let inst = gen_cvar_portfolio(4, 500, 0);
        let e = inst.oracle.evaluate(&inst.x0).unwrap();
        assert!(e.value.is_finite());
        // Independent per-sample recomputation of the sample average.
        let data = match &inst.kind {
            InstanceKind::Cvar(d) => d.clone(),
            _ => unreachable!(),
        };
        let n_assets = 12;
        let alpha = inst.x0[n_assets];
        let mut acc = 0.0;
        for i in 0..data.num_samples {
            let excess = -dot(data.returns.row(i), &inst.x0[..n_assets]) - alpha;
            acc += excess.max(0.0);
        }
        let direct = alpha + acc / ((1.0 - data.eta) * data.num_samples as f64);
        assert!((direct - e.value).abs() <= 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn start_point_feasible() {
        let inst = gen_cvar_portfolio(3, 200, 5);
        assert!(inst.g.eval(&inst.x0, 1e-8).is_finite());
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_data(3, 100, 9, 0.8, -0.1, 1.6, ExecMode::Sequential);
        let b = generate_data(3, 100, 9, 0.8, -0.1, 1.6, ExecMode::Sequential);
        assert_eq!(a.returns.data(), b.returns.data());
        assert_eq!(a.premium_call, b.premium_call);
    }
}
