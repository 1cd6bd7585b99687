//! Seeded generators, oracles, and structured functions for the built-in
//! benchmark families, plus empirical risk primitives and a binary instance
//! container. Every generator is a pure function of its size parameters and
//! seed; identical calls produce bit-identical instances.

mod cvar;
mod density;
pub mod io;
mod kelly;
mod newsvendor;
pub mod risk;

use std::sync::Arc;

pub use cvar::{black_scholes_call, black_scholes_put, gen_cvar_portfolio, gen_cvar_portfolio_custom, gen_cvar_with_exec, CvarData};
pub use density::{
    gen_density, gen_density_with_exec, legendre, legendre_with_deriv, smoothness_quadratic,
    statistic_exponents, statistics, DensityData, DensityRegularizer, DENSITY_DIM,
};
pub use kelly::{gen_kelly, gen_kelly_with_exec, KellyData};
pub use newsvendor::{gen_newsvendor, gen_newsvendor_custom, gen_newsvendor_with_exec, NewsVendorData, ALPHA_FLOOR};
pub use risk::{cvar_objective, empirical_risks, evar_objective, quantile, RiskValues};

use crate::oracle::Oracle;
use crate::par::ExecMode;
use crate::rng::StreamRng;
use crate::structured::StructuredFunction;

#[derive(Debug, Clone)]
pub(crate) enum InstanceKind {
    Kelly(Arc<KellyData>),
    Cvar(Arc<CvarData>),
    Density(Arc<DensityData>),
    NewsVendor(Arc<NewsVendorData>),
}

/// A ready-to-solve problem: oracle, structured part, feasible start, and the
/// generator data behind them (kept for serialization and validation twins).
pub struct ProblemInstance {
    pub name: String,
    pub oracle: Oracle,
    pub g: StructuredFunction,
    pub x0: Vec<f64>,
    pub dim: usize,
    pub num_samples: usize,
    pub seed: u64,
    pub(crate) kind: InstanceKind,
}

impl ProblemInstance {
    /// Attach a validation twin built from an independent sample set drawn
    /// with `seed + 1` and the same recipe.
    pub fn with_validation_twin(mut self) -> Self {
        let oracle = std::mem::replace(&mut self.oracle, Oracle::new(0, |_, _| (0.0, None)));
        self.oracle = match &self.kind {
            InstanceKind::Kelly(d) => {
                let twin = Arc::new(kelly::generate_data(d.n, d.num_samples, d.seed + 1, d.exec));
                oracle.with_validation(move |x| kelly::eval_data(&twin, x, false).0)
            }
            InstanceKind::Cvar(d) => {
                let twin = Arc::new(cvar::generate_data(
                    d.m, d.num_samples, d.seed + 1, d.eta, d.x_min, d.leverage, d.exec,
                ));
                oracle.with_validation(move |x| cvar::eval_data(&twin, x, false).0)
            }
            InstanceKind::Density(d) => {
                let twin = Arc::new(density::generate_data(
                    d.n_grid, d.m_data, d.seed + 1, d.lambda, d.regularizer, d.exec,
                ));
                oracle.with_validation(move |x| density::eval_data(&twin, x, false).0)
            }
            InstanceKind::NewsVendor(d) => {
                let twin = Arc::new(newsvendor::generate_data(
                    d.n, d.num_samples, d.seed + 1, d.eta, d.budget, d.exec,
                ));
                oracle.with_validation(move |x| newsvendor::eval_data(&twin, x, false).0)
            }
        };
        self
    }

    /// Whether the oracle is differentiable everywhere on its domain (the
    /// hinge-style objectives are not, though the method still runs on them).
    pub fn is_smooth(&self) -> bool {
        !matches!(self.kind, InstanceKind::Cvar(_))
    }

    /// A random point in the interior of the oracle domain, suitable for
    /// finite-difference gradient checks.
    pub fn sample_interior(&self, rng: &mut StreamRng) -> Vec<f64> {
        match &self.kind {
            InstanceKind::Kelly(d) => {
                let mut w: Vec<f64> = (0..d.n).map(|_| 0.1 + rng.uniform()).collect();
                let s: f64 = w.iter().sum();
                for v in w.iter_mut() {
                    *v /= s;
                }
                w
            }
            InstanceKind::Cvar(d) => {
                let mut x: Vec<f64> = self.x0.clone();
                for v in x.iter_mut().take(3 * d.m) {
                    *v += 0.02 * rng.normal();
                }
                let a = x[3 * d.m];
                x[3 * d.m] = a + 0.2 * (1.0 + a.abs()) * (rng.uniform() - 0.5);
                x
            }
            InstanceKind::Density(_) => (0..DENSITY_DIM).map(|_| rng.uniform_in(-0.5, 0.5)).collect(),
            InstanceKind::NewsVendor(d) => {
                let mut x: Vec<f64> = (0..d.n).map(|j| d.q_max[j] * rng.uniform_in(0.1, 0.9)).collect();
                let alpha0 = self.x0[d.n];
                x.push(alpha0 * rng.uniform_in(0.5, 2.0));
                x
            }
        }
    }

    /// Execution mode of the sample loops behind the oracle.
    pub fn exec_mode(&self) -> ExecMode {
        match &self.kind {
            InstanceKind::Kelly(d) => d.exec,
            InstanceKind::Cvar(d) => d.exec,
            InstanceKind::Density(d) => d.exec,
            InstanceKind::NewsVendor(d) => d.exec,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_twin_differs_but_tracks() {
        let inst = gen_kelly(5, 2000, 0).with_validation_twin();
        let x = vec![0.2; 5];
        let f = inst.oracle.evaluate(&x).unwrap().value;
        let fv = inst.oracle.validation_value(&x).unwrap();
        assert_ne!(f.to_bits(), fv.to_bits());
        assert!((f - fv).abs() < 0.05, "twin far off: {f} vs {fv}");
    }

    #[test]
    fn interior_samples_are_in_domain() {
        let mut rng = StreamRng::new(0, 0);
        for inst in [
            gen_kelly(4, 200, 0),
            gen_cvar_portfolio(3, 200, 0),
            gen_density(100, 100, 0, 0.1, DensityRegularizer::L2),
            gen_newsvendor(4, 200, 0),
        ] {
            for _ in 0..5 {
                let x = inst.sample_interior(&mut rng);
                assert!(inst.oracle.evaluate(&x).unwrap().value.is_finite(), "{}", inst.name);
            }
        }
    }
}
