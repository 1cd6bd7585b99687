//! Log-optimal betting: maximize the probability-weighted mean log return of
//! a wealth allocation over the simplex, written as minimization of the
//! negative mean log return.
//!
//! Streams: 0 outcome probabilities, 1 target mean returns, 2 the return
//! matrix (row-major normals).

use std::sync::Arc;

use crate::linalg::{dot, Matrix};
use crate::oracle::Oracle;
use crate::par::{map_reduce_chunks, ExecMode};
use crate::rng::StreamRng;
use crate::structured::StructuredFunction;

use super::{InstanceKind, ProblemInstance};

#[derive(Debug)]
pub struct KellyData {
    pub n: usize,
    pub num_samples: usize,
    pub seed: u64,
    /// Outcome probabilities, summing to one.
    pub pi: Vec<f64>,
    /// Target mean return per bet, the column scaling target.
    pub rbar: Vec<f64>,
    /// Returns, one row per outcome.
    pub returns: Matrix,
    pub exec: ExecMode,
}

pub(super) fn generate_data(n: usize, num_samples: usize, seed: u64, exec: ExecMode) -> KellyData {
    assert!(n >= 2 && num_samples >= 1);
    let mut pi_rng = StreamRng::new(seed, 0);
    let mut pi: Vec<f64> = (0..num_samples).map(|_| pi_rng.uniform()).collect();
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
    let mut rbar_rng = StreamRng::new(seed, 1);
    let rbar = rbar_rng.uniform_vec_in(n, 0.9, 1.1);
    let mut ret_rng = StreamRng::new(seed, 2);
    let mut returns = Matrix::from_fn(num_samples, n, |_, _| ret_rng.normal().exp());
    // Scale each column so the probability-weighted mean return hits rbar.
    for j in 0..n {
        let mean: f64 = (0..num_samples).map(|i| pi[i] * returns.at(i, j)).sum();
        let scale = rbar[j] / mean;
        for i in 0..num_samples {
            *returns.at_mut(i, j) *= scale;
        }
    }
    KellyData { n, num_samples, seed, pi, rbar, returns, exec }
}

struct Partial {
    finite: bool,
    f: f64,
    grad: Option<Vec<f64>>,
}

pub(super) fn eval_data(data: &KellyData, x: &[f64], want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let n = data.n;
    let out = map_reduce_chunks(
        data.exec,
        data.num_samples,
        |range| {
            let mut part = Partial { finite: true, f: 0.0, grad: want_grad.then(|| vec![0.0; n]) };
            for i in range {
                let row = data.returns.row(i);
                let d = dot(row, x);
                if d <= 0.0 {
                    part.finite = false;
                    return part;
                }
                part.f -= data.pi[i] * d.ln();
                if let Some(g) = &mut part.grad {
                    let w = data.pi[i] / d;
                    for j in 0..n {
                        g[j] -= w * row[j];
                    }
                }
            }
            part
        },
        Partial { finite: true, f: 0.0, grad: want_grad.then(|| vec![0.0; n]) },
        |mut acc, part| {
            acc.finite &= part.finite;
            acc.f += part.f;
            if let (Some(g), Some(pg)) = (&mut acc.grad, &part.grad) {
                for (a, b) in g.iter_mut().zip(pg) {
                    *a += b;
                }
            }
            acc
        },
    );
    if !out.finite {
        return (f64::INFINITY, None);
    }
    (out.f, out.grad)
}

pub(super) fn build_oracle(data: Arc<KellyData>) -> Oracle {
    let n = data.n;
    Oracle::new(n, move |x, want_grad| eval_data(&data, x, want_grad))
}

pub(super) fn build_instance(data: KellyData) -> ProblemInstance {
    let n = data.n;
    let data = Arc::new(data);
    let oracle = build_oracle(data.clone());
    let g = StructuredFunction::new(n).with_simplex((0..n).collect());
    ProblemInstance {
        name: format!("kelly_n{}_N{}_s{}", n, data.num_samples, data.seed),
        dim: n,
        num_samples: data.num_samples,
        seed: data.seed,
        oracle,
        g,
        x0: vec![1.0 / n as f64; n],
        kind: InstanceKind::Kelly(data),
    }
}

/// Seeded betting instance: probabilities uniform then normalized, returns
/// lognormal with columns scaled to mean returns drawn from `[0.9, 1.1]`,
/// simplex constraint, uniform starting allocation.
pub fn gen_kelly(n: usize, num_samples: usize, seed: u64) -> ProblemInstance {
    build_instance(generate_data(n, num_samples, seed, ExecMode::default()))
}

pub fn gen_kelly_with_exec(n: usize, num_samples: usize, seed: u64, exec: ExecMode) -> ProblemInstance {
    build_instance(generate_data(n, num_samples, seed, exec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn column_scaling_hits_target_means() {
        let data = generate_data(8, 500, 0, ExecMode::Sequential);
        for j in 0..8 {
            let mean: f64 = (0..500).map(|i| data.pi[i] * data.returns.at(i, j)).sum();
            assert!((mean - data.rbar[j]).abs() <= 1e-12, "bet {j}: {mean} vs {}", data.rbar[j]);
        }
    }

    #[test]
    fn uniform_start_is_interior() {
        let inst = gen_kelly(6, 300, 1);
        let e = inst.oracle.evaluate(&inst.x0).unwrap();
        assert!(e.value.is_finite());
        assert!(inst.g.eval(&inst.x0, 1e-8).is_finite());
    }

    #[test]
    fn negative_portfolio_return_is_outside_domain() {
        let inst = gen_kelly(4, 100, 2);
        let mut x = vec![0.0; 4];
        x[0] = 2.0;
        x[1] = -1.0;
        // Returns are positive, so some outcome has nonpositive r^T x here.
        let e = inst.oracle.evaluate(&x).unwrap();
        assert!(e.value.is_infinite());
        assert!(e.gradient.is_none());
    }

    #[test]
    fn same_seed_bit_identical() {
        let a = generate_data(5, 200, 7, ExecMode::Sequential);
        let b = generate_data(5, 200, 7, ExecMode::Sequential);
        assert_eq!(a.returns.data(), b.returns.data());
        assert_eq!(a.pi, b.pi);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_eval_matches_sequential_bitwise() {
        let seq = build_instance(generate_data(10, 5000, 3, ExecMode::Sequential));
        let par = build_instance(generate_data(10, 5000, 3, ExecMode::Parallel));
        let x = vec![0.1; 10];
        let a = seq.oracle.evaluate(&x).unwrap();
        let b = par.oracle.evaluate(&x).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        for (u, v) in a.gradient.unwrap().iter().zip(b.gradient.unwrap()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }
}
