//! Value/gradient callback access to the smooth part `f`, with extended-value
//! semantics: a callback may return `+inf` to signal a point outside the
//! domain. A finite-difference gradient checker is included.

use std::cell::Cell;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle returned a non-finite value ({0}); only finite values and +inf are allowed")]
    NonFiniteOracle(f64),
    #[error("oracle gradient contains non-finite entries")]
    NonFiniteGradient,
    #[error("dimension mismatch: oracle expects {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("finite-difference stencil left the domain at coordinate {coord}")]
    StencilLeftDomain { coord: usize },
}

/// One oracle evaluation: the value is finite or `+inf`, and a gradient is
/// present exactly when the value is finite.
#[derive(Debug, Clone)]
pub struct OracleEval {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
}

impl OracleEval {
    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

type EvalFn = dyn Fn(&[f64], bool) -> (f64, Option<Vec<f64>>) + Send;
type ValueFn = dyn Fn(&[f64]) -> f64 + Send;

/// The oracle part `f`: callbacks plus call counters and an optional
/// validation twin built from an independent sample set.
pub struct Oracle {
    dim: usize,
    eval_fn: Box<EvalFn>,
    validation: Option<Box<ValueFn>>,
    value_calls: Cell<u64>,
    grad_calls: Cell<u64>,
}

impl Oracle {
    /// Build from a single callback receiving `(x, want_gradient)`.
    pub fn new(dim: usize, eval_fn: impl Fn(&[f64], bool) -> (f64, Option<Vec<f64>>) + Send + 'static) -> Self {
        Oracle {
            dim,
            eval_fn: Box::new(eval_fn),
            validation: None,
            value_calls: Cell::new(0),
            grad_calls: Cell::new(0),
        }
    }

    /// Build from separate value and gradient closures; the gradient closure
    /// is only consulted where the value is finite.
    pub fn from_value_grad(
        dim: usize,
        value: impl Fn(&[f64]) -> f64 + Send + 'static,
        grad: impl Fn(&[f64]) -> Vec<f64> + Send + 'static,
    ) -> Self {
        Oracle::new(dim, move |x, want_grad| {
            let v = value(x);
            if want_grad && v.is_finite() {
                (v, Some(grad(x)))
            } else {
                (v, None)
            }
        })
    }

    pub fn with_validation(mut self, twin: impl Fn(&[f64]) -> f64 + Send + 'static) -> Self {
        self.validation = Some(Box::new(twin));
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn has_validation(&self) -> bool {
        self.validation.is_some()
    }

    pub fn value_calls(&self) -> u64 {
        self.value_calls.get()
    }

    pub fn grad_calls(&self) -> u64 {
        self.grad_calls.get()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), OracleError> {
        if x.len() != self.dim {
            return Err(OracleError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// Value and gradient at `x`. `+inf` signals that `x` is outside the
    /// domain, in which case no gradient is returned.
    pub fn evaluate(&self, x: &[f64]) -> Result<OracleEval, OracleError> {
        self.check_dim(x)?;
        self.value_calls.set(self.value_calls.get() + 1);
        self.grad_calls.set(self.grad_calls.get() + 1);
        let (value, gradient) = (self.eval_fn)(x, true);
        if value.is_nan() || value == f64::NEG_INFINITY {
            return Err(OracleError::NonFiniteOracle(value));
        }
        if value.is_finite() {
            let g = gradient.ok_or(OracleError::NonFiniteGradient)?;
            if g.len() != self.dim || g.iter().any(|v| !v.is_finite()) {
                return Err(OracleError::NonFiniteGradient);
            }
            Ok(OracleEval { value, gradient: Some(g) })
        } else {
            Ok(OracleEval { value, gradient: None })
        }
    }

    /// Value-only call (used by the line search).
    pub fn value(&self, x: &[f64]) -> Result<f64, OracleError> {
        self.check_dim(x)?;
        self.value_calls.set(self.value_calls.get() + 1);
        let (value, _) = (self.eval_fn)(x, false);
        if value.is_nan() || value == f64::NEG_INFINITY {
            return Err(OracleError::NonFiniteOracle(value));
        }
        Ok(value)
    }

    /// Validation twin value, if a twin was attached. Twin calls do not touch
    /// the counters.
    pub fn validation_value(&self, x: &[f64]) -> Option<f64> {
        self.validation.as_ref().map(|f| f(x))
    }
}

/// Result of a central-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_coord: usize,
}

/// Compare the oracle gradient at `x` against central differences with step
/// `h`. The relative error of coordinate `i` is
/// `|cd_i - g_i| / (1 + |g_i|)`; the maximum over coordinates is returned
/// along with the offending coordinate.
pub fn gradient_check(oracle: &Oracle, x: &[f64], h: f64) -> Result<GradCheck, OracleError> {
    let eval = oracle.evaluate(x)?;
    let g = eval.gradient.ok_or(OracleError::StencilLeftDomain { coord: 0 })?;
    let mut xs = x.to_vec();
    let mut worst = GradCheck { max_rel_err: 0.0, worst_coord: 0 };
    for i in 0..x.len() {
        let xi = xs[i];
        xs[i] = xi + h;
        let fp = oracle.value(&xs)?;
        xs[i] = xi - h;
        let fm = oracle.value(&xs)?;
        xs[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(OracleError::StencilLeftDomain { coord: i });
        }
        let cd = (fp - fm) / (2.0 * h);
        let rel = (cd - g[i]).abs() / (1.0 + g[i].abs());
        if rel > worst.max_rel_err {
            worst = GradCheck { max_rel_err: rel, worst_coord: i };
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_norm_sq() -> Oracle {
        Oracle::from_value_grad(
            2,
            |x| 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            |x| x.to_vec(),
        )
    }

    #[test]
    fn quadratic_eval() {
        let o = half_norm_sq();
        let e = o.evaluate(&[3.0, 4.0]).unwrap();
        assert_eq!(e.value, 12.5);
        assert_eq!(e.gradient.unwrap(), vec![3.0, 4.0]);
        assert_eq!(o.value_calls(), 1);
        assert_eq!(o.grad_calls(), 1);
    }

    #[test]
    fn infinite_value_has_no_gradient() {
        let o = Oracle::new(1, |x, _| if x[0] > 0.0 { (x[0].ln(), Some(vec![1.0 / x[0]])) } else { (f64::INFINITY, None) });
        let e = o.evaluate(&[-1.0]).unwrap();
        assert!(e.value.is_infinite());
        assert!(e.gradient.is_none());
    }

    #[test]
    fn nan_rejected() {
        let o = Oracle::new(1, |_, _| (f64::NAN, None));
        assert!(matches!(o.evaluate(&[0.0]), Err(OracleError::NonFiniteOracle(_))));
    }

    #[test]
    fn counters_distinguish_value_only_calls() {
        let o = half_norm_sq();
        o.value(&[1.0, 1.0]).unwrap();
        o.value(&[1.0, 2.0]).unwrap();
        o.evaluate(&[0.0, 0.0]).unwrap();
        assert_eq!(o.value_calls(), 3);
        assert_eq!(o.grad_calls(), 1);
    }

    #[test]
    fn determinism_bit_identical() {
        let o = half_norm_sq();
        let a = o.evaluate(&[0.1, 0.7]).unwrap();
        let b = o.evaluate(&[0.1, 0.7]).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn gradient_check_quadratic_near_exact() {
        let o = half_norm_sq();
        let r = gradient_check(&o, &[0.3, -1.2], 1e-6).unwrap();
        assert!(r.max_rel_err <= 1e-9, "err {}", r.max_rel_err);
    }

    #[test]
    fn gradient_check_stencil_leaving_domain() {
        let o = Oracle::new(1, |x, want| {
            if x[0] > 0.0 {
                (x[0].ln(), want.then(|| vec![1.0 / x[0]]))
            } else {
                (f64::INFINITY, None)
            }
        });
        let err = gradient_check(&o, &[5e-7], 1e-6).unwrap_err();
        assert!(matches!(err, OracleError::StencilLeftDomain { coord: 0 }));
    }
}
