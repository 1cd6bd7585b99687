//! Empirical risk measures over a sampled loss vector: the quantile (VaR),
//! its tail-average convex upper bound (CVaR), and its exponential-moment
//! upper bound (EVaR). CVaR and EVaR are computed by golden-section search on
//! their convex one-dimensional reformulations, so `VaR <= CVaR <= EVaR`
//! holds up to the search tolerance.

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    let mid = 0.5 * (lo + hi);
    (mid, f(mid))
}

/// Empirical quantile with the infimum convention:
/// the smallest sample value `v` with `P(X <= v) >= eta`.
pub fn quantile(samples: &[f64], eta: f64) -> f64 {
    assert!(!samples.is_empty());
    assert!(eta > 0.0 && eta < 1.0);
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let idx = ((eta * n as f64) - 1e-9).ceil() as usize;
    sorted[idx.saturating_sub(1).min(n - 1)]
}

/// CVaR scalarization `alpha + mean((L - alpha)_+) / (1 - eta)`.
pub fn cvar_objective(losses: &[f64], eta: f64, alpha: f64) -> f64 {
    let mean: f64 = losses.iter().map(|l| (l - alpha).max(0.0)).sum::<f64>() / losses.len() as f64;
    alpha + mean / (1.0 - eta)
}

/// EVaR scalarization `alpha log(mean(exp(L / alpha)) / (1 - eta))`,
/// evaluated in shifted form so large losses never overflow.
pub fn evar_objective(losses: &[f64], eta: f64, alpha: f64) -> f64 {
    debug_assert!(alpha > 0.0);
    let m = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = losses.iter().map(|l| ((l - m) / alpha).exp()).sum::<f64>() / losses.len() as f64;
    m + alpha * s.ln() - alpha * (1.0 - eta).ln()
}

#[derive(Debug, Clone, Copy)]
pub struct RiskValues {
    pub var: f64,
    pub cvar: f64,
    pub evar: f64,
}

/// Empirical VaR, CVaR, and EVaR of a loss sample at level `eta`.
pub fn empirical_risks(losses: &[f64], eta: f64) -> RiskValues {
    assert!(!losses.is_empty());
    assert!(eta > 0.0 && eta < 1.0, "eta must lie in (0, 1)");
    assert!(losses.iter().all(|l| l.is_finite()));
    let var = quantile(losses, eta);
    let lo = losses.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = losses.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let spread = (hi - lo).max(1e-12);
    let cvar = golden_min(|a| cvar_objective(losses, eta, a), lo - spread, hi + spread, 1e-10 * (1.0 + spread)).1;

    // Bracket the EVaR scale: tiny alpha recovers the max loss, large alpha
    // grows linearly, so double until the objective turns upward.
    let mut alpha_hi = spread.max(1.0);
    while alpha_hi < 1e12 && evar_objective(losses, eta, 2.0 * alpha_hi) < evar_objective(losses, eta, alpha_hi) {
        alpha_hi *= 2.0;
    }
    let evar = golden_min(
        |a| evar_objective(losses, eta, a),
        1e-12 * spread.max(1.0),
        2.0 * alpha_hi,
        1e-10 * (1.0 + alpha_hi),
    )
    .1;
    RiskValues { var, cvar, evar }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;

    #[test]
    fn cvar_of_small_sample() {
        let r = empirical_risks(&[1.0, 2.0, 3.0, 4.0], 0.5);
        assert!((r.cvar - 3.5).abs() < 1e-8, "cvar {}", r.cvar);
        assert_eq!(r.var, 2.0);
    }

    #[test]
    fn cvar_recovers_mean_for_tiny_eta() {
        let losses = [1.0, 2.0, 3.0, 4.0];
        let r = empirical_risks(&losses, 1e-9);
        assert!((r.cvar - 2.5).abs() < 1e-6, "cvar {}", r.cvar);
    }

    #[test]
    fn ordering_var_cvar_evar() {
        let mut rng = StreamRng::new(21, 0);
        for trial in 0..200 {
            let n = 20 + (trial % 80);
            let losses: Vec<f64> = (0..n).map(|_| rng.normal() * 2.0 + 0.3).collect();
            for eta in [0.5, 0.8, 0.9, 0.99] {
                let r = empirical_risks(&losses, eta);
                assert!(r.var <= r.cvar + 1e-9, "VaR {} > CVaR {}", r.var, r.cvar);
                assert!(r.cvar <= r.evar + 1e-9, "CVaR {} > EVaR {}", r.cvar, r.evar);
            }
        }
    }

    #[test]
    fn evar_translation_equivariant() {
        let mut rng = StreamRng::new(22, 0);
        let losses: Vec<f64> = (0..200).map(|_| rng.normal()).collect();
        let shifted: Vec<f64> = losses.iter().map(|l| l + 2.5).collect();
        let a = empirical_risks(&losses, 0.9);
        let b = empirical_risks(&shifted, 0.9);
        assert!((b.evar - a.evar - 2.5).abs() < 1e-7, "{} vs {}", b.evar, a.evar + 2.5);
        assert!((b.cvar - a.cvar - 2.5).abs() < 1e-7);
    }

    #[test]
    fn quantile_inf_convention() {
        // P(X <= 2) = 0.5 >= 0.5, and 2 is the smallest such value.
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.74), 3.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.76), 4.0);
    }
}
