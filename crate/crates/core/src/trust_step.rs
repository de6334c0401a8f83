//! Closed-form maximization of a linearized surrogate over a KL ball.
//!
//! With the surrogate linear in the policy parameter, the constrained optimum
//! sits on the boundary of the feasible set in the direction of the signal.
//! For Bernoulli policies the boundary is found by bisection on
//! `KL(p || q) = delta`; for equal-sigma Gaussians it is `|mu' - mu| = sigma * sqrt(2 delta)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{bernoulli_kl, gaussian_kl, PolicyParams, PROB_CEIL, PROB_FLOOR};

/// Bisection stops once the KL at the feasible endpoint is within this of delta.
pub const KL_BISECTION_TOL: f64 = 1e-10;

const MAX_BISECTION_STEPS: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub new_params: PolicyParams,
    pub realized_kl: f64,
    /// First-order surrogate improvement, `signal * (theta' - theta)`.
    pub surrogate_gain: f64,
    /// The step stopped at a parameter bound before reaching the KL boundary.
    pub bound_limited: bool,
}

impl StepResult {
    fn stay(params: PolicyParams) -> Self {
        Self {
            new_params: params,
            realized_kl: 0.0,
            surrogate_gain: 0.0,
            bound_limited: false,
        }
    }
}

fn check_prob(p: f64) -> Result<()> {
    // allow one ulp of slack so clip-boundary values round-trip
    if !(PROB_FLOOR * (1.0 - 1e-12)..=PROB_CEIL + 1e-16).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "probability {p} outside [{PROB_FLOOR}, {PROB_CEIL}]"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "KL radius must be finite and nonnegative, got {delta}"
        )));
    }
    Ok(())
}

/// Furthest point from `p` toward `limit` whose KL stays within `delta`.
/// Returns the point and whether `limit` itself was feasible.
fn kl_endpoint(p: f64, delta: f64, limit: f64) -> (f64, bool) {
    if bernoulli_kl(p, limit) <= delta {
        return (limit, true);
    }
    let (mut inside, mut outside) = (p, limit);
    for _ in 0..MAX_BISECTION_STEPS {
        let mid = 0.5 * (inside + outside);
        if mid == inside || mid == outside {
            break;
        }
        let kl = bernoulli_kl(p, mid);
        if kl <= delta {
            inside = mid;
            if delta - kl <= KL_BISECTION_TOL {
                break;
            }
        } else {
            outside = mid;
        }
    }
    (inside, false)
}

/// The maximal interval around `p` on which `KL(p || q) <= delta`, clamped to
/// the probability clip box.
pub fn bernoulli_kl_interval(p: f64, delta: f64) -> Result<(f64, f64)> {
    check_prob(p)?;
    check_delta(delta)?;
    if delta == 0.0 {
        return Ok((p, p));
    }
    Ok((kl_endpoint(p, delta, PROB_FLOOR).0, kl_endpoint(p, delta, PROB_CEIL).0))
}

/// Trust-region step for a Bernoulli policy given the advantage gap
/// `A(1) - A(0)`.
pub fn bernoulli_step(p: f64, advantage_gap: f64, delta: f64) -> Result<StepResult> {
    check_prob(p)?;
    check_delta(delta)?;
    let here = PolicyParams::Bernoulli { p1: p };
    if advantage_gap == 0.0 || delta == 0.0 {
        return Ok(StepResult::stay(here));
    }
    let limit = if advantage_gap > 0.0 { PROB_CEIL } else { PROB_FLOOR };
    let (q, hit_limit) = kl_endpoint(p, delta, limit);
    let realized_kl = bernoulli_kl(p, q);
    Ok(StepResult {
        new_params: PolicyParams::Bernoulli { p1: q },
        realized_kl,
        surrogate_gain: advantage_gap * (q - p),
        bound_limited: hit_limit,
    })
}

/// Trust-region step for a fixed-sigma Gaussian mean given a gradient estimate.
pub fn gaussian_step(
    mu: f64,
    sigma: f64,
    grad_estimate: f64,
    delta: f64,
    bounds: (f64, f64),
) -> Result<StepResult> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
    }
    check_delta(delta)?;
    let here = PolicyParams::Gaussian { mu, sigma };
    if grad_estimate == 0.0 || delta == 0.0 {
        return Ok(StepResult::stay(here));
    }
    let radius = sigma * (2.0 * delta).sqrt();
    let target = mu + grad_estimate.signum() * radius;
    let new_mu = target.clamp(bounds.0, bounds.1);
    let realized_kl = gaussian_kl(mu, new_mu, sigma);
    Ok(StepResult {
        new_params: PolicyParams::Gaussian { mu: new_mu, sigma },
        realized_kl,
        surrogate_gain: grad_estimate * (new_mu - mu),
        bound_limited: new_mu != target,
    })
}

/// Dispatch on the policy family. `bounds` clip Gaussian means.
pub fn trust_region_step(
    params: &PolicyParams,
    signal: f64,
    delta: f64,
    bounds: (f64, f64),
) -> Result<StepResult> {
    match *params {
        PolicyParams::Bernoulli { p1 } => bernoulli_step(p1, signal, delta),
        PolicyParams::Gaussian { mu, sigma } => gaussian_step(mu, sigma, signal, delta, bounds),
    }
}

/// True when the parameter already sits on the bound the signal pushes it
/// toward, so no step can improve the surrogate.
pub fn blocked_by_bounds(params: &PolicyParams, signal: f64, bounds: (f64, f64)) -> bool {
    let (theta, lo, hi) = match *params {
        PolicyParams::Bernoulli { p1 } => (p1, PROB_FLOOR, PROB_CEIL),
        PolicyParams::Gaussian { mu, .. } => (mu, bounds.0, bounds.1),
    };
    (signal > 0.0 && theta >= hi) || (signal < 0.0 && theta <= lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const BOUNDS: (f64, f64) = (0.0, 7.0);

    #[test]
    fn interval_reference_values() {
        assert_eq!(bernoulli_kl_interval(0.5, 0.0).unwrap(), (0.5, 0.5));
        // 0.5 ln(0.25 / (0.25 - x^2)) = 0.02  =>  x = sqrt(0.25 (1 - e^-0.04))
        let x = (0.25 * (1.0 - (-0.04f64).exp())).sqrt();
        let (lo, hi) = bernoulli_kl_interval(0.5, 0.02).unwrap();
        assert_relative_eq!(lo, 0.5 - x, epsilon = 1e-8);
        assert_relative_eq!(hi, 0.5 + x, epsilon = 1e-8);
        assert_relative_eq!(hi, 0.59901, epsilon = 1e-5);
        // KL(0.99 || 1e-6) is about 13.6
        assert_eq!(bernoulli_kl_interval(0.99, 20.0).unwrap(), (PROB_FLOOR, PROB_CEIL));
        assert!(bernoulli_kl_interval(0.99, 10.0).unwrap().0 > PROB_FLOOR);
    }

    #[test]
    fn interval_rejects_bad_probability() {
        assert!(bernoulli_kl_interval(0.0, 0.1).is_err());
        assert!(bernoulli_kl_interval(1.0, 0.1).is_err());
        assert!(bernoulli_kl_interval(0.5, -1.0).is_err());
    }

    #[test]
    fn bernoulli_step_cases() {
        let s = bernoulli_step(0.5, 0.75, 0.02).unwrap();
        assert_relative_eq!(s.new_params.parameter(), 0.5990082835520302, epsilon = 1e-8);
        assert_relative_eq!(s.surrogate_gain, 0.07425621266402262, epsilon = 1e-8);
        assert!((s.realized_kl - 0.02).abs() <= 1e-9);

        let z = bernoulli_step(0.5, 0.0, 0.3).unwrap();
        assert_eq!(z.new_params.parameter(), 0.5);
        assert_eq!(z.realized_kl, 0.0);

        let nobudget = bernoulli_step(0.01, 1.0, 0.0).unwrap();
        assert_eq!(nobudget.new_params.parameter(), 0.01);
    }

    #[test]
    fn gaussian_step_cases() {
        let s = gaussian_step(1.0, 1.15, 2.3, 5e-4, BOUNDS).unwrap();
        assert_relative_eq!(s.new_params.parameter(), 1.0 + 0.03636619309193636, epsilon = 1e-12);
        assert_relative_eq!(s.realized_kl, 5e-4, epsilon = 1e-15);
        assert!(!s.bound_limited);

        let z = gaussian_step(3.0, 1.15, 0.0, 0.4, BOUNDS).unwrap();
        assert_eq!(z.new_params.parameter(), 3.0);
        assert_eq!(z.realized_kl, 0.0);

        let c = gaussian_step(6.99, 1.15, 10.0, 0.1, BOUNDS).unwrap();
        assert_eq!(c.new_params.parameter(), 7.0);
        assert_relative_eq!(c.realized_kl, 3.780718336483932e-05, max_relative = 1e-9);
        assert!(c.bound_limited);
        assert!(c.realized_kl < 0.1);
    }

    #[test]
    fn pinned_detection() {
        let floor = PolicyParams::bernoulli(0.0);
        assert!(blocked_by_bounds(&floor, -1.0, BOUNDS));
        assert!(!blocked_by_bounds(&floor, 1.0, BOUNDS));
        let top = PolicyParams::gaussian(7.0, 1.0).unwrap();
        assert!(blocked_by_bounds(&top, 0.5, BOUNDS));
        assert!(!blocked_by_bounds(&top, -0.5, BOUNDS));
        // a pinned step realizes no KL
        let s = bernoulli_step(PROB_FLOOR, -1.0, 0.01).unwrap();
        assert_eq!(s.realized_kl, 0.0);
    }

    proptest! {
        #[test]
        fn bernoulli_constraint_and_saturation(p in 1e-6f64..1.0 - 1e-6, gap in -2.0f64..2.0, delta in 0.0f64..2.0) {
            let s = bernoulli_step(p, gap, delta).unwrap();
            prop_assert!(s.realized_kl <= delta + 1e-9);
            prop_assert!(s.surrogate_gain >= 0.0);
            if gap != 0.0 && !s.bound_limited {
                prop_assert!((s.realized_kl - delta).abs() <= 1e-9);
            }
            // reversing the sign moves to the other side of p
            let r = bernoulli_step(p, -gap, delta).unwrap();
            let (q, qr) = (s.new_params.parameter(), r.new_params.parameter());
            prop_assert!((q - p) * (qr - p) <= 0.0);
        }

        #[test]
        fn gaussian_constraint_and_reflection(mu in 0.0f64..7.0, g in -5.0f64..5.0, delta in 0.0f64..1.0) {
            let s = gaussian_step(mu, 1.15, g, delta, BOUNDS).unwrap();
            prop_assert!(s.realized_kl <= delta + 1e-9);
            if g != 0.0 && !s.bound_limited {
                prop_assert!((s.realized_kl - delta).abs() <= 1e-9);
                let r = gaussian_step(mu, 1.15, -g, delta, BOUNDS).unwrap();
                if !r.bound_limited {
                    let (a, b) = (s.new_params.parameter() - mu, r.new_params.parameter() - mu);
                    prop_assert!((a + b).abs() < 1e-12);
                }
            }
            prop_assert!((0.0..=7.0).contains(&s.new_params.parameter()));
        }

        #[test]
        fn gain_monotone_in_delta(p in 1e-4f64..1.0 - 1e-4, gap in -1.0f64..1.0, mu in 0.0f64..7.0) {
            let mut last_b = 0.0;
            let mut last_g = 0.0;
            for k in 0..20 {
                let d = 1e-4 * 1.6f64.powi(k);
                let b = bernoulli_step(p, gap, d).unwrap().surrogate_gain;
                let g = gaussian_step(mu, 1.15, gap, d, BOUNDS).unwrap().surrogate_gain;
                prop_assert!(b >= last_b - 1e-12);
                prop_assert!(g >= last_g - 1e-12);
                last_b = b;
                last_g = g;
            }
        }
    }
}
