//! Per-agent policies: a Bernoulli distribution over {0, 1} for the matrix
//! game and a fixed-width Gaussian over the real line for the continuous game.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bernoulli probabilities are kept inside `[PROB_FLOOR, 1 - PROB_FLOOR]` so
/// that KL divergences stay finite.
pub const PROB_FLOOR: f64 = 1e-6;
pub const PROB_CEIL: f64 = 1.0 - PROB_FLOOR;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum PolicyParams {
    /// `p1` is the probability of playing action 1.
    Bernoulli { p1: f64 },
    /// Gaussian over a scalar action with fixed standard deviation.
    Gaussian { mu: f64, sigma: f64 },
}

impl PolicyParams {
    pub fn bernoulli(p1: f64) -> Self {
        Self::Bernoulli {
            p1: clip_prob(p1),
        }
    }

    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "gaussian sigma must be positive, got {sigma}"
            )));
        }
        Ok(Self::Gaussian { mu, sigma })
    }

    pub fn family(&self) -> &'static str {
        match self {
            Self::Bernoulli { .. } => "bernoulli",
            Self::Gaussian { .. } => "gaussian",
        }
    }

    /// The trainable scalar: `p1` or `mu`.
    pub fn parameter(&self) -> f64 {
        match *self {
            Self::Bernoulli { p1 } => p1,
            Self::Gaussian { mu, .. } => mu,
        }
    }

    /// Probability of a binary action under a Bernoulli policy.
    pub fn prob(&self, action: u8) -> Result<f64> {
        match *self {
            Self::Bernoulli { p1 } => Ok(if action == 1 { p1 } else { 1.0 - p1 }),
            Self::Gaussian { .. } => Err(Error::UnsupportedFamily("gaussian")),
        }
    }

    /// Draw an unclipped sample: a bit for Bernoulli, a raw normal draw for
    /// Gaussian. The score function is evaluated at this raw value.
    pub fn sample_raw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Bernoulli { p1 } => {
                if rng.random::<f64>() < p1 {
                    1.0
                } else {
                    0.0
                }
            }
            Self::Gaussian { mu, sigma } => Normal::new(mu, sigma)
                .expect("sigma validated positive")
                .sample(rng),
        }
    }
}

pub fn clip_prob(p: f64) -> f64 {
    p.clamp(PROB_FLOOR, PROB_CEIL)
}

/// One policy per agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    pub agents: Vec<PolicyParams>,
}

impl JointPolicy {
    pub fn new(agents: Vec<PolicyParams>) -> Result<Self> {
        let Some(first) = agents.first() else {
            return Err(Error::EmptySystem);
        };
        if agents.iter().any(|a| a.family() != first.family()) {
            return Err(Error::InvalidPair("joint policy mixes policy families"));
        }
        Ok(Self { agents })
    }

    pub fn uniform(template: PolicyParams, n: usize) -> Result<Self> {
        Self::new(vec![template; n])
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn get(&self, agent: usize) -> Result<&PolicyParams> {
        self.agents.get(agent).ok_or(Error::Index {
            index: agent,
            n_agents: self.agents.len(),
        })
    }
}

/// `KL(old || new)`, old policy first.
pub fn kl_divergence(old: &PolicyParams, new: &PolicyParams) -> Result<f64> {
    match (*old, *new) {
        (PolicyParams::Bernoulli { p1: p }, PolicyParams::Bernoulli { p1: q }) => {
            Ok(bernoulli_kl(p, q))
        }
        (
            PolicyParams::Gaussian { mu: m0, sigma: s0 },
            PolicyParams::Gaussian { mu: m1, sigma: s1 },
        ) => {
            if s0 != s1 {
                return Err(Error::InvalidPair("gaussian policies must share sigma"));
            }
            Ok(gaussian_kl(m0, m1, s0))
        }
        _ => Err(Error::InvalidPair("policies belong to different families")),
    }
}

pub(crate) fn bernoulli_kl(p: f64, q: f64) -> f64 {
    let term = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * (a / b).ln() };
    // clamp tiny negative rounding at p == q
    (term(p, q) + term(1.0 - p, 1.0 - q)).max(0.0)
}

pub(crate) fn gaussian_kl(mu_old: f64, mu_new: f64, sigma: f64) -> f64 {
    let d = mu_old - mu_new;
    d * d / (2.0 * sigma * sigma)
}

/// Draw an action; Gaussian draws are clipped into `bounds`.
pub fn sample_action<R: Rng + ?Sized>(policy: &PolicyParams, bounds: (f64, f64), rng: &mut R) -> f64 {
    let raw = policy.sample_raw(rng);
    match policy {
        PolicyParams::Bernoulli { .. } => raw,
        PolicyParams::Gaussian { .. } => raw.clamp(bounds.0, bounds.1),
    }
}

/// d/dmu of log N(action; mu, sigma^2).
pub fn grad_log_prob(policy: &PolicyParams, action: f64) -> Result<f64> {
    match *policy {
        PolicyParams::Gaussian { mu, sigma } => Ok((action - mu) / (sigma * sigma)),
        PolicyParams::Bernoulli { .. } => Err(Error::UnsupportedFamily("bernoulli")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const BOUNDS: (f64, f64) = (0.0, 7.0);

    #[test]
    fn kl_reference_values() {
        let b = PolicyParams::bernoulli;
        assert_eq!(kl_divergence(&b(0.5), &b(0.5)).unwrap(), 0.0);
        assert_relative_eq!(kl_divergence(&b(0.99), &b(0.5)).unwrap(), 0.637145646205098, epsilon = 1e-12);
        let g = |mu| PolicyParams::gaussian(mu, 1.15).unwrap();
        assert_relative_eq!(kl_divergence(&g(1.0), &g(2.0)).unwrap(), 0.37807183364839325, epsilon = 1e-12);
    }

    #[test]
    fn kl_rejects_invalid_pairs() {
        let b = PolicyParams::bernoulli(0.3);
        let g = PolicyParams::gaussian(0.0, 1.0).unwrap();
        let g2 = PolicyParams::gaussian(0.0, 2.0).unwrap();
        assert!(matches!(kl_divergence(&b, &g), Err(Error::InvalidPair(_))));
        assert!(matches!(kl_divergence(&g, &g2), Err(Error::InvalidPair(_))));
    }

    #[test]
    fn bernoulli_kl_is_asymmetric() {
        let (p, q) = (PolicyParams::bernoulli(0.9), PolicyParams::bernoulli(0.5));
        let fwd = kl_divergence(&p, &q).unwrap();
        let rev = kl_divergence(&q, &p).unwrap();
        assert!((fwd - rev).abs() > 1e-3);
    }

    #[test]
    fn bernoulli_sampling_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hi = PolicyParams::bernoulli(1.0 - 1e-6);
        let ones: f64 = (0..10_000).map(|_| sample_action(&hi, BOUNDS, &mut rng)).sum();
        assert!(ones / 10_000.0 >= 0.999);
        let lo = PolicyParams::bernoulli(1e-6);
        assert_eq!(sample_action(&lo, BOUNDS, &mut rng), 0.0);
    }

    #[test]
    fn gaussian_sampling_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = PolicyParams::gaussian(3.5, 1.15).unwrap();
        let n = 100_000;
        let mean = (0..n).map(|_| sample_action(&g, BOUNDS, &mut rng)).sum::<f64>() / n as f64;
        assert!((mean - 3.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn gaussian_samples_are_clipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PolicyParams::gaussian(0.0, 1.15).unwrap();
        for _ in 0..1000 {
            let a = sample_action(&g, BOUNDS, &mut rng);
            assert!((0.0..=7.0).contains(&a));
        }
    }

    #[test]
    fn score_function_values() {
        let g1 = PolicyParams::gaussian(2.0, 1.0).unwrap();
        assert_eq!(grad_log_prob(&g1, 2.0).unwrap(), 0.0);
        let g = PolicyParams::gaussian(2.0, 1.15).unwrap();
        assert_relative_eq!(grad_log_prob(&g, 3.0).unwrap(), 0.7561436672967864, epsilon = 1e-12);
        assert_relative_eq!(grad_log_prob(&g, 1.0).unwrap(), -0.7561436672967864, epsilon = 1e-12);
        assert!(matches!(
            grad_log_prob(&PolicyParams::bernoulli(0.5), 1.0),
            Err(Error::UnsupportedFamily(_))
        ));
    }

    #[test]
    fn score_function_has_zero_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = PolicyParams::gaussian(3.0, 1.15).unwrap();
        let n = 100_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| grad_log_prob(&g, g.sample_raw(&mut rng)).unwrap())
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!(mean.abs() < 5.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn joint_policy_rejects_mixed_families() {
        let r = JointPolicy::new(vec![
            PolicyParams::bernoulli(0.5),
            PolicyParams::gaussian(1.0, 1.0).unwrap(),
        ]);
        assert!(r.is_err());
        assert!(matches!(JointPolicy::new(vec![]), Err(Error::EmptySystem)));
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_zero_on_diagonal(p in 1e-6f64..1.0 - 1e-6, q in 1e-6f64..1.0 - 1e-6) {
            let (a, b) = (PolicyParams::bernoulli(p), PolicyParams::bernoulli(q));
            prop_assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
            prop_assert_eq!(kl_divergence(&a, &a).unwrap(), 0.0);
        }

        #[test]
        fn gaussian_kl_symmetric_and_monotone(mu in -5.0f64..5.0, d in 0.0f64..3.0, sigma in 0.1f64..3.0) {
            let g = |m| PolicyParams::gaussian(m, sigma).unwrap();
            let k1 = kl_divergence(&g(mu), &g(mu + d)).unwrap();
            let k2 = kl_divergence(&g(mu + d), &g(mu)).unwrap();
            prop_assert!((k1 - k2).abs() <= 1e-12 * k1.max(1.0));
            let k3 = kl_divergence(&g(mu), &g(mu + d + 0.01)).unwrap();
            prop_assert!(k3 > k1);
        }

        #[test]
        fn bernoulli_kl_convex_around_p(p in 0.05f64..0.95, h in 1e-3f64..0.04) {
            let f = |q: f64| bernoulli_kl(p, q);
            // second difference around q = p
            prop_assert!(f(p + h) + f(p - h) - 2.0 * f(p) > 0.0);
        }
    }
}
