//! Self-checks run by the `selftest` subcommand: water-filling against a
//! brute-force multiplier grid, and sampled advantages against enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::advantage::{exact_agent_advantage, mc_advantage, AdvantageValues, CriticBaseline};
use crate::allocation::solve_lambda_bisection;
use crate::error::Result;
use crate::games::{Game, MatrixGameSpec, RewardVariant};
use crate::policy::{JointPolicy, PolicyParams};

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Radii from the multiplier on a log grid over `[1e-9, max U]` whose total
/// lands closest to `delta_total`.
pub fn grid_oracle(utilities: &[f64], delta_total: f64, points: usize) -> Vec<f64> {
    let u_max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (1e-9_f64.ln(), u_max.ln());
    let step = (hi - lo) / (points - 1) as f64;
    let total_at = |lambda: f64| -> f64 { utilities.iter().map(|u| (u / lambda - 1.0).max(0.0)).sum() };
    let mut best = (f64::INFINITY, u_max);
    for k in 0..points {
        let lambda = (lo + step * k as f64).exp();
        let gap = (total_at(lambda) - delta_total).abs();
        if gap < best.0 {
            best = (gap, lambda);
        }
    }
    utilities.iter().map(|u| (u / best.1 - 1.0).max(0.0)).collect()
}

/// Random instance: `2 <= m <= 16`, `U_i ~ U[-1, 5]`, budget `~ U[0.1, 10]`,
/// redrawn until some utility is positive.
pub fn random_instance<R: Rng>(rng: &mut R) -> (Vec<f64>, f64) {
    loop {
        let m = rng.random_range(2..=16);
        let u: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..5.0)).collect();
        let total = rng.random_range(0.1..10.0);
        if u.iter().any(|&x| x > 0.0) {
            return (u, total);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReport {
    pub instances: usize,
    pub max_radius_error: f64,
    pub max_budget_error: f64,
}

pub fn waterfill_oracle_check(instances: usize, grid_points: usize, seed: u64) -> Result<OracleReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<(Vec<f64>, f64)> = (0..instances).map(|_| random_instance(&mut rng)).collect();
    let errors = cases
        .par_iter()
        .map(|(u, total)| {
            let solve = solve_lambda_bisection(u, *total, 0.01)?;
            let deltas: Vec<f64> = u.iter().map(|x| (x / solve.lambda - 1.0).max(0.0)).collect();
            let oracle = grid_oracle(u, *total, grid_points);
            let radius = deltas
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            Ok((radius, (deltas.iter().sum::<f64>() - total).abs()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OracleReport {
        instances,
        max_radius_error: errors.iter().map(|e| e.0).fold(0.0, f64::max),
        max_budget_error: errors.iter().map(|e| e.1).fold(0.0, f64::max),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvantageReport {
    /// Largest `|sampled - exact| / SE` over agents and actions.
    pub max_z: f64,
    /// Largest `|E_pi[A]|` of the exact advantages.
    pub max_centering_error: f64,
}

/// Compare sampled per-action advantages `mean(r | a) - mean(r)` with exact
/// enumeration for every agent of a 4-agent matrix game.
pub fn advantage_oracle_check(probs: &[f64], batch: usize, seed: u64) -> Result<AdvantageReport> {
    let game = Game::Matrix(MatrixGameSpec::new(probs.len(), RewardVariant::LiteralSuffix)?);
    let joint = JointPolicy::new(probs.iter().map(|&p| PolicyParams::bernoulli(p)).collect())?;
    let critic = CriticBaseline::new(0.0, 0.2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_z: f64 = 0.0;
    let mut max_centering: f64 = 0.0;
    for agent in 0..joint.len() {
        let exact = exact_agent_advantage(&game, &joint, &[], agent)?;
        let AdvantageValues::Exact(a) = exact.values else {
            unreachable!("enumeration yields exact values")
        };
        let p1 = joint.agents[agent].parameter();
        max_centering = max_centering.max(((1.0 - p1) * a[0] + p1 * a[1]).abs());

        let est = mc_advantage(&game, &joint, &[], agent, batch, &critic, &mut rng)?;
        let samples = est.samples().unwrap_or_default();
        let n = samples.len() as f64;
        let mean = samples.iter().map(|s| s.reward).sum::<f64>() / n;
        let var = samples.iter().map(|s| (s.reward - mean).powi(2)).sum::<f64>() / (n - 1.0);
        for action in [0u8, 1] {
            let rs: Vec<f64> = samples
                .iter()
                .filter(|s| s.action == f64::from(action))
                .map(|s| s.reward)
                .collect();
            if rs.len() < 2 {
                continue;
            }
            let k = rs.len() as f64;
            let mean_a = rs.iter().sum::<f64>() / k;
            let var_a = rs.iter().map(|r| (r - mean_a).powi(2)).sum::<f64>() / (k - 1.0);
            let se = (var_a / k + var / n).sqrt();
            let diff = (mean_a - mean) - a[usize::from(action)];
            if se > 0.0 {
                max_z = max_z.max(diff.abs() / se);
            } else if diff.abs() > 1e-12 {
                max_z = f64::INFINITY;
            }
        }
    }
    Ok(AdvantageReport {
        max_z,
        max_centering_error: max_centering,
    })
}

/// Every self-check with its verdict.
pub fn run_all() -> Result<Vec<CheckOutcome>> {
    let oracle = waterfill_oracle_check(100, 1_000_000, 7)?;
    let adv = advantage_oracle_check(&[0.3, 0.6, 0.45, 0.7], 100_000, 11)?;
    Ok(vec![
        CheckOutcome {
            name: "waterfill_grid_oracle",
            passed: oracle.max_radius_error < 1e-3 && oracle.max_budget_error < 0.01,
            detail: format!(
                "{} instances, max radius error {:.3e}, max budget error {:.3e}",
                oracle.instances, oracle.max_radius_error, oracle.max_budget_error
            ),
        },
        CheckOutcome {
            name: "advantage_vs_enumeration",
            passed: adv.max_z <= 3.0 && adv.max_centering_error < 1e-12,
            detail: format!(
                "max z {:.2}, max centering error {:.1e}",
                adv.max_z, adv.max_centering_error
            ),
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_oracle_on_hand_case() {
        let d = grid_oracle(&[4.0, 2.0, 1.0], 3.0, 200_001);
        assert!((d[0] - 7.0 / 3.0).abs() < 1e-3);
        assert!((d[1] - 2.0 / 3.0).abs() < 1e-3);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn small_oracle_check_passes() {
        let r = waterfill_oracle_check(10, 100_000, 3).unwrap();
        assert!(r.max_radius_error < 1e-2, "{r:?}");
        assert!(r.max_budget_error < 0.01, "{r:?}");
    }

    #[test]
    fn small_advantage_check_is_centered() {
        let r = advantage_oracle_check(&[0.3, 0.6, 0.45, 0.7], 20_000, 5).unwrap();
        assert!(r.max_centering_error < 1e-12);
        assert!(r.max_z.is_finite());
    }
}
