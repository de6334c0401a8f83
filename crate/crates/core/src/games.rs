//! The two benchmark games: an N-agent sparse-reward coordination matrix game
//! over binary actions and a two-player continuous game whose reward surface
//! has a narrow local peak near (1, 1) and a broad global peak near (5, 5).
//!
//! Both games are single-state and single-step, so a joint action maps
//! directly to a reward and expectations can be computed by enumeration or
//! quadrature.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest agent count for which `enumerate_profiles` will materialize `2^n`
/// joint actions.
pub const MAX_ENUMERATED_AGENTS: usize = 20;

pub const MATRIX_MAX_REWARD: f64 = 1.5;

/// One binary action per agent.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct DiscreteProfile(Vec<u8>);

impl DiscreteProfile {
    pub fn new(actions: Vec<u8>) -> Result<Self> {
        if actions.len() < 2 {
            return Err(Error::InvalidParameter(format!(
                "a profile needs at least 2 agents, got {}",
                actions.len()
            )));
        }
        if let Some(bad) = actions.iter().find(|&&a| a > 1) {
            return Err(Error::InvalidParameter(format!(
                "binary action expected, got {bad}"
            )));
        }
        Ok(Self(actions))
    }

    /// Decode the low `n` bits of `bits`; agent 0 is the most significant bit
    /// so that enumeration order is lexicographic.
    pub(crate) fn from_bits(bits: u32, n: usize) -> Self {
        Self(
            (0..n)
                .map(|i| ((bits >> (n - 1 - i)) & 1) as u8)
                .collect(),
        )
    }

    pub fn actions(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardVariant {
    /// Reward 1 whenever some agent plays 0 and every later agent also plays 0,
    /// i.e. whenever the last agent plays 0.
    #[default]
    LiteralSuffix,
    /// Reward 1 only for profiles of the form 1..10..0 with at least one 0.
    PrefixOnes,
}

impl FromStr for RewardVariant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "literal_suffix" => Ok(Self::LiteralSuffix),
            "prefix_ones" => Ok(Self::PrefixOnes),
            other => Err(format!(
                "unknown reward variant `{other}` (expected literal_suffix or prefix_ones)"
            )),
        }
    }
}

impl fmt::Display for RewardVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::LiteralSuffix => "literal_suffix",
            Self::PrefixOnes => "prefix_ones",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixGameSpec {
    pub n_agents: usize,
    pub reward_variant: RewardVariant,
}

impl MatrixGameSpec {
    pub fn new(n_agents: usize, reward_variant: RewardVariant) -> Result<Self> {
        if n_agents < 2 {
            return Err(Error::InvalidParameter(format!(
                "matrix game needs at least 2 agents, got {n_agents}"
            )));
        }
        Ok(Self {
            n_agents,
            reward_variant,
        })
    }

    pub fn max_reward(&self) -> f64 {
        MATRIX_MAX_REWARD
    }
}

pub fn matrix_reward(profile: &DiscreteProfile, spec: &MatrixGameSpec) -> Result<f64> {
    if profile.len() != spec.n_agents {
        return Err(Error::Shape {
            expected: spec.n_agents,
            actual: profile.len(),
        });
    }
    Ok(matrix_reward_unchecked(profile.actions(), spec.reward_variant))
}

/// Reward for a slice of binary actions; callers guarantee the length.
pub(crate) fn matrix_reward_unchecked(actions: &[u8], variant: RewardVariant) -> f64 {
    if actions.iter().all(|&a| a == 1) {
        return MATRIX_MAX_REWARD;
    }
    let hit = match variant {
        RewardVariant::LiteralSuffix => actions.last() == Some(&0),
        RewardVariant::PrefixOnes => {
            // non-increasing: once a 0 appears no 1 may follow
            actions.windows(2).all(|w| w[0] >= w[1])
        }
    };
    if hit {
        1.0
    } else {
        0.0
    }
}

/// All `2^n` binary profiles in lexicographic order (agent 0 most significant).
pub fn enumerate_profiles(n: usize) -> Result<Vec<DiscreteProfile>> {
    if n > MAX_ENUMERATED_AGENTS {
        return Err(Error::EnumerationLimit(n));
    }
    if n == 0 {
        return Err(Error::InvalidParameter("cannot enumerate zero agents".into()));
    }
    Ok((0..1u32 << n)
        .map(|bits| DiscreteProfile::from_bits(bits, n))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContinuousAction {
    pub a1: f64,
    pub a2: f64,
}

impl ContinuousAction {
    pub fn new(a1: f64, a2: f64) -> Self {
        Self { a1, a2 }
    }
}

/// An axis-aligned Gaussian bump with peak height `weight` (not normalized).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub weight: f64,
    pub mean: (f64, f64),
    pub std: (f64, f64),
}

impl Bump {
    fn eval(&self, a1: f64, a2: f64) -> f64 {
        let z1 = (a1 - self.mean.0) / self.std.0;
        let z2 = (a2 - self.mean.1) / self.std.1;
        self.weight * (-0.5 * (z1 * z1 + z2 * z2)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DifferentialGameSpec {
    pub bumps: Vec<Bump>,
    pub linear_coef: f64,
    pub action_bounds: (f64, f64),
}

impl Default for DifferentialGameSpec {
    fn default() -> Self {
        Self {
            bumps: vec![
                Bump {
                    weight: 10.0,
                    mean: (5.0, 5.0),
                    std: (1.0, 3.0),
                },
                Bump {
                    weight: 5.3,
                    mean: (1.0, 1.0),
                    std: (1.0, 1.0),
                },
            ],
            linear_coef: 0.1,
            action_bounds: (0.0, 7.0),
        }
    }
}

impl DifferentialGameSpec {
    pub fn validate(&self) -> Result<()> {
        for b in &self.bumps {
            if !(b.std.0 > 0.0 && b.std.1 > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "bump standard deviations must be positive, got {:?}",
                    b.std
                )));
            }
        }
        let (lo, hi) = self.action_bounds;
        if !(lo < hi) {
            return Err(Error::InvalidParameter(format!(
                "empty action interval [{lo}, {hi}]"
            )));
        }
        Ok(())
    }

    pub fn clip(&self, x: f64) -> f64 {
        x.clamp(self.action_bounds.0, self.action_bounds.1)
    }

    fn contains(&self, x: f64) -> bool {
        x >= self.action_bounds.0 && x <= self.action_bounds.1
    }

    /// Reward at an in-bounds point, skipping the bounds check.
    pub(crate) fn reward_unchecked(&self, a1: f64, a2: f64) -> f64 {
        self.bumps.iter().map(|b| b.eval(a1, a2)).sum::<f64>() + self.linear_coef * a1
    }
}

pub fn differential_reward(a: ContinuousAction, spec: &DifferentialGameSpec) -> Result<f64> {
    if !(spec.contains(a.a1) && spec.contains(a.a2)) {
        return Err(Error::Domain {
            a1: a.a1,
            a2: a.a2,
            lo: spec.action_bounds.0,
            hi: spec.action_bounds.1,
        });
    }
    Ok(spec.reward_unchecked(a.a1, a.a2))
}

/// Evaluate the reward on a `resolution x resolution` grid covering the action
/// box, row-major in `a1` then `a2`.
pub fn reward_surface(
    spec: &DifferentialGameSpec,
    resolution: usize,
) -> Result<Vec<(f64, f64, f64)>> {
    if resolution < 2 {
        return Err(Error::InvalidParameter(format!(
            "surface resolution must be at least 2, got {resolution}"
        )));
    }
    let (lo, hi) = spec.action_bounds;
    let step = (hi - lo) / (resolution - 1) as f64;
    let coord = |k: usize| if k + 1 == resolution { hi } else { lo + k as f64 * step };
    let mut out = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let (a1, a2) = (coord(i), coord(j));
            out.push((a1, a2, spec.reward_unchecked(a1, a2)));
        }
    }
    Ok(out)
}

/// Write the reward grid as CSV with columns `a1,a2,reward`.
pub fn export_surface(spec: &DifferentialGameSpec, resolution: usize, path: &Path) -> Result<()> {
    let grid = reward_surface(spec, resolution)?;
    let export_err = |source| Error::Export {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(export_err)?;
    let mut w = std::io::BufWriter::new(file);
    writeln!(w, "a1,a2,reward").map_err(export_err)?;
    for (a1, a2, r) in grid {
        writeln!(
            w,
            "{},{},{}",
            crate::runlog::fmt_f64(a1),
            crate::runlog::fmt_f64(a2),
            crate::runlog::fmt_f64(r)
        )
        .map_err(export_err)?;
    }
    w.flush().map_err(export_err)
}

/// Either benchmark game.
#[derive(Clone, Debug, PartialEq)]
pub enum Game {
    Matrix(MatrixGameSpec),
    Differential(DifferentialGameSpec),
}

impl Game {
    pub fn n_agents(&self) -> usize {
        match self {
            Self::Matrix(spec) => spec.n_agents,
            Self::Differential(_) => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Matrix(_) => "matrix",
            Self::Differential(_) => "differential",
        }
    }

    /// Bounds applied to sampled continuous actions and to Gaussian means.
    pub fn action_bounds(&self) -> (f64, f64) {
        match self {
            Self::Matrix(_) => (0.0, 1.0),
            Self::Differential(spec) => spec.action_bounds,
        }
    }

    pub fn max_reward(&self) -> Option<f64> {
        match self {
            Self::Matrix(spec) => Some(spec.max_reward()),
            Self::Differential(_) => None,
        }
    }

    /// Reward of a joint action given as one scalar per agent: bits for the
    /// matrix game, in-bounds coordinates for the differential game.
    pub(crate) fn reward_of(&self, actions: &[f64], scratch: &mut Vec<u8>) -> f64 {
        match self {
            Self::Matrix(spec) => {
                scratch.clear();
                scratch.extend(actions.iter().map(|&a| u8::from(a > 0.5)));
                matrix_reward_unchecked(scratch, spec.reward_variant)
            }
            Self::Differential(spec) => spec.reward_unchecked(actions[0], actions[1]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn profile(a: &[u8]) -> DiscreteProfile {
        DiscreteProfile::new(a.to_vec()).unwrap()
    }

    #[test]
    fn matrix_reward_cases() {
        let lit = MatrixGameSpec::new(4, RewardVariant::LiteralSuffix).unwrap();
        let pre = MatrixGameSpec::new(4, RewardVariant::PrefixOnes).unwrap();
        assert_eq!(matrix_reward(&profile(&[1, 1, 1, 1]), &lit).unwrap(), 1.5);
        assert_eq!(matrix_reward(&profile(&[1, 1, 1, 0]), &lit).unwrap(), 1.0);
        assert_eq!(matrix_reward(&profile(&[1, 0, 1, 1]), &lit).unwrap(), 0.0);
        assert_eq!(matrix_reward(&profile(&[0, 1, 0, 1]), &pre).unwrap(), 0.0);
        assert_eq!(matrix_reward(&profile(&[0, 1, 0, 0]), &pre).unwrap(), 0.0);
        assert_eq!(matrix_reward(&profile(&[0, 1, 0, 0]), &lit).unwrap(), 1.0);
        assert_eq!(matrix_reward(&profile(&[1, 1, 0, 0]), &pre).unwrap(), 1.0);
        assert_eq!(matrix_reward(&profile(&[0, 0, 0, 0]), &pre).unwrap(), 1.0);
    }

    #[test]
    fn matrix_reward_rejects_length_mismatch() {
        let spec = MatrixGameSpec::new(3, RewardVariant::LiteralSuffix).unwrap();
        let err = matrix_reward(&profile(&[1, 0]), &spec).unwrap_err();
        assert!(matches!(err, Error::Shape { expected: 3, actual: 2 }));
    }

    /// Quantifier form: exists j with a_j = 0 and a_k = 0 for all k > j.
    fn literal_oracle(a: &[u8]) -> f64 {
        if a.iter().all(|&x| x == 1) {
            return 1.5;
        }
        let exists = (0..a.len()).any(|j| a[j] == 0 && (j + 1..a.len()).all(|k| a[k] == 0));
        if exists {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn literal_suffix_matches_quantifier_form() {
        for n in 2..=6 {
            let spec = MatrixGameSpec::new(n, RewardVariant::LiteralSuffix).unwrap();
            for p in enumerate_profiles(n).unwrap() {
                let r = matrix_reward(&p, &spec).unwrap();
                assert_eq!(r, literal_oracle(p.actions()), "{p:?}");
                let last_zero = *p.actions().last().unwrap() == 0;
                assert_eq!(r == 1.0, last_zero);
                let pre = MatrixGameSpec::new(n, RewardVariant::PrefixOnes).unwrap();
                assert!([0.0, 1.0, 1.5].contains(&matrix_reward(&p, &pre).unwrap()));
            }
        }
    }

    #[test]
    fn enumeration() {
        let one = enumerate_profiles(1).unwrap();
        assert_eq!(one.iter().map(|p| p.actions().to_vec()).collect::<Vec<_>>(), vec![vec![0], vec![1]]);
        let two = enumerate_profiles(2).unwrap();
        assert_eq!(two.len(), 4);
        let set: std::collections::HashSet<_> = two.iter().collect();
        assert_eq!(set.len(), 4);
        assert_eq!(enumerate_profiles(10).unwrap().len(), 1024);
        assert!(matches!(enumerate_profiles(21), Err(Error::EnumerationLimit(21))));
    }

    #[test]
    fn differential_reward_reference_points() {
        let spec = DifferentialGameSpec::default();
        let r = |a1, a2| differential_reward(ContinuousAction::new(a1, a2), &spec).unwrap();
        // 10 + 0.5 + 5.3 e^-16
        assert_relative_eq!(r(5.0, 5.0), 10.5 + 5.3 * (-16.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(r(5.0, 5.0), 10.5, epsilon = 1e-4);
        assert_relative_eq!(r(1.0, 1.0), 5.401379128093365, epsilon = 1e-12);
        assert_relative_eq!(r(0.0, 0.0), 1.9497703307006424, epsilon = 1e-12);
        assert!(r(5.0, 5.0) > r(1.0, 1.0));
    }

    #[test]
    fn differential_reward_rejects_out_of_bounds() {
        let spec = DifferentialGameSpec::default();
        assert!(matches!(
            differential_reward(ContinuousAction::new(7.5, 1.0), &spec),
            Err(Error::Domain { .. })
        ));
        assert!(differential_reward(ContinuousAction::new(-1e-9, 1.0), &spec).is_err());
    }

    #[test]
    fn surface_is_positive_and_covers_corners() {
        let spec = DifferentialGameSpec::default();
        let grid = reward_surface(&spec, 141).unwrap();
        assert_eq!(grid.len(), 141 * 141);
        assert!(grid.iter().all(|&(_, _, r)| r > 0.0));
        assert_eq!(grid.first().unwrap().0, 0.0);
        assert_eq!(grid.last().unwrap().0, 7.0);
        assert_eq!(grid.last().unwrap().1, 7.0);
    }
}
