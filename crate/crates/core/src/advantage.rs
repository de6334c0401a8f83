//! Advantage estimation for a single agent, optionally conditioned on the new
//! policies of agents that were already updated earlier in the same
//! iteration.
//!
//! Bernoulli agents on the matrix game get exact advantages by enumerating
//! all joint actions. Any game can be estimated by Monte Carlo against a
//! running-mean critic baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::games::{matrix_reward_unchecked, Game, MatrixGameSpec, MAX_ENUMERATED_AGENTS};
use crate::policy::{grad_log_prob, JointPolicy, PolicyParams};

/// Agents already updated this iteration, with their new policies.
pub type Prefix = [(usize, PolicyParams)];

/// Running estimate of the expected reward, used as a baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticBaseline {
    pub value: f64,
    pub lr: f64,
}

impl CriticBaseline {
    pub fn new(value: f64, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "critic learning rate must lie in (0, 1], got {lr}"
            )));
        }
        Ok(Self { value, lr })
    }
}

/// One relaxation step of the baseline toward the observed mean reward.
pub fn update_critic(critic: CriticBaseline, batch_mean_reward: f64) -> CriticBaseline {
    CriticBaseline {
        value: critic.value + critic.lr * (batch_mean_reward - critic.value),
        ..critic
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// Action as seen by the environment (clipped for Gaussian policies).
    pub action: f64,
    pub reward: f64,
    pub advantage: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum AdvantageValues {
    /// `[A(0), A(1)]` for a Bernoulli agent.
    Exact([f64; 2]),
    Sampled(Vec<Sample>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvantageEstimate {
    pub agent: usize,
    /// The agent's current (pre-update) policy.
    pub policy: PolicyParams,
    pub values: AdvantageValues,
    /// Score-function estimate of d/dtheta of the linear surrogate, where theta
    /// is `p1` or `mu`. Present for sampled estimates.
    pub grad_estimate: Option<f64>,
    /// Surrogate value at the current policy, `E_{a ~ pi}[A(a)]`.
    pub surrogate_value: f64,
}

impl AdvantageEstimate {
    /// Slope of the linear surrogate in the trainable parameter. Its sign is the
    /// direction of the trust-region step.
    pub fn signal(&self) -> f64 {
        match &self.values {
            AdvantageValues::Exact([a0, a1]) => a1 - a0,
            AdvantageValues::Sampled(_) => self.grad_estimate.unwrap_or(0.0),
        }
    }

    pub fn samples(&self) -> Option<&[Sample]> {
        match &self.values {
            AdvantageValues::Sampled(s) => Some(s),
            AdvantageValues::Exact(_) => None,
        }
    }

    pub fn mean_reward(&self) -> Option<f64> {
        self.samples()
            .filter(|s| !s.is_empty())
            .map(|s| s.iter().map(|x| x.reward).sum::<f64>() / s.len() as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UtilityMode {
    /// `E[A]` under the current policy.
    Mean,
    /// `E[max(A, 0)]`.
    #[default]
    PositiveMean,
    /// `E[|A|]`.
    AbsMean,
}

impl UtilityMode {
    fn apply(self, a: f64) -> f64 {
        match self {
            Self::Mean => a,
            Self::PositiveMean => a.max(0.0),
            Self::AbsMean => a.abs(),
        }
    }
}

impl FromStr for UtilityMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Self::Mean),
            "positive_mean" => Ok(Self::PositiveMean),
            "abs_mean" => Ok(Self::AbsMean),
            other => Err(format!(
                "unknown utility mode `{other}` (expected mean, positive_mean or abs_mean)"
            )),
        }
    }
}

impl fmt::Display for UtilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::PositiveMean => "positive_mean",
            Self::AbsMean => "abs_mean",
        })
    }
}

pub fn utility(est: &AdvantageEstimate, mode: UtilityMode) -> Result<f64> {
    match &est.values {
        AdvantageValues::Exact(adv) => {
            let p0 = est.policy.prob(0)?;
            let p1 = est.policy.prob(1)?;
            Ok(p0 * mode.apply(adv[0]) + p1 * mode.apply(adv[1]))
        }
        AdvantageValues::Sampled(samples) => {
            if samples.is_empty() {
                return Err(Error::InsufficientData("no advantage samples"));
            }
            Ok(samples.iter().map(|s| mode.apply(s.advantage)).sum::<f64>() / samples.len() as f64)
        }
    }
}

fn matrix_spec(game: &Game) -> Result<&MatrixGameSpec> {
    match game {
        Game::Matrix(spec) => Ok(spec),
        Game::Differential(_) => Err(Error::UnsupportedEnvironment("differential")),
    }
}

fn check_agent(joint: &JointPolicy, agent: usize) -> Result<()> {
    if agent >= joint.len() {
        return Err(Error::Index {
            index: agent,
            n_agents: joint.len(),
        });
    }
    Ok(())
}

/// The joint policy each sampler should draw from: prefix agents use their new
/// policies, everyone else their current ones.
fn conditioned(joint: &JointPolicy, prefix: &Prefix, agent: usize) -> Result<Vec<PolicyParams>> {
    let mut eff = joint.agents.clone();
    for &(j, params) in prefix {
        check_agent(joint, j)?;
        if j == agent {
            return Err(Error::InvalidParameter(format!(
                "agent {agent} cannot condition on its own update"
            )));
        }
        if params.family() != eff[j].family() {
            return Err(Error::InvalidPair("prefix policy family differs from the joint policy"));
        }
        eff[j] = params;
    }
    Ok(eff)
}

fn bernoulli_probs(policies: &[PolicyParams]) -> Result<Vec<f64>> {
    policies
        .iter()
        .map(|p| match *p {
            PolicyParams::Bernoulli { p1 } => Ok(p1),
            PolicyParams::Gaussian { .. } => Err(Error::UnsupportedFamily("gaussian")),
        })
        .collect()
}

fn check_enumerable(spec: &MatrixGameSpec, joint: &JointPolicy) -> Result<()> {
    if joint.len() != spec.n_agents {
        return Err(Error::Shape {
            expected: spec.n_agents,
            actual: joint.len(),
        });
    }
    if spec.n_agents > MAX_ENUMERATED_AGENTS {
        return Err(Error::EnumerationLimit(spec.n_agents));
    }
    Ok(())
}

/// Exact expected reward of the joint policy on the matrix game.
pub fn exact_state_value(game: &Game, joint: &JointPolicy) -> Result<f64> {
    let spec = matrix_spec(game)?;
    check_enumerable(spec, joint)?;
    let probs = bernoulli_probs(&joint.agents)?;
    let n = probs.len();
    let mut actions = vec![0u8; n];
    let mut value = 0.0;
    for bits in 0..1u32 << n {
        let mut w = 1.0;
        for (i, (a, p)) in actions.iter_mut().zip(&probs).enumerate() {
            *a = ((bits >> (n - 1 - i)) & 1) as u8;
            w *= if *a == 1 { *p } else { 1.0 - *p };
        }
        value += w * matrix_reward_unchecked(&actions, spec.reward_variant);
    }
    Ok(value)
}

/// `[Q(0), Q(1)]` for `agent`, marginalizing everyone else under `policies`.
fn exact_action_values(spec: &MatrixGameSpec, probs: &[f64], agent: usize) -> [f64; 2] {
    let n = probs.len();
    let mut actions = vec![0u8; n];
    let mut q = [0.0; 2];
    for bits in 0..1u32 << n {
        let mut w = 1.0;
        for (i, a) in actions.iter_mut().enumerate() {
            *a = ((bits >> (n - 1 - i)) & 1) as u8;
            if i != agent {
                w *= if *a == 1 { probs[i] } else { 1.0 - probs[i] };
            }
        }
        q[actions[agent] as usize] += w * matrix_reward_unchecked(&actions, spec.reward_variant);
    }
    q
}

/// Exact multi-agent advantage for one Bernoulli agent.
///
/// `Q(a)` marginalizes predecessors under their new policies and the remaining
/// agents under their current ones; the baseline is `E_{a ~ pi_agent}[Q(a)]`
/// under the agent's current policy, so the result is centered.
pub fn exact_agent_advantage(
    game: &Game,
    joint: &JointPolicy,
    prefix: &Prefix,
    agent: usize,
) -> Result<AdvantageEstimate> {
    let spec = matrix_spec(game)?;
    check_enumerable(spec, joint)?;
    check_agent(joint, agent)?;
    let eff = conditioned(joint, prefix, agent)?;
    let probs = bernoulli_probs(&eff)?;
    let q = exact_action_values(spec, &probs, agent);
    let policy = joint.agents[agent];
    let p1 = policy.prob(1)?;
    let baseline = (1.0 - p1) * q[0] + p1 * q[1];
    let adv = [q[0] - baseline, q[1] - baseline];
    Ok(AdvantageEstimate {
        agent,
        policy,
        values: AdvantageValues::Exact(adv),
        grad_estimate: None,
        surrogate_value: (1.0 - p1) * adv[0] + p1 * adv[1],
    })
}

/// Monte-Carlo advantage estimate for one agent from `batch` joint actions.
///
/// Advantages are `r - b` against the critic, which is read but not updated.
/// `grad_estimate` is the mean of advantage times the score of the agent's
/// raw (pre-clip) draw.
pub fn mc_advantage<R: Rng + ?Sized>(
    game: &Game,
    joint: &JointPolicy,
    prefix: &Prefix,
    agent: usize,
    batch: usize,
    critic: &CriticBaseline,
    rng: &mut R,
) -> Result<AdvantageEstimate> {
    if batch == 0 {
        return Err(Error::InvalidBatch);
    }
    check_agent(joint, agent)?;
    if joint.len() != game.n_agents() {
        return Err(Error::Shape {
            expected: game.n_agents(),
            actual: joint.len(),
        });
    }
    let eff = conditioned(joint, prefix, agent)?;
    let (lo, hi) = game.action_bounds();
    let policy = joint.agents[agent];

    let mut raw = vec![0.0; eff.len()];
    let mut clipped = vec![0.0; eff.len()];
    let mut scratch = Vec::with_capacity(eff.len());
    let mut samples = Vec::with_capacity(batch);
    let mut score_sum = 0.0;
    for _ in 0..batch {
        for (j, p) in eff.iter().enumerate() {
            raw[j] = p.sample_raw(rng);
            clipped[j] = match p {
                PolicyParams::Bernoulli { .. } => raw[j],
                PolicyParams::Gaussian { .. } => raw[j].clamp(lo, hi),
            };
        }
        let reward = game.reward_of(&clipped, &mut scratch);
        let advantage = reward - critic.value;
        score_sum += advantage * score(&policy, raw[agent])?;
        samples.push(Sample {
            action: clipped[agent],
            reward,
            advantage,
        });
    }
    let n = batch as f64;
    let surrogate_value = samples.iter().map(|s| s.advantage).sum::<f64>() / n;
    Ok(AdvantageEstimate {
        agent,
        policy,
        values: AdvantageValues::Sampled(samples),
        grad_estimate: Some(score_sum / n),
        surrogate_value,
    })
}

/// d/dtheta log pi(action) for the policy's trainable parameter.
fn score(policy: &PolicyParams, action: f64) -> Result<f64> {
    match *policy {
        PolicyParams::Bernoulli { p1 } => Ok(if action > 0.5 { 1.0 / p1 } else { -1.0 / (1.0 - p1) }),
        PolicyParams::Gaussian { .. } => grad_log_prob(policy, action),
    }
}
