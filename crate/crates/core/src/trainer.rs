//! Sequential trust-region training under a shared KL budget.
//!
//! Each iteration estimates every agent's advantage under the current joint
//! policy, turns those estimates into an update order and per-agent KL radii,
//! then updates agents one at a time, each conditioning its advantage on the
//! new policies of the agents already updated in this iteration.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    exact_agent_advantage, exact_state_value, mc_advantage, update_critic, utility, AdvantageEstimate,
    CriticBaseline, Prefix, UtilityMode,
};
use crate::allocation::{
    allocate_greedy, allocate_uniform, allocate_waterfill, KLAllocation, LambdaSolver, Strategy,
};
use crate::error::{Error, Result};
use crate::games::{DifferentialGameSpec, Game, MatrixGameSpec, RewardVariant};
use crate::policy::{JointPolicy, PolicyParams};
use crate::trust_step::{blocked_by_bounds, trust_region_step, StepResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    Matrix,
    Differential,
}

impl std::str::FromStr for EnvKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "matrix" => Ok(Self::Matrix),
            "differential" => Ok(Self::Differential),
            other => Err(format!("unknown environment `{other}` (expected matrix or differential)")),
        }
    }
}

impl std::fmt::Display for EnvKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Matrix => "matrix",
            Self::Differential => "differential",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    /// Matrix game only.
    pub n_agents: usize,
    pub reward_variant: RewardVariant,
    /// Initial probability of action 1 for every matrix-game agent.
    pub init_p1: f64,
    /// Initial Gaussian means, one per differential-game player.
    pub init_mean: Vec<f64>,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AllocConfig {
    pub strategy: Strategy,
    pub delta_total: f64,
    pub utility_mode: UtilityMode,
    pub greedy_epsilon: f64,
    pub waterfill_tol: f64,
    pub lambda_solver: LambdaSolver,
    /// Give every agent the full budget instead of an equal share under the
    /// uniform strategy.
    pub uniform_per_agent: bool,
    /// Zero the utility of agents whose parameter is pinned at the bound the
    /// signal pushes toward.
    pub mask_pinned: bool,
    /// Fall back to uniform when no utility is positive.
    pub uniform_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub eval_episodes: usize,
    pub seed: u64,
    pub critic_lr: f64,
    /// Accepted for completeness; both games are single-step so returns are
    /// immediate rewards.
    pub gamma: f64,
    /// Evaluate the matrix game by exact expectation instead of sampling.
    pub exact_eval: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub alloc: AllocConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Defaults for the given environment.
    pub fn defaults(kind: EnvKind) -> Self {
        let (iterations, eval_episodes, delta_total) = match kind {
            EnvKind::Matrix => (1000, 100, 4e-3),
            EnvKind::Differential => (4000, 1000, DIFFERENTIAL_DELTA_TOTAL),
        };
        Self {
            env: EnvConfig {
                kind,
                n_agents: match kind {
                    EnvKind::Matrix => 4,
                    EnvKind::Differential => 2,
                },
                reward_variant: RewardVariant::LiteralSuffix,
                init_p1: 0.01,
                init_mean: vec![1.0, 1.0],
                sigma: 1.15,
            },
            alloc: AllocConfig {
                strategy: Strategy::Uniform,
                delta_total,
                utility_mode: UtilityMode::PositiveMean,
                greedy_epsilon: 1e-4,
                waterfill_tol: 0.01,
                lambda_solver: LambdaSolver::Bisection,
                uniform_per_agent: false,
                mask_pinned: true,
                uniform_fallback: true,
            },
            train: TrainConfig {
                iterations,
                batch_size: 20,
                eval_episodes,
                seed: 0,
                critic_lr: 0.2,
                gamma: 0.99,
                exact_eval: true,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.train.iterations == 0 {
            return bad("train.iterations must be at least 1".into());
        }
        if !(self.alloc.delta_total > 0.0 && self.alloc.delta_total.is_finite()) {
            return bad(format!("alloc.delta_total must be positive, got {}", self.alloc.delta_total));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1".into());
        }
        if self.train.eval_episodes == 0 {
            return bad("train.eval_episodes must be at least 1".into());
        }
        if !(self.train.critic_lr > 0.0 && self.train.critic_lr <= 1.0) {
            return bad(format!("train.critic_lr must lie in (0, 1], got {}", self.train.critic_lr));
        }
        if !(0.0..=1.0).contains(&self.train.gamma) {
            return bad(format!("train.gamma must lie in [0, 1], got {}", self.train.gamma));
        }
        if !(self.alloc.greedy_epsilon > 0.0) {
            return bad("alloc.greedy_epsilon must be positive".into());
        }
        if !(self.alloc.waterfill_tol > 0.0) {
            return bad("alloc.waterfill_tol must be positive".into());
        }
        match self.env.kind {
            EnvKind::Matrix => {
                if !(2..=crate::games::MAX_ENUMERATED_AGENTS).contains(&self.env.n_agents) {
                    return bad(format!(
                        "env.n_agents must lie in [2, {}], got {}",
                        crate::games::MAX_ENUMERATED_AGENTS,
                        self.env.n_agents
                    ));
                }
                if !(self.env.init_p1 > 0.0 && self.env.init_p1 < 1.0) {
                    return bad(format!("env.init_p1 must lie in (0, 1), got {}", self.env.init_p1));
                }
            }
            EnvKind::Differential => {
                if self.env.n_agents != 2 {
                    return bad(format!("the differential game has 2 players, got {}", self.env.n_agents));
                }
                if self.env.init_mean.len() != 2 {
                    return bad(format!("env.init_mean needs 2 values, got {}", self.env.init_mean.len()));
                }
                if !(self.env.sigma > 0.0) {
                    return bad(format!("env.sigma must be positive, got {}", self.env.sigma));
                }
            }
        }
        Ok(())
    }

    pub fn game(&self) -> Result<Game> {
        Ok(match self.env.kind {
            EnvKind::Matrix => Game::Matrix(MatrixGameSpec::new(self.env.n_agents, self.env.reward_variant)?),
            EnvKind::Differential => Game::Differential(DifferentialGameSpec::default()),
        })
    }

    pub fn initial_policy(&self) -> Result<JointPolicy> {
        match self.env.kind {
            EnvKind::Matrix => JointPolicy::uniform(PolicyParams::bernoulli(self.env.init_p1), self.env.n_agents),
            EnvKind::Differential => {
                let bounds = DifferentialGameSpec::default().action_bounds;
                let agents = self
                    .env
                    .init_mean
                    .iter()
                    .map(|&mu| PolicyParams::gaussian(mu.clamp(bounds.0, bounds.1), self.env.sigma))
                    .collect::<Result<Vec<_>>>()?;
                JointPolicy::new(agents)
            }
        }
    }
}

/// Default shared KL budget for the differential game.
pub const DIFFERENTIAL_DELTA_TOTAL: f64 = 0.08;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based: the number of updates applied so far.
    pub iteration: usize,
    pub allocation: KLAllocation,
    pub realized_kl: Vec<f64>,
    pub utilities: Vec<f64>,
    pub surrogate_gains: Vec<f64>,
    /// Step-direction signal each updated agent used (0 for agents not updated).
    pub signals: Vec<f64>,
    /// Joint policy after this iteration's updates.
    pub policy_snapshot: JointPolicy,
    pub eval_reward: f64,
    /// Critic value after this iteration's update.
    pub critic_value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub config: RunConfig,
    pub records: Vec<IterationRecord>,
}

/// Training state for one run.
pub struct Trainer {
    config: RunConfig,
    game: Game,
    joint: JointPolicy,
    critic: CriticBaseline,
    train_rng: ChaCha8Rng,
    eval_rng: ChaCha8Rng,
    iteration: usize,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let game = config.game()?;
        let joint = config.initial_policy()?;
        let critic = CriticBaseline::new(0.0, config.train.critic_lr)?;
        let mut train_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        train_rng.set_stream(0);
        let mut eval_rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        eval_rng.set_stream(1);
        Ok(Self {
            config,
            game,
            joint,
            critic,
            train_rng,
            eval_rng,
            iteration: 0,
        })
    }

    pub fn joint(&self) -> &JointPolicy {
        &self.joint
    }

    pub fn game(&self) -> &Game {
        &self.game
    }

    pub fn critic(&self) -> CriticBaseline {
        self.critic
    }

    /// Estimate the advantage of `agent` given the updated prefix, recording
    /// sampled rewards for the critic.
    fn estimate(&mut self, prefix: &Prefix, agent: usize, pool: &mut RewardPool) -> Result<AdvantageEstimate> {
        match (&self.game, self.joint.agents[agent]) {
            (Game::Matrix(_), PolicyParams::Bernoulli { .. }) => {
                exact_agent_advantage(&self.game, &self.joint, prefix, agent)
            }
            _ => {
                let est = mc_advantage(
                    &self.game,
                    &self.joint,
                    prefix,
                    agent,
                    self.config.train.batch_size,
                    &self.critic,
                    &mut self.train_rng,
                )?;
                pool.add(&est);
                Ok(est)
            }
        }
    }

    /// One iteration: estimate, allocate, update sequentially, refresh the
    /// critic, evaluate.
    pub fn run_iteration(&mut self) -> Result<IterationRecord> {
        let m = self.joint.len();
        let bounds = self.game.action_bounds();
        let alloc_cfg = self.config.alloc.clone();
        let mut pool = RewardPool::default();

        let mut base = Vec::with_capacity(m);
        for agent in 0..m {
            base.push(self.estimate(&[], agent, &mut pool)?);
        }
        let utilities = base
            .iter()
            .map(|est| {
                let u = utility(est, alloc_cfg.utility_mode)?;
                let pinned = alloc_cfg.mask_pinned && blocked_by_bounds(&est.policy, est.signal(), bounds);
                Ok(if pinned { 0.0 } else { u })
            })
            .collect::<Result<Vec<f64>>>()?;

        let mut steps: Vec<Option<(f64, StepResult)>> = vec![None; m];
        let allocation = match alloc_cfg.strategy {
            Strategy::Uniform | Strategy::Waterfill => {
                let allocation = if alloc_cfg.strategy == Strategy::Uniform {
                    let mut a = allocate_uniform(m, alloc_cfg.delta_total)?;
                    if alloc_cfg.uniform_per_agent {
                        a.deltas.fill(alloc_cfg.delta_total);
                    }
                    a
                } else {
                    allocate_waterfill(
                        &utilities,
                        alloc_cfg.delta_total,
                        alloc_cfg.waterfill_tol,
                        alloc_cfg.lambda_solver,
                        alloc_cfg.uniform_fallback,
                    )?
                };
                let mut prefix: Vec<(usize, PolicyParams)> = Vec::with_capacity(m);
                for &agent in &allocation.order {
                    let delta = allocation.deltas[agent];
                    if delta > 0.0 {
                        let signal = if prefix.is_empty() {
                            base[agent].signal()
                        } else {
                            self.estimate(&prefix, agent, &mut pool)?.signal()
                        };
                        let step = trust_region_step(&self.joint.agents[agent], signal, delta, bounds)?;
                        steps[agent] = Some((signal, step));
                        prefix.push((agent, step.new_params));
                    }
                }
                allocation
            }
            Strategy::Greedy => {
                let greedy = {
                    let mut signals = vec![0.0; m];
                    let out = allocate_greedy(
                        |agent, committed, cap| {
                            let signal = if committed.is_empty() {
                                base[agent].signal()
                            } else {
                                let prefix: Vec<(usize, PolicyParams)> =
                                    committed.iter().map(|(a, s)| (*a, s.new_params)).collect();
                                self.estimate(&prefix, agent, &mut pool)?.signal()
                            };
                            signals[agent] = signal;
                            trust_region_step(&self.joint.agents[agent], signal, cap, bounds)
                        },
                        m,
                        alloc_cfg.delta_total,
                        alloc_cfg.greedy_epsilon,
                    )?;
                    for (agent, step) in &out.steps {
                        steps[*agent] = Some((signals[*agent], *step));
                    }
                    out
                };
                greedy.allocation
            }
        };

        // critic: pooled sampled rewards, or the exact value for enumerated games
        let mean_reward = match pool.mean() {
            Some(r) => r,
            None => exact_state_value(&self.game, &self.joint)?,
        };
        self.critic = update_critic(self.critic, mean_reward);

        let mut realized_kl = vec![0.0; m];
        let mut gains = vec![0.0; m];
        let mut signals = vec![0.0; m];
        for (agent, slot) in steps.iter().enumerate() {
            if let Some((signal, step)) = slot {
                realized_kl[agent] = step.realized_kl;
                gains[agent] = step.surrogate_gain;
                signals[agent] = *signal;
                self.joint.agents[agent] = step.new_params;
            }
        }
        self.iteration += 1;
        let eval_reward = self.evaluate_current()?;
        Ok(IterationRecord {
            iteration: self.iteration,
            allocation,
            realized_kl,
            utilities,
            surrogate_gains: gains,
            signals,
            policy_snapshot: self.joint.clone(),
            eval_reward,
            critic_value: self.critic.value,
        })
    }

    fn evaluate_current(&mut self) -> Result<f64> {
        let exact = self.config.train.exact_eval && matches!(self.game, Game::Matrix(_));
        evaluate(&self.game, &self.joint, self.config.train.eval_episodes, exact, &mut self.eval_rng)
    }
}

#[derive(Default)]
struct RewardPool {
    sum: f64,
    count: usize,
}

impl RewardPool {
    fn add(&mut self, est: &AdvantageEstimate) {
        if let Some(samples) = est.samples() {
            self.sum += samples.iter().map(|s| s.reward).sum::<f64>();
            self.count += samples.len();
        }
    }

    fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum / self.count as f64)
    }
}

/// Run `config.train.iterations` iterations from the configured initial policy.
pub fn train(config: &RunConfig) -> Result<RunHistory> {
    let mut trainer = Trainer::new(config.clone())?;
    let records = (0..config.train.iterations)
        .map(|_| trainer.run_iteration())
        .collect::<Result<Vec<_>>>()?;
    Ok(RunHistory {
        config: config.clone(),
        records,
    })
}

/// Mean reward of the joint policy: the exact expectation when `exact` is set
/// (matrix game only), otherwise the mean over `episodes` sampled joint actions.
pub fn evaluate<R: rand::Rng + ?Sized>(
    game: &Game,
    joint: &JointPolicy,
    episodes: usize,
    exact: bool,
    rng: &mut R,
) -> Result<f64> {
    if exact {
        return exact_state_value(game, joint);
    }
    if episodes == 0 {
        return Err(Error::InvalidParameter("evaluation needs at least one episode".into()));
    }
    let bounds = game.action_bounds();
    let mut actions = vec![0.0; joint.len()];
    let mut scratch = Vec::with_capacity(joint.len());
    let mut total = 0.0;
    for _ in 0..episodes {
        for (a, p) in actions.iter_mut().zip(&joint.agents) {
            *a = crate::policy::sample_action(p, bounds, rng);
        }
        total += game.reward_of(&actions, &mut scratch);
    }
    Ok(total / episodes as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn matrix_cfg(strategy: Strategy, delta_total: f64) -> RunConfig {
        let mut c = RunConfig::defaults(EnvKind::Matrix);
        c.alloc.strategy = strategy;
        c.alloc.delta_total = delta_total;
        c
    }

    #[test]
    fn uniform_respects_per_agent_radius() {
        let mut t = Trainer::new(matrix_cfg(Strategy::Uniform, 4e-3)).unwrap();
        for _ in 0..50 {
            let rec = t.run_iteration().unwrap();
            for kl in &rec.realized_kl {
                assert!(*kl <= 1e-3 + 1e-9);
            }
        }
    }

    #[test]
    fn first_iteration_follows_exact_advantage_signs() {
        let mut c = matrix_cfg(Strategy::Uniform, 0.04);
        c.env.n_agents = 2;
        c.env.init_p1 = 0.5;
        let mut t = Trainer::new(c).unwrap();
        let rec = t.run_iteration().unwrap();
        // agent 0: A(1) = +0.375, A(0) = -0.375 at p = (0.5, 0.5)
        assert_relative_eq!(rec.signals[0], 0.75, epsilon = 1e-12);
        let p = rec.policy_snapshot.agents.iter().map(|a| a.parameter()).collect::<Vec<_>>();
        assert!(p[0] > 0.5);
        // agent 1 conditions on agent 0's new p: gap = 1.5 q - 1 < 0 for q < 2/3
        let q = p[0];
        assert_relative_eq!(rec.signals[1], 1.5 * q - 1.0, epsilon = 1e-12);
        assert!(p[1] < 0.5);
    }

    #[test]
    fn evaluation_reference_values() {
        let game = Game::Matrix(MatrixGameSpec::new(4, RewardVariant::LiteralSuffix).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all_one = JointPolicy::uniform(PolicyParams::bernoulli(1.0), 4).unwrap();
        assert_relative_eq!(evaluate(&game, &all_one, 1, true, &mut rng).unwrap(), 1.5, epsilon = 1e-5);
        let all_zero = JointPolicy::uniform(PolicyParams::bernoulli(0.0), 4).unwrap();
        assert_relative_eq!(evaluate(&game, &all_zero, 1, true, &mut rng).unwrap(), 1.0, epsilon = 1e-5);

        let diff = Game::Differential(DifferentialGameSpec::default());
        let at_peak = JointPolicy::new(vec![PolicyParams::gaussian(5.0, 1.15).unwrap(); 2]).unwrap();
        // independent integration of the clipped surface under N((5,5), 1.15^2): 6.681
        let r = evaluate(&diff, &at_peak, 100_000, false, &mut rng).unwrap();
        assert!((r - 6.681).abs() < 0.05, "{r}");
    }

    #[test]
    fn zero_budget_leaves_policy_unchanged() {
        for strategy in Strategy::ALL {
            let mut c = RunConfig::defaults(EnvKind::Differential);
            c.alloc.strategy = strategy;
            let mut t = Trainer::new(c.clone()).unwrap();
            t.config.alloc.delta_total = 0.0;
            let before = t.joint().clone();
            for _ in 0..5 {
                t.run_iteration().unwrap();
            }
            assert_eq!(&before, t.joint());
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut c = RunConfig::defaults(EnvKind::Differential);
        c.alloc.strategy = Strategy::Waterfill;
        c.train.iterations = 50;
        c.train.seed = 17;
        assert_eq!(train(&c).unwrap(), train(&c).unwrap());
    }

    #[test]
    fn greedy_matrix_record_is_consistent() {
        let c = matrix_cfg(Strategy::Greedy, 4e-3);
        let mut t = Trainer::new(c).unwrap();
        for _ in 0..30 {
            let rec = t.run_iteration().unwrap();
            assert!(rec.realized_kl.iter().sum::<f64>() <= 4e-3 + 1e-9);
            for a in 0..4 {
                assert_eq!(rec.realized_kl[a], rec.allocation.deltas[a]);
            }
        }
    }

    #[test]
    fn validation_errors() {
        let mut c = RunConfig::defaults(EnvKind::Matrix);
        c.train.iterations = 0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(EnvKind::Matrix);
        c.alloc.delta_total = -1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::defaults(EnvKind::Differential);
        c.env.init_mean = vec![1.0];
        assert!(c.validate().is_err());
    }
}
