//! Splitting a shared KL budget across agents.
//!
//! Three strategies produce an update order and per-agent KL radii whose sum
//! stays within the global budget:
//!
//! * uniform: identity order, equal shares;
//! * water-filling: `delta_i = max(0, U_i / lambda - 1)` with the multiplier
//!   chosen so the radii sum to the budget, agents ordered by utility;
//! * greedy: repeatedly commit the remaining agent with the best
//!   surrogate-gain-to-KL ratio and charge its realized KL to the budget.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trust_step::StepResult;

/// Greedy treats a remaining budget at or below this as exhausted.
pub const BUDGET_EPS: f64 = 1e-9;

/// Hard cap on lambda solver iterations.
pub const MAX_SOLVER_ITERATIONS: usize = 10_000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Uniform,
    Greedy,
    Waterfill,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Uniform, Strategy::Greedy, Strategy::Waterfill];
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "greedy" => Ok(Self::Greedy),
            "waterfill" => Ok(Self::Waterfill),
            other => Err(format!(
                "unknown strategy `{other}` (expected uniform, greedy or waterfill)"
            )),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Greedy => "greedy",
            Self::Waterfill => "waterfill",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KLAllocation {
    /// Agents in update order. Agents missing from the order are not updated.
    pub order: Vec<usize>,
    /// Per-agent radius, indexed by agent.
    pub deltas: Vec<f64>,
    pub total_budget: f64,
    pub strategy: Strategy,
    /// Water-filling had no positive utility and fell back to uniform.
    pub fallback: bool,
}

impl KLAllocation {
    pub fn allocated(&self) -> f64 {
        self.deltas.iter().sum()
    }
}

pub fn allocate_uniform(m: usize, delta_total: f64) -> Result<KLAllocation> {
    if m == 0 {
        return Err(Error::EmptySystem);
    }
    check_budget(delta_total)?;
    Ok(KLAllocation {
        order: (0..m).collect(),
        deltas: vec![delta_total / m as f64; m],
        total_budget: delta_total,
        strategy: Strategy::Uniform,
        fallback: false,
    })
}

fn check_budget(delta_total: f64) -> Result<()> {
    if !(delta_total >= 0.0 && delta_total.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "KL budget must be finite and nonnegative, got {delta_total}"
        )));
    }
    Ok(())
}

/// Projected KKT radii `max(0, U_i / lambda - 1)` and their sum.
pub fn delta_of_lambda(utilities: &[f64], lambda: f64) -> Result<(Vec<f64>, f64)> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidMultiplier(lambda));
    }
    let deltas: Vec<f64> = utilities.iter().map(|&u| radius(u, lambda)).collect();
    let total = deltas.iter().sum();
    Ok((deltas, total))
}

#[inline]
fn radius(u: f64, lambda: f64) -> f64 {
    (u / lambda - 1.0).max(0.0)
}

fn total_at(utilities: &[f64], lambda: f64) -> f64 {
    utilities.iter().map(|&u| radius(u, lambda)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSolve {
    pub lambda: f64,
    pub achieved_total: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn max_positive(utilities: &[f64]) -> Result<f64> {
    let max = utilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::NoPositiveUtility);
    }
    Ok(max)
}

/// Solve `sum_i max(0, U_i / lambda - 1) = delta_total` by bisection.
///
/// The total is continuous and non-increasing in lambda and vanishes at
/// `max U`, so a bracket is built by halving the lower end until the total
/// exceeds the target; the bracket is then narrowed to machine precision.
pub fn solve_lambda_bisection(utilities: &[f64], delta_total: f64, tol: f64) -> Result<LambdaSolve> {
    let u_max = max_positive(utilities)?;
    if !(delta_total > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "water-filling needs a positive budget, got {delta_total}"
        )));
    }
    let mut hi = u_max;
    let mut lo = u_max;
    let mut iterations = 0;
    while total_at(utilities, lo) < delta_total {
        lo *= 0.5;
        iterations += 1;
        if iterations >= MAX_SOLVER_ITERATIONS || lo == 0.0 {
            return Err(Error::SolverFailure {
                iterations,
                achieved: total_at(utilities, lo),
                target: delta_total,
            });
        }
    }
    while iterations < MAX_SOLVER_ITERATIONS {
        iterations += 1;
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if total_at(utilities, mid) >= delta_total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // lo is the largest lambda with total >= target; pick the closer end
    let (t_lo, t_hi) = (total_at(utilities, lo), total_at(utilities, hi));
    let (lambda, achieved_total) = if (t_lo - delta_total).abs() <= (t_hi - delta_total).abs() {
        (lo, t_lo)
    } else {
        (hi, t_hi)
    };
    let converged = (achieved_total - delta_total).abs() < tol;
    if !converged {
        return Err(Error::SolverFailure {
            iterations,
            achieved: achieved_total,
            target: delta_total,
        });
    }
    Ok(LambdaSolve {
        lambda,
        achieved_total,
        iterations,
        converged,
    })
}

/// Fixed-point iteration `lambda <- lambda * total / delta_total`.
///
/// An iterate whose total is zero would send lambda to zero; lambda is
/// halved instead. Stops when the total is within `tol` of the target or
/// after `max_iter` iterations, reporting which through `converged`.
pub fn solve_lambda_multiplicative(
    utilities: &[f64],
    delta_total: f64,
    tol: f64,
    lambda0: f64,
    max_iter: usize,
) -> Result<LambdaSolve> {
    max_positive(utilities)?;
    if !(lambda0 > 0.0) {
        return Err(Error::InvalidMultiplier(lambda0));
    }
    if !(delta_total > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "water-filling needs a positive budget, got {delta_total}"
        )));
    }
    let mut lambda = lambda0;
    let mut total = total_at(utilities, lambda);
    let mut iterations = 0;
    while (total - delta_total).abs() >= tol && iterations < max_iter {
        lambda = if total == 0.0 {
            0.5 * lambda
        } else {
            lambda * (total / delta_total)
        };
        total = total_at(utilities, lambda);
        iterations += 1;
    }
    Ok(LambdaSolve {
        lambda,
        achieved_total: total,
        iterations,
        converged: (total - delta_total).abs() < tol,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaInit {
    /// `10 * max U`, where every radius is zero.
    #[default]
    Large,
    /// `1e-3 * max U`.
    Small,
}

impl LambdaInit {
    pub fn initial(self, utilities: &[f64]) -> f64 {
        let u_max = utilities.iter().copied().fold(0.0, f64::max);
        match self {
            Self::Large => 10.0 * u_max,
            Self::Small => 1e-3 * u_max,
        }
    }
}

impl FromStr for LambdaInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "large" => Ok(Self::Large),
            "small" => Ok(Self::Small),
            other => Err(format!("unknown lambda init `{other}` (expected large or small)")),
        }
    }
}

impl fmt::Display for LambdaInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Large => "large",
            Self::Small => "small",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LambdaSolver {
    #[default]
    Bisection,
    Multiplicative {
        init: LambdaInit,
        max_iter: usize,
    },
}

impl LambdaSolver {
    pub fn solve(self, utilities: &[f64], delta_total: f64, tol: f64) -> Result<LambdaSolve> {
        match self {
            Self::Bisection => solve_lambda_bisection(utilities, delta_total, tol),
            Self::Multiplicative { init, max_iter } => solve_lambda_multiplicative(
                utilities,
                delta_total,
                tol,
                init.initial(utilities),
                max_iter,
            ),
        }
    }
}

/// Agent indices by decreasing utility, ties by ascending index.
pub fn utility_order(utilities: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..utilities.len()).collect();
    order.sort_by(|&a, &b| utilities[b].total_cmp(&utilities[a]).then(a.cmp(&b)));
    order
}

/// Water-filling allocation. With `fallback` set, a utility vector without a
/// positive entry yields the uniform allocation flagged as a fallback.
pub fn allocate_waterfill(
    utilities: &[f64],
    delta_total: f64,
    tol: f64,
    solver: LambdaSolver,
    fallback: bool,
) -> Result<KLAllocation> {
    if utilities.is_empty() {
        return Err(Error::EmptySystem);
    }
    check_budget(delta_total)?;
    if delta_total == 0.0 {
        return Ok(KLAllocation {
            order: utility_order(utilities),
            deltas: vec![0.0; utilities.len()],
            total_budget: 0.0,
            strategy: Strategy::Waterfill,
            fallback: false,
        });
    }
    let solve = match solver.solve(utilities, delta_total, tol) {
        Ok(s) => s,
        Err(Error::NoPositiveUtility) if fallback => {
            let mut uniform = allocate_uniform(utilities.len(), delta_total)?;
            uniform.strategy = Strategy::Waterfill;
            uniform.fallback = true;
            return Ok(uniform);
        }
        Err(e) => return Err(e),
    };
    let (deltas, _) = delta_of_lambda(utilities, solve.lambda)?;
    Ok(KLAllocation {
        order: utility_order(utilities),
        deltas,
        total_budget: delta_total,
        strategy: Strategy::Waterfill,
        fallback: false,
    })
}

/// Greedy result: the allocation plus the committed candidate steps in order.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyAllocation {
    pub allocation: KLAllocation,
    pub steps: Vec<(usize, StepResult)>,
}

/// Greedy score-based ordering.
///
/// `evaluate(agent, committed, cap)` returns the candidate step of `agent`
/// with KL at most `cap`, conditioned on the already committed steps. Each
/// round scores every remaining agent by `gain / (realized_kl + epsilon)`,
/// commits the best (lowest index on ties) and charges its realized KL.
pub fn allocate_greedy<F>(
    mut evaluate: F,
    m: usize,
    delta_total: f64,
    epsilon: f64,
) -> Result<GreedyAllocation>
where
    F: FnMut(usize, &[(usize, StepResult)], f64) -> Result<StepResult>,
{
    if m == 0 {
        return Err(Error::EmptySystem);
    }
    check_budget(delta_total)?;
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "greedy epsilon must be positive, got {epsilon}"
        )));
    }
    let mut remaining: Vec<usize> = (0..m).collect();
    let mut committed: Vec<(usize, StepResult)> = Vec::with_capacity(m);
    let mut deltas = vec![0.0; m];
    let mut budget = delta_total;
    while !remaining.is_empty() && budget > BUDGET_EPS {
        let mut best: Option<(f64, usize, StepResult)> = None;
        for (slot, &agent) in remaining.iter().enumerate() {
            let cand = evaluate(agent, &committed, budget)?;
            let score = cand.surrogate_gain / (cand.realized_kl + epsilon);
            // remaining stays sorted, so strict > keeps the lowest index on ties
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, slot, cand));
            }
        }
        let (_, slot, step) = best.expect("remaining is nonempty");
        let agent = remaining.remove(slot);
        deltas[agent] = step.realized_kl;
        budget -= step.realized_kl;
        committed.push((agent, step));
    }
    Ok(GreedyAllocation {
        allocation: KLAllocation {
            order: committed.iter().map(|(a, _)| *a).collect(),
            deltas,
            total_budget: delta_total,
            strategy: Strategy::Greedy,
            fallback: false,
        },
        steps: committed,
    })
}
