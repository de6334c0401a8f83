//! Run export, reload and derived metric tables.
//!
//! A run directory holds `rewards.csv`, `kl.csv`, `policy.csv` and
//! `config.json`. Every float is written with 17 significant digits so a
//! reload followed by a re-export reproduces the files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocation::{KLAllocation, Strategy};
use crate::error::{Error, Result};
use crate::policy::{JointPolicy, PolicyParams};
use crate::trainer::{EnvKind, IterationRecord, RunConfig, RunHistory};

pub const REWARDS_FILE: &str = "rewards.csv";
pub const KL_FILE: &str = "kl.csv";
pub const POLICY_FILE: &str = "policy.csv";
pub const CONFIG_FILE: &str = "config.json";

/// Lossless decimal form of a double: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    RewardCurve,
    KlHeatmap,
    AdvKlPairs,
    Trajectory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub kind: MetricKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricTable {
    fn new(kind: MetricKind, columns: Vec<String>) -> Self {
        Self {
            kind,
            columns,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = writer(path)?;
        w.write_record(&self.columns).map_err(|e| csv_err(path, e))?;
        let index_cols: Vec<bool> = self.columns.iter().map(|c| c == "iteration" || c == "agent").collect();
        for row in &self.rows {
            let cells = row
                .iter()
                .zip(&index_cols)
                .map(|(&x, &index)| if index { format!("{}", x as u64) } else { fmt_f64(x) });
            w.write_record(cells).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Export {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    io_err(path, std::io::Error::other(e))
}

fn malformed(path: &Path, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

/// First 1-based iteration whose evaluation reward reaches
/// `fraction * max_reward`, or `None` if no record does.
pub fn steps_to_threshold(history: &RunHistory, fraction: f64, max_reward: f64) -> Result<Option<usize>> {
    let rewards: Vec<(usize, f64)> = history.records.iter().map(|r| (r.iteration, r.eval_reward)).collect();
    steps_to_threshold_in(&rewards, fraction, max_reward)
}

/// Same scan over `(iteration, eval_reward)` pairs.
pub fn steps_to_threshold_in(rewards: &[(usize, f64)], fraction: f64, max_reward: f64) -> Result<Option<usize>> {
    if rewards.is_empty() {
        return Err(Error::EmptyHistory);
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidParameter(format!("fraction must lie in [0, 1], got {fraction}")));
    }
    let threshold = fraction * max_reward;
    Ok(rewards.iter().find(|(_, r)| *r >= threshold).map(|(i, _)| *i))
}

fn agent_columns(prefix: &str, m: usize) -> impl Iterator<Item = String> + '_ {
    (1..=m).map(move |i| format!("{prefix}_{i}"))
}

fn n_agents(history: &RunHistory) -> usize {
    history.records.first().map_or(history.config.env.n_agents, |r| r.realized_kl.len())
}

pub fn reward_curve(history: &RunHistory) -> MetricTable {
    let mut t = MetricTable::new(
        MetricKind::RewardCurve,
        vec!["iteration".into(), "eval_reward".into(), "critic_value".into()],
    );
    for r in &history.records {
        t.push(vec![r.iteration as f64, r.eval_reward, r.critic_value]);
    }
    t
}

/// Realized KL per agent per iteration.
pub fn kl_heatmap(history: &RunHistory) -> MetricTable {
    let m = n_agents(history);
    let columns = std::iter::once("iteration".to_string())
        .chain(agent_columns("realized_kl", m))
        .collect();
    let mut t = MetricTable::new(MetricKind::KlHeatmap, columns);
    for r in &history.records {
        t.push(std::iter::once(r.iteration as f64).chain(r.realized_kl.iter().copied()).collect());
    }
    t
}

/// Policy parameter per agent per iteration.
pub fn trajectory(history: &RunHistory) -> MetricTable {
    let m = n_agents(history);
    let columns = std::iter::once("iteration".to_string())
        .chain(agent_columns("param", m))
        .collect();
    let mut t = MetricTable::new(MetricKind::Trajectory, columns);
    for r in &history.records {
        t.push(
            std::iter::once(r.iteration as f64)
                .chain(r.policy_snapshot.agents.iter().map(|p| p.parameter()))
                .collect(),
        );
    }
    t
}

/// One row per (iteration, agent): utility divided by the iteration's largest
/// absolute utility (0 when all are zero) next to the realized KL.
pub fn adv_kl_pairs(history: &RunHistory) -> MetricTable {
    let mut t = MetricTable::new(
        MetricKind::AdvKlPairs,
        vec![
            "iteration".into(),
            "agent".into(),
            "normalized_utility".into(),
            "realized_kl".into(),
        ],
    );
    for r in &history.records {
        let scale = r.utilities.iter().fold(0.0_f64, |acc, u| acc.max(u.abs()));
        for (agent, (&u, &kl)) in r.utilities.iter().zip(&r.realized_kl).enumerate() {
            let norm = if scale > 0.0 { u / scale } else { 0.0 };
            t.push(vec![r.iteration as f64, (agent + 1) as f64, norm, kl]);
        }
    }
    t
}

fn order_string(order: &[usize]) -> String {
    order.iter().map(|a| (a + 1).to_string()).collect::<Vec<_>>().join(" ")
}

/// Write the four run files into `dir`, creating it if needed.
pub fn export_run_csv(history: &RunHistory, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let m = n_agents(history);

    let rewards = dir.join(REWARDS_FILE);
    reward_curve(history).write_csv(&rewards)?;

    let kl = dir.join(KL_FILE);
    {
        let mut w = writer(&kl)?;
        let header: Vec<String> = std::iter::once("iteration".to_string())
            .chain(agent_columns("delta", m))
            .chain(agent_columns("realized_kl", m))
            .chain(agent_columns("utility", m))
            .chain(agent_columns("gain", m))
            .chain(agent_columns("signal", m))
            .chain(["fallback".to_string(), "order".to_string()])
            .collect();
        w.write_record(&header).map_err(|e| csv_err(&kl, e))?;
        for r in &history.records {
            let row: Vec<String> = std::iter::once(r.iteration.to_string())
                .chain(r.allocation.deltas.iter().map(|&x| fmt_f64(x)))
                .chain(r.realized_kl.iter().map(|&x| fmt_f64(x)))
                .chain(r.utilities.iter().map(|&x| fmt_f64(x)))
                .chain(r.surrogate_gains.iter().map(|&x| fmt_f64(x)))
                .chain(r.signals.iter().map(|&x| fmt_f64(x)))
                .chain([u8::from(r.allocation.fallback).to_string(), order_string(&r.allocation.order)])
                .collect();
            w.write_record(&row).map_err(|e| csv_err(&kl, e))?;
        }
        w.flush().map_err(|e| io_err(&kl, e))?;
    }

    let policy = dir.join(POLICY_FILE);
    trajectory(history).write_csv(&policy)?;

    let config = dir.join(CONFIG_FILE);
    let mut json = serde_json::to_string_pretty(&history.config)
        .map_err(|e| io_err(&config, std::io::Error::other(e)))?;
    json.push('\n');
    fs::write(&config, json).map_err(|e| io_err(&config, e))?;

    Ok(vec![rewards, kl, policy, config])
}

fn read_rows(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| malformed(path, e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| malformed(path, e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = r
        .records()
        .map(|rec| {
            rec.map(|rec| rec.iter().map(str::to_string).collect())
                .map_err(|e| malformed(path, e.to_string()))
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((header, rows))
}

fn parse_num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| malformed(path, format!("cannot parse `{s}`")))
}

/// `(iteration, eval_reward)` pairs from a `rewards.csv` file.
pub fn load_rewards(path: &Path) -> Result<Vec<(usize, f64)>> {
    let (_, rows) = read_rows(path)?;
    rows.iter()
        .map(|row| {
            if row.len() < 2 {
                return Err(malformed(path, "rewards row has fewer than 2 fields"));
            }
            Ok((parse_num(path, &row[0])?, parse_num(path, &row[1])?))
        })
        .collect()
}

/// Rebuild a history from a directory written by [`export_run_csv`].
pub fn load_run(dir: &Path) -> Result<RunHistory> {
    let config_path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
    let config: RunConfig =
        serde_json::from_str(&text).map_err(|e| malformed(&config_path, e.to_string()))?;

    let rewards_path = dir.join(REWARDS_FILE);
    let kl_path = dir.join(KL_FILE);
    let policy_path = dir.join(POLICY_FILE);
    let (_, rewards) = read_rows(&rewards_path)?;
    let (kl_header, kl_rows) = read_rows(&kl_path)?;
    let (_, policy_rows) = read_rows(&policy_path)?;
    if rewards.len() != kl_rows.len() || rewards.len() != policy_rows.len() {
        return Err(malformed(dir, "run files disagree on the number of iterations"));
    }
    if kl_header.len() < 3 || (kl_header.len() - 3) % 5 != 0 {
        return Err(malformed(&kl_path, "unexpected column count"));
    }
    let m = (kl_header.len() - 3) / 5;

    let mut records = Vec::with_capacity(rewards.len());
    for ((rw, kr), pr) in rewards.iter().zip(&kl_rows).zip(&policy_rows) {
        if rw.len() != 3 || kr.len() != kl_header.len() || pr.len() != m + 1 {
            return Err(malformed(dir, "row width mismatch"));
        }
        let nums = |range: std::ops::Range<usize>| -> Result<Vec<f64>> {
            kr[range].iter().map(|s| parse_num(&kl_path, s)).collect()
        };
        let order = kr[5 * m + 2]
            .split_whitespace()
            .map(|s| parse_num::<usize>(&kl_path, s).map(|a| a - 1))
            .collect::<Result<Vec<_>>>()?;
        let agents = pr[1..]
            .iter()
            .map(|s| {
                let x: f64 = parse_num(&policy_path, s)?;
                Ok(match config.env.kind {
                    EnvKind::Matrix => PolicyParams::Bernoulli { p1: x },
                    EnvKind::Differential => PolicyParams::Gaussian {
                        mu: x,
                        sigma: config.env.sigma,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(IterationRecord {
            iteration: parse_num(&rewards_path, &rw[0])?,
            allocation: KLAllocation {
                order,
                deltas: nums(1..1 + m)?,
                total_budget: config.alloc.delta_total,
                strategy: config.alloc.strategy,
                fallback: kr[5 * m + 1] == "1",
            },
            realized_kl: nums(1 + m..1 + 2 * m)?,
            utilities: nums(1 + 2 * m..1 + 3 * m)?,
            surrogate_gains: nums(1 + 3 * m..1 + 4 * m)?,
            signals: nums(1 + 4 * m..1 + 5 * m)?,
            policy_snapshot: JointPolicy { agents },
            eval_reward: parse_num(&rewards_path, &rw[1])?,
            critic_value: parse_num(&rewards_path, &rw[2])?,
        });
    }
    Ok(RunHistory { config, records })
}

/// One (strategy, delta_total, seed) cell of a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub strategy: Strategy,
    pub delta_total: f64,
    pub seed: u64,
    pub steps_to_99pct: Option<usize>,
}

/// Sweep summary; unreached thresholds are left empty.
pub fn write_steps_vs_delta(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["strategy", "delta_total", "seed", "steps_to_99pct"])
        .map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record([
            r.strategy.to_string(),
            fmt_f64(r.delta_total),
            r.seed.to_string(),
            r.steps_to_99pct.map_or_else(String::new, |s| s.to_string()),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
