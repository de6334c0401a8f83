//! Run configuration files.
//!
//! Plain-text form: one `key = value` per line, `#` starts a comment, keys
//! carry an `env.`, `alloc.` or `train.` prefix (the bare key is accepted
//! too, since no key name repeats across sections). A file whose first
//! non-blank character is `{` is read as JSON, either nested by section or
//! flat with dotted keys. Unset keys take the defaults of the selected
//! environment (`env.kind`, default `matrix`).

use std::path::Path;
use std::str::FromStr;

use crate::allocation::{LambdaInit, LambdaSolver};
use crate::error::{Error, Result};
use crate::trainer::{EnvKind, RunConfig};

/// Every accepted key, fully qualified.
pub const KEYS: &[&str] = &[
    "env.kind",
    "env.n_agents",
    "env.reward_variant",
    "env.init_p1",
    "env.init_mean",
    "env.sigma",
    "alloc.strategy",
    "alloc.delta_total",
    "alloc.utility_mode",
    "alloc.greedy_epsilon",
    "alloc.waterfill_tol",
    "alloc.lambda_solver",
    "alloc.lambda_init",
    "alloc.lambda_max_iter",
    "alloc.uniform_per_agent",
    "alloc.mask_pinned",
    "alloc.uniform_fallback",
    "train.iterations",
    "train.batch_size",
    "train.eval_episodes",
    "train.seed",
    "train.critic_lr",
    "train.gamma",
    "train.exact_eval",
];

const DEFAULT_LAMBDA_MAX_ITER: usize = 1000;

struct Entry {
    line: usize,
    key: &'static str,
    value: String,
}

fn qualify(raw: &str, line: usize) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == raw) {
        return Ok(k);
    }
    if !raw.contains('.') {
        if let Some(k) = KEYS.iter().find(|k| k.rsplit('.').next() == Some(raw)) {
            return Ok(k);
        }
    }
    Err(Error::config(line, format!("unknown key `{raw}`")))
}

fn push_entry(entries: &mut Vec<Entry>, line: usize, raw_key: &str, value: String) -> Result<()> {
    let key = qualify(raw_key, line)?;
    if let Some(prev) = entries.iter().find(|e| e.key == key) {
        return Err(Error::config(
            line,
            format!("duplicate key `{key}` (first set on line {})", prev.line),
        ));
    }
    entries.push(Entry { line, key, value });
    Ok(())
}

fn text_entries(text: &str) -> Result<Vec<Entry>> {
    let mut entries = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| Error::config(line, format!("expected `key = value`, got `{content}`")))?;
        push_entry(&mut entries, line, k.trim(), v.trim().to_string())?;
    }
    Ok(entries)
}

fn json_scalar(v: &serde_json::Value) -> Option<String> {
    use serde_json::Value;
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Array(items) => items
            .iter()
            .map(|x| match x {
                Value::Number(n) => Some(n.to_string()),
                _ => None,
            })
            .collect::<Option<Vec<_>>>()
            .map(|xs| xs.join(",")),
        _ => None,
    }
}

fn line_of(text: &str, key: &str) -> usize {
    let needle = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&needle)).map_or(0, |i| i + 1)
}

fn flatten(
    text: &str,
    prefix: &str,
    obj: &serde_json::Map<String, serde_json::Value>,
    entries: &mut Vec<Entry>,
) -> Result<()> {
    for (k, v) in obj {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let line = line_of(text, k);
        match v {
            serde_json::Value::Object(inner) => flatten(text, &full, inner, entries)?,
            other => {
                let value = json_scalar(other)
                    .ok_or_else(|| Error::config(line, format!("unsupported value for `{full}`")))?;
                push_entry(entries, line, &full, value)?;
            }
        }
    }
    Ok(())
}

fn json_entries(text: &str) -> Result<Vec<Entry>> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::config(e.line(), e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::config(1, "top-level JSON value must be an object"))?;
    let mut entries = Vec::new();
    flatten(text, "", obj, &mut entries)?;
    Ok(entries)
}

fn parse_value<T: FromStr>(e: &Entry) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    e.value
        .parse::<T>()
        .map_err(|err| Error::config(e.line, format!("`{}`: cannot parse `{}`: {err}", e.key, e.value)))
}

fn parse_list(e: &Entry) -> Result<Vec<f64>> {
    e.value
        .trim_matches(|c| c == '[' || c == ']' || c == '(' || c == ')')
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|err| Error::config(e.line, format!("`{}`: cannot parse `{s}`: {err}", e.key)))
        })
        .collect()
}

/// Parse configuration text. The environment is taken from `env.kind`.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    parse_config_with(text, None)
}

/// Parse configuration text, defaulting the environment to `kind` when the
/// text does not set `env.kind`.
pub fn parse_config_with(text: &str, kind: Option<EnvKind>) -> Result<RunConfig> {
    let entries = if text.trim_start().starts_with('{') {
        json_entries(text)?
    } else {
        text_entries(text)?
    };

    let kind_entry = entries.iter().find(|e| e.key == "env.kind");
    let kind = match kind_entry {
        Some(e) => parse_value::<EnvKind>(e)?,
        None => kind.unwrap_or(EnvKind::Matrix),
    };
    let mut c = RunConfig::defaults(kind);
    let mut lambda_solver: Option<String> = None;
    let mut lambda_init = LambdaInit::default();
    let mut lambda_max_iter = DEFAULT_LAMBDA_MAX_ITER;
    let mut solver_line = 0;

    for e in &entries {
        match e.key {
            "env.kind" => {}
            "env.n_agents" => c.env.n_agents = parse_value(e)?,
            "env.reward_variant" => c.env.reward_variant = parse_value(e)?,
            "env.init_p1" => c.env.init_p1 = parse_value(e)?,
            "env.init_mean" => c.env.init_mean = parse_list(e)?,
            "env.sigma" => c.env.sigma = parse_value(e)?,
            "alloc.strategy" => c.alloc.strategy = parse_value(e)?,
            "alloc.delta_total" => c.alloc.delta_total = parse_value(e)?,
            "alloc.utility_mode" => c.alloc.utility_mode = parse_value(e)?,
            "alloc.greedy_epsilon" => c.alloc.greedy_epsilon = parse_value(e)?,
            "alloc.waterfill_tol" => c.alloc.waterfill_tol = parse_value(e)?,
            "alloc.lambda_solver" => {
                lambda_solver = Some(e.value.clone());
                solver_line = e.line;
            }
            "alloc.lambda_init" => lambda_init = parse_value(e)?,
            "alloc.lambda_max_iter" => lambda_max_iter = parse_value(e)?,
            "alloc.uniform_per_agent" => c.alloc.uniform_per_agent = parse_value(e)?,
            "alloc.mask_pinned" => c.alloc.mask_pinned = parse_value(e)?,
            "alloc.uniform_fallback" => c.alloc.uniform_fallback = parse_value(e)?,
            "train.iterations" => c.train.iterations = parse_value(e)?,
            "train.batch_size" => c.train.batch_size = parse_value(e)?,
            "train.eval_episodes" => c.train.eval_episodes = parse_value(e)?,
            "train.seed" => c.train.seed = parse_value(e)?,
            "train.critic_lr" => c.train.critic_lr = parse_value(e)?,
            "train.gamma" => c.train.gamma = parse_value(e)?,
            "train.exact_eval" => c.train.exact_eval = parse_value(e)?,
            other => unreachable!("key table and match disagree on `{other}`"),
        }
    }
    c.alloc.lambda_solver = match lambda_solver.as_deref() {
        None | Some("bisection") => LambdaSolver::Bisection,
        Some("multiplicative") => LambdaSolver::Multiplicative {
            init: lambda_init,
            max_iter: lambda_max_iter,
        },
        Some(other) => {
            return Err(Error::config(
                solver_line,
                format!("`alloc.lambda_solver`: unknown solver `{other}` (expected bisection or multiplicative)"),
            ))
        }
    };

    c.validate().map_err(|err| {
        let message = match err {
            Error::InvalidParameter(m) => m,
            other => other.to_string(),
        };
        let line = entries
            .iter()
            .find(|e| message.starts_with(e.key))
            .map_or(0, |e| e.line);
        Error::config(line, message)
    })?;
    Ok(c)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(0, format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}
