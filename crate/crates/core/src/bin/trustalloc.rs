use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use trustalloc::games::{export_surface, reward_surface, DifferentialGameSpec};
use trustalloc::runlog::{export_run_csv, fmt_f64, steps_to_threshold, write_steps_vs_delta, SweepRow};
use trustalloc::{load_config, selftest, train, Error, RunConfig, Strategy};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

const DEFAULT_DELTAS: &str = "1e-4,3e-4,1e-3,3e-3,1e-2";
const THRESHOLD_FRACTION: f64 = 0.99;

#[derive(Parser)]
#[command(name = "trustalloc", version, about = "Multi-agent trust-region training with KL budget allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single training run with full CSV export.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides alloc.strategy.
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Steps to 99% of the maximum reward for every (delta, seed, strategy).
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = DEFAULT_DELTAS, value_delimiter = ',')]
        deltas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// All three strategies on identical seeds; final rewards and medians.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Differential-game reward grid as `a1,a2,reward`.
    Surface {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 141)]
        resolution: usize,
    },
    /// Water-filling grid oracle and sampled-vs-exact advantage checks.
    Selftest,
}

enum Failure {
    Config(String),
    Runtime(String),
    Selftest,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::InvalidParameter(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn read_config(path: &Path) -> Result<RunConfig, Failure> {
    load_config(path).map_err(|e| Failure::Config(e.to_string()))
}

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

/// Reward that the 99% threshold is measured against.
fn max_reward(config: &RunConfig) -> Result<f64, Failure> {
    let game = config.game()?;
    Ok(match game.max_reward() {
        Some(r) => r,
        None => reward_surface(&DifferentialGameSpec::default(), 701)?
            .iter()
            .map(|(_, _, r)| *r)
            .fold(f64::NEG_INFINITY, f64::max),
    })
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn with_run(base: &RunConfig, strategy: Strategy, delta: Option<f64>, seed: u64) -> RunConfig {
    let mut c = base.clone();
    c.alloc.strategy = strategy;
    if let Some(d) = delta {
        c.alloc.delta_total = d;
    }
    c.train.seed = seed;
    c
}

fn run(config: PathBuf, seed: Option<u64>, strategy: Option<Strategy>, out: PathBuf) -> Result<(), Failure> {
    let mut c = read_config(&config)?;
    if let Some(s) = seed {
        c.train.seed = s;
    }
    if let Some(s) = strategy {
        c.alloc.strategy = s;
    }
    let history = train(&c)?;
    export_run_csv(&history, &out)?;
    let last = history.records.last().expect("at least one iteration");
    println!(
        "{} {} iterations, final eval reward {:.6}, written to {}",
        c.alloc.strategy,
        history.records.len(),
        last.eval_reward,
        out.display()
    );
    Ok(())
}

fn sweep(config: PathBuf, deltas: Vec<f64>, seeds: u64, out: PathBuf) -> Result<(), Failure> {
    let base = read_config(&config)?;
    if deltas.iter().any(|d| !(*d > 0.0)) {
        return Err(Failure::Config("every sweep delta must be positive".into()));
    }
    let target = max_reward(&base)?;
    let jobs: Vec<(Strategy, f64, u64)> = Strategy::ALL
        .iter()
        .flat_map(|&s| deltas.iter().flat_map(move |&d| (0..seeds).map(move |k| (s, d, k))))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(strategy, delta, k)| {
            let seed = base.train.seed + k;
            let c = with_run(&base, strategy, Some(delta), seed);
            let history = train(&c)?;
            let dir = out
                .join(strategy.to_string())
                .join(format!("delta_{delta:e}"))
                .join(format!("seed_{seed}"));
            export_run_csv(&history, &dir)?;
            Ok(SweepRow {
                strategy,
                delta_total: delta,
                seed,
                steps_to_99pct: steps_to_threshold(&history, THRESHOLD_FRACTION, target)?,
            })
        })
        .collect::<Result<Vec<_>, Error>>()?;
    let summary = out.join("steps_vs_delta.csv");
    write_steps_vs_delta(&rows, &summary)?;
    for strategy in Strategy::ALL {
        for &delta in &deltas {
            let reached: Vec<f64> = rows
                .iter()
                .filter(|r| r.strategy == strategy && r.delta_total == delta)
                .filter_map(|r| r.steps_to_99pct.map(|s| s as f64))
                .collect();
            let n = reached.len();
            let shown = if n == 0 {
                "never".to_string()
            } else {
                format!("{}", median(&mut reached.clone()))
            };
            println!("{strategy:>9} delta {delta:e}: median steps {shown} ({n}/{seeds} reached)");
        }
    }
    println!("summary written to {}", summary.display());
    Ok(())
}

fn compare(config: PathBuf, seeds: u64, out: PathBuf) -> Result<(), Failure> {
    let base = read_config(&config)?;
    fs::create_dir_all(&out).map_err(|e| io(&out, e))?;
    let jobs: Vec<(Strategy, u64)> = Strategy::ALL
        .iter()
        .flat_map(|&s| (0..seeds).map(move |k| (s, base.train.seed + k)))
        .collect();
    let finals = jobs
        .par_iter()
        .map(|&(strategy, seed)| {
            let c = with_run(&base, strategy, None, seed);
            let history = train(&c)?;
            export_run_csv(&history, &out.join(strategy.to_string()).join(format!("seed_{seed}")))?;
            let last = history.records.last().expect("at least one iteration");
            let params: Vec<f64> = last.policy_snapshot.agents.iter().map(|p| p.parameter()).collect();
            Ok((strategy, seed, last.eval_reward, params))
        })
        .collect::<Result<Vec<_>, Error>>()?;

    let m = finals.first().map_or(0, |f| f.3.len());
    let mut text = String::from("strategy,seed,final_eval_reward");
    for i in 1..=m {
        text.push_str(&format!(",param_{i}"));
    }
    text.push('\n');
    for (strategy, seed, reward, params) in &finals {
        text.push_str(&format!("{strategy},{seed},{}", fmt_f64(*reward)));
        for p in params {
            text.push_str(&format!(",{}", fmt_f64(*p)));
        }
        text.push('\n');
    }
    let path = out.join("final_rewards.csv");
    fs::write(&path, text).map_err(|e| io(&path, e))?;

    let mut medians = String::from("strategy,median_final_eval_reward\n");
    for strategy in Strategy::ALL {
        let mut rs: Vec<f64> = finals.iter().filter(|f| f.0 == strategy).map(|f| f.2).collect();
        let med = median(&mut rs);
        println!("{strategy:>9}: median final eval reward {med:.6}");
        medians.push_str(&format!("{strategy},{}\n", fmt_f64(med)));
    }
    let path = out.join("medians.csv");
    fs::write(&path, medians).map_err(|e| io(&path, e))?;
    Ok(())
}

fn surface(out: PathBuf, resolution: usize) -> Result<(), Failure> {
    export_surface(&DifferentialGameSpec::default(), resolution, &out)?;
    println!("{resolution}x{resolution} grid written to {}", out.display());
    Ok(())
}

fn run_selftest() -> Result<(), Failure> {
    let outcomes = selftest::run_all().map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut ok = true;
    for o in &outcomes {
        println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
        ok &= o.passed;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Selftest)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            strategy,
            out,
        } => run(config, seed, strategy, out),
        Command::Sweep {
            config,
            deltas,
            seeds,
            out,
        } => sweep(config, deltas, seeds, out),
        Command::Compare { config, seeds, out } => compare(config, seeds, out),
        Command::Surface { out, resolution } => surface(out, resolution),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
        Err(Failure::Selftest) => {
            eprintln!("selftest failed");
            ExitCode::from(EXIT_SELFTEST)
        }
    }
}
