use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_trustalloc"))
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

#[test]
fn run_writes_all_files() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.cfg", "env.kind = matrix\ntrain.iterations = 30\n");
    let out = tmp.path().join("run");
    let status = bin()
        .args(["run", "--config"])
        .arg(&cfg)
        .args(["--seed", "4", "--strategy", "waterfill", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    for f in ["rewards.csv", "kl.csv", "policy.csv", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let kl = fs::read_to_string(out.join("kl.csv")).unwrap();
    assert_eq!(kl.lines().count(), 31);
    assert!(kl.starts_with("iteration,delta_1,delta_2,delta_3,delta_4,realized_kl_1"));
    let config = fs::read_to_string(out.join("config.json")).unwrap();
    assert!(config.contains("\"waterfill\""));
    assert!(config.contains("\"seed\": 4"));
}

#[test]
fn config_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.cfg", "alloc.delta_total = -1\n");
    let out = bin().args(["run", "--config"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let missing = bin().args(["run", "--config", "/nonexistent/file.cfg"]).status().unwrap();
    assert_eq!(missing.code(), Some(1));

    let usage = bin().args(["run"]).status().unwrap();
    assert_eq!(usage.code(), Some(1));
}

#[test]
fn sweep_and_compare_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "m.cfg", "train.iterations = 400\n");
    let sweep = tmp.path().join("sweep");
    let status = bin()
        .args(["sweep", "--config"])
        .arg(&cfg)
        .args(["--deltas", "1e-3,4e-3", "--seeds", "2", "--out"])
        .arg(&sweep)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let summary = fs::read_to_string(sweep.join("steps_vs_delta.csv")).unwrap();
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(lines[0], "strategy,delta_total,seed,steps_to_99pct");
    assert_eq!(lines.len(), 1 + 3 * 2 * 2);
    assert!(sweep.join("waterfill").join("delta_4e-3").join("seed_1").join("kl.csv").exists());

    let cmp = tmp.path().join("cmp");
    let status = bin()
        .args(["compare", "--config"])
        .arg(&cfg)
        .args(["--seeds", "2", "--out"])
        .arg(&cmp)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let finals = fs::read_to_string(cmp.join("final_rewards.csv")).unwrap();
    assert_eq!(finals.lines().count(), 7);
    let medians = fs::read_to_string(cmp.join("medians.csv")).unwrap();
    assert_eq!(medians.lines().count(), 4);
}

#[test]
fn surface_grid_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("surface.csv");
    let status = bin()
        .args(["surface", "--resolution", "11", "--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().next(), Some("a1,a2,reward"));
    assert_eq!(text.lines().count(), 1 + 11 * 11);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        trustalloc::load_config(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 3);
}
