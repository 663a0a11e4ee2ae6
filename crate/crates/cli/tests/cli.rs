use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hawkes_causal::causality::aggregate;
use hawkes_causal::AttributionResult;
use hawkes_causal_cli::Report;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hawkes-causal"))
        .args(args)
        .env("HAWKES_CAUSAL_THREADS", "1")
        .output()
        .unwrap()
}

fn run(cmd: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    bin(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn repo_config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

const PGEM: &str = r#"
seed = 5
[paths]
dataset = "data/d.jsonl"
run_dir = "run"
[sim]
kind = "pgem"
num_sequences = 300
t_end = 20.0
[model]
kind = "isahp"
[train]
max_epochs = 2
learning_rate = 0.01
[attribute]
pattern = "0#32"
synergy_wildcard = 1
target_type = 3
"#;

#[test]
fn default_synergy_config_matches_target_size() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synergy.jsonl");
    let body = fs::read_to_string(repo_config("synergy.toml"))
        .unwrap()
        .replace("../data/synergy.jsonl", data.to_str().unwrap());
    let p = write_config(dir.path(), &body);
    let o = run("simulate", &p, &["--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let line = stdout(&o);
    let events: usize = line
        .trim()
        .rsplit("events=")
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!(line.starts_with("S=1000 K=5 "), "{line}");
    assert!((12_000..=20_000).contains(&events), "{events}");
    assert!(dir.path().join("config.toml").exists());
    assert!(data.exists());
}

#[test]
fn usage_and_config_errors_exit_with_one() {
    assert_eq!(bin(&["train"]).status.code(), Some(1));
    assert_eq!(bin(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &format!("{PGEM}\n[eval]\ninclude_diag = false\n"));
    assert_eq!(run("simulate", &p, &[]).status.code(), Some(1));
    let p = write_config(dir.path(), "seed = 1\n[paths]\ndataset = \"d.jsonl\"\nrun_dir = \"r\"\n");
    assert_eq!(run("simulate", &p, &[]).status.code(), Some(1));
    assert_eq!(bin(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_artifacts_are_named_and_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), PGEM);
    let o = run("eval", &p, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("d.jsonl"));
    assert!(run("simulate", &p, &[]).status.success());
    let o = run("attribute", &p, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("isahp.checkpoint.json"));
}

#[test]
fn pipeline_artifacts_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), PGEM);
    for cmd in ["simulate", "train", "eval", "attribute"] {
        let o = run(cmd, &p, &[]);
        assert!(o.status.success(), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let train_out = stdout(&run("train", &p, &["--out", dir.path().join("other").to_str().unwrap()]));
    assert!(train_out.lines().any(|l| l.starts_with("isahp epoch    1 train")));

    let run_dir = dir.path().join("run");
    let ar = AttributionResult::read_json(&run_dir.join("isahp.attribution.json")).unwrap();
    assert_eq!(aggregate(&ar.sequences, ar.num_types), ar.aggregate);

    // second run directory without regularization for the ablation rows
    let no_tlr = PGEM.replace("[train]", "[model.isahp]\nomega1 = 0.0\nomega2 = 0.0\n[train]");
    let p2 = write_config(dir.path(), &no_tlr.replace("run_dir = \"run\"", "run_dir = \"run2\""));
    for cmd in ["train", "eval"] {
        assert!(run(cmd, &p2, &[]).status.success());
    }
    let with_report = format!("{PGEM}\n[report]\nwith_tlr = \"run\"\nwithout_tlr = \"run2\"\n");
    let p = write_config(dir.path(), &with_report);
    let o = run("report", &p, &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Report = serde_json::from_str(&fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.causality[0].label, "ground_truth");
    assert_eq!(report.causality[0].auc, Some(1.0));
    assert_eq!(report.causality[1].label, "isahp");
    let labels: Vec<&str> = report.ablation.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["isahp+tlr", "isahp-tlr"]);
    let text = fs::read_to_string(run_dir.join("report.txt")).unwrap();
    assert_eq!(text, stdout(&o));
}

#[test]
fn hexp_toy_run_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = repo_config("toy.toml");
    let data = dir.path().join("toy.jsonl");
    let body = fs::read_to_string(&cfg)
        .unwrap()
        .replace("../data/toy.jsonl", data.to_str().unwrap());
    let p = write_config(dir.path(), &body);
    assert!(run("simulate", &p, &["--out", out]).status.success());
    let mut checkpoints = Vec::new();
    for _ in 0..2 {
        assert!(run("train", &p, &["--out", out, "--seed", "3"]).status.success());
        checkpoints.push(fs::read(dir.path().join("hexp.checkpoint.json")).unwrap());
    }
    assert_eq!(checkpoints[0], checkpoints[1]);
    let snapshot = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(snapshot.contains("seed = 3"));
}
