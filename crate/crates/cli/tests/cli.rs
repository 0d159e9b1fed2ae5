use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn fence(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fence"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], cwd: &Path) -> Output {
    let out = fence(args, cwd);
    assert!(
        out.status.success(),
        "fence {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const ORACLE_CFG: &str = "\
# toy oracle experiment
[data]
window = 6
eval_stride = 6
max_windows = 2
[world]
nodes = 4
length = 200
[diffusion]
steps = 10
[model]
backend = oracle
oracle_pi_true = 0.5
[mask]
missing_rate = 0.5
[sampler]
samples = 3
crps_samples = 5
";

#[test]
fn stage_commands_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        &["synth", "--nodes", "3", "--steps", "6", "--length", "6", "--out", "grid.csv", "--spec-out", "world.spec"],
        d,
    );
    ok(
        &["mask", "--data", "grid.csv", "--alpha", "0.5", "--patch", "3", "--seed", "1", "--out", "mask.csv"],
        d,
    );
    let mask = fs::read_to_string(d.join("mask.csv")).unwrap();
    assert!(mask.starts_with("t0,t1,t2,t3,t4,t5\n"));
    ok(
        &[
            "impute", "--data", "grid.csv", "--mask", "mask.csv", "--oracle", "world.spec", "--samples", "3",
            "--set", "diffusion.steps=10", "--trace-out", "trace.csv", "--out", "imputed.csv",
        ],
        d,
    );
    for i in 0..3 {
        assert!(d.join(format!("trace.sample{i:03}.csv")).exists());
    }
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    assert!(trace.starts_with("k,node,lambda,log_posterior,guidance_norm,cluster_id\n"));
    assert_eq!(trace.lines().count(), 1 + 3 * 10 * 3);

    // A value grid is not a mask.
    let all = fence(
        &["evaluate", "--truth", "grid.csv", "--mask", "grid.csv", "--pred", "imputed.csv"],
        d,
    );
    assert!(!all.status.success());

    let hidden = "t0,t1,t2,t3,t4,t5\n1,1,1,1,1,1\n0,0,0,0,0,0\n1,1,1,0,0,0\n";
    fs::write(d.join("hidden.csv"), hidden).unwrap();
    ok(
        &[
            "evaluate", "--truth", "grid.csv", "--mask", "hidden.csv", "--pred", "imputed.csv", "--samples",
            "trace.sample000.csv", "trace.sample001.csv", "trace.sample002.csv", "--out", "report.csv",
        ],
        d,
    );
    let report = fs::read_to_string(d.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("mae,rmse,mape,crps"));
    let values: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!(values[0] > 0.0 && values[0] <= values[1] && values[3].is_finite());
    let per_node = fs::read_to_string(d.join("report.per_node.csv")).unwrap();
    assert_eq!(per_node.lines().count(), 4);
    assert!(per_node.lines().nth(1).unwrap().starts_with("0,,,,,0"));

    let summary = ok(&["trace", "--input", "trace.csv"], d);
    let summary = String::from_utf8(summary.stdout).unwrap();
    assert!(summary.starts_with("k,mean_lambda,"));
    assert_eq!(summary.lines().count(), 11);
}

#[test]
fn resolved_config_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.cfg"), ORACLE_CFG).unwrap();
    ok(&["run", "--config", "exp.cfg", "--out", "a"], d);
    ok(&["--threads", "1", "run", "--config", "a/config.resolved", "--out", "b"], d);
    for f in ["report.csv", "per_node.csv", "trace.csv", "imputed.csv", "config.resolved"] {
        let a = fs::read(d.join("a").join(f)).unwrap();
        let b = fs::read(d.join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let resolved = fs::read_to_string(d.join("a/config.resolved")).unwrap();
    assert!(resolved.contains("[guidance]\nmode = fence\n"));
    assert!(resolved.contains("oracle_pi_true = 0.5"));
}

#[test]
fn presets_are_materialized() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("exp.cfg"), ORACLE_CFG).unwrap();
    ok(&["run", "--config", "exp.cfg", "--preset", "wo-F", "--out", "f"], d);
    ok(&["run", "--config", "exp.cfg", "--preset", "wo-C", "--out", "c"], d);
    let f = fs::read_to_string(d.join("f/config.resolved")).unwrap();
    assert!(f.contains("mode = cfg:1"));
    let c = fs::read_to_string(d.join("c/config.resolved")).unwrap();
    assert!(c.contains("clusters = 1"));
    let trace = fs::read_to_string(d.join("f/trace.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.split(',').nth(2) == Some("1")));

    fs::write(d.join("paper.cfg"), format!("preset = paper-defaults\n{ORACLE_CFG}")).unwrap();
    ok(&["run", "--config", "paper.cfg", "--out", "p"], d);
    let p = fs::read_to_string(d.join("p/config.resolved")).unwrap();
    assert!(p.contains("d_model = 64") && p.contains("layers = 4") && p.contains("heads = 8"));
    // The file's own `steps = 10` wins over the preset's K = 50.
    assert!(p.contains("[diffusion]\nsteps = 10\n"));
}

#[test]
fn neural_stages_write_loadable_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["synth", "--nodes", "2", "--steps", "4", "--length", "80", "--out", "grid.csv"], d);
    let common = [
        "--set", "data.window=4", "--set", "diffusion.steps=5", "--set", "model.d_model=4", "--set",
        "model.layers=1", "--set", "model.step_embedding=8",
    ];
    let mut args = vec!["train-uncond", "--data", "grid.csv", "--out", "u.bin", "--epochs", "1"];
    args.extend(common);
    ok(&args, d);
    let mut args = vec!["finetune-cond", "--data", "grid.csv", "--init", "u.bin", "--out", "c.bin", "--epochs", "1"];
    args.extend(common);
    ok(&args, d);
    assert_eq!(&fs::read(d.join("c.bin")).unwrap()[..4], b"FNCE");

    fs::write(d.join("w.csv"), "t0,t1,t2,t3\n1.5,,0.2,0.1\n-0.3,0.4,0.0,0.9\n").unwrap();
    fs::write(d.join("m.csv"), "t0,t1,t2,t3\n1,1,0,0\n1,1,1,1\n").unwrap();
    let mut args = vec![
        "impute", "--data", "w.csv", "--mask", "m.csv", "--checkpoint-cond", "c.bin", "--checkpoint-uncond", "u.bin",
        "--samples", "2", "--out", "imp.csv",
    ];
    args.extend(common);
    ok(&args, d);
    let imp = fs::read_to_string(d.join("imp.csv")).unwrap();
    assert_eq!(imp.lines().count(), 3);
}

#[test]
fn exit_codes_follow_failure_class() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("typo.cfg"), "[guidance]\npie = 0.5\n").unwrap();
    let out = fence(&["run", "--config", "typo.cfg", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("guidance.pie"));

    let out = fence(&["run", "--set", "guidance.pi=2", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(2));

    fs::write(d.join("missing.cfg"), "[data]\ninput = nowhere.csv\n").unwrap();
    let out = fence(&["run", "--config", "missing.cfg", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.csv"));

    // An absurd fixed scale overflows the reverse chain.
    ok(&["synth", "--nodes", "3", "--steps", "6", "--length", "6", "--out", "g.csv", "--spec-out", "w.spec"], d);
    fs::write(d.join("m.csv"), "t0,t1,t2,t3,t4,t5\n1,1,1,1,1,1\n0,0,0,0,0,0\n1,1,1,1,1,1\n").unwrap();
    let out = fence(
        &[
            "impute", "--data", "g.csv", "--mask", "m.csv", "--oracle", "w.spec", "--mode", "cfg:1e300", "--set",
            "model.oracle_pi_true=0.5", "--out", "imp.csv",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
