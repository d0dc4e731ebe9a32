use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_tembed");

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn bundled(name: &str) -> PathBuf {
    crate_dir().join("configs").join(name)
}

fn tembed(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("TEMBED_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_schema(schema: &str, doc: &Path) {
    let schema = read_json(&crate_dir().join("schemas").join(schema));
    let validator = jsonschema::validator_for(&schema).expect("schema compiles");
    let instance = read_json(doc);
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{} fails its schema: {errors:?}", doc.display());
}

/// A tiny field-regression run that finishes in well under a second.
fn small_train_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.json");
    let text = format!(
        r#"{{
  "block": {{"pipeline": "node_additive", "channels": 4, "kernel": 1, "height": 2, "width": 2,
            "norm": {{"kind": "group", "groups": 1}}, "activation": "silu", "padding": "valid"}},
  "task": {{"name": "sine_gate"}},
  "train": {{"lr": 0.01, "steps": 60, "batch": 8, "log_every": 20}}{extra}
}}"#
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn bundled_instance_valid_is_time_blind() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    let o = tembed(&[
        "diagnose",
        bundled("instance_valid.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    assert!(line.starts_with("verdict=TimeBlind sensitivity="), "{line}");
    assert!(line.contains(" embed_grad="), "{line}");
    for f in [
        "diagnostics.json",
        "pairs.csv",
        "spatial_map.csv",
        "resolved_config.json",
    ] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert_schema("diagnostics_report.schema.json", &out.join("diagnostics.json"));
    assert_schema("run_config.schema.json", &out.join("resolved_config.json"));
    let pairs = std::fs::read_to_string(out.join("pairs.csv")).unwrap();
    assert!(pairs.starts_with("probe,i,j,t_i,t_j,linf\n"));
}

#[test]
fn bundled_gn1_positional_is_time_aware() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tembed(&[
        "diagnose",
        bundled("gn1_positional.json").to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("verdict=TimeAware "), "{}", stdout(&o));
}

#[test]
fn missing_config_names_the_path() {
    let o = tembed(&["diagnose", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/definitely/not/here.json"), "{}", stderr(&o));
}

#[test]
fn invalid_config_is_exit_2_with_field() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(
        &path,
        r#"{"block": {"pipeline": "node_additive", "channels": 6, "norm": {"kind": "group", "groups": 4}}}"#,
    )
    .unwrap();
    let o = tembed(&[
        "diagnose",
        path.to_str().unwrap(),
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("block.norm"), "{}", stderr(&o));

    std::fs::write(&path, r#"{"block": {"pipeline": "node_additive"}, "trian": {}}"#).unwrap();
    let o = tembed(&["train", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
}

#[test]
fn every_bundled_config_matches_the_schema() {
    for entry in std::fs::read_dir(crate_dir().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        assert_schema("run_config.schema.json", &path);
        let text = std::fs::read_to_string(&path).unwrap();
        tembed_cli::RunConfig::from_json(&text)
            .and_then(|c| c.resolve(None))
            .unwrap_or_else(|e| panic!("{}: {}", path.display(), e.message));
    }
}

#[test]
fn solve_exp_is_accurate() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tembed(&[
        "solve",
        "--testcase",
        "exp",
        "--rtol",
        "1e-8",
        "--atol",
        "1e-8",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    let y: f64 = line
        .strip_prefix("y_final=")
        .and_then(|s| s.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert!((y - std::f64::consts::E).abs() < 1e-7, "{line}");
    assert!(line.contains(" nfe=") && line.contains(" accepted=") && line.contains(" rejected="));
    assert_schema("solve_result.schema.json", &tmp.path().join("solve.json"));
}

#[test]
fn solve_oscillator_returns_after_one_period() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tembed(&[
        "solve",
        "--testcase",
        "oscillator",
        "--rtol",
        "1e-9",
        "--atol",
        "1e-9",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let r = read_json(&tmp.path().join("solve.json"));
    let y: Vec<f64> = r["y_final"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!((y[0] - 1.0).abs() < 1e-7 && y[1].abs() < 1e-7, "{y:?}");
}

#[test]
fn solve_zero_rtol_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tembed(&[
        "solve",
        "--testcase",
        "exp",
        "--rtol",
        "0",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rtol"));
}

#[test]
fn stiffness_writes_partial_result_and_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tembed(&[
        "solve",
        "--testcase",
        "oscillator",
        "--max-steps",
        "3",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(5), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("solve.json"));
    let t = r["t_final"].as_f64().unwrap();
    assert!(t > 0.0 && t < 2.0 * std::f64::consts::PI);
    assert_eq!(
        r["steps_accepted"].as_u64().unwrap() + r["steps_rejected"].as_u64().unwrap(),
        3
    );
}

#[test]
fn solve_block_testcase() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = format!("block:{}", bundled("gn1_positional.json").display());
    let o = tembed(&["solve", "--testcase", &cfg, "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&tmp.path().join("solve.json"));
    assert_eq!(r["y_final"].as_array().unwrap().len(), 16 * 8 * 8);

    let o = tembed(&["solve", "--testcase", "block:/no/such.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/no/such.json"));
}

#[test]
fn unknown_sweep_param_is_exit_2() {
    let o = tembed(&[
        "sweep",
        bundled("instance_valid.json").to_str().unwrap(),
        "--param",
        "depth",
        "--values",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = tembed(&[
        "sweep",
        bundled("instance_valid.json").to_str().unwrap(),
        "--param",
        "groups",
        "--values",
        "x",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_writes_metrics_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_train_config(tmp.path(), "");
    let out = tmp.path().join("run");
    for _ in 0..2 {
        // The second pass reuses the existing directory.
        let o = tembed(&["train", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).starts_with("final_loss="));
    }
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("step,loss,loss_over_floor,embed_grad_norm,time_elapsed_s")
    );
    let steps: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["0", "20", "40", "60"]);
    assert_schema("train_summary.schema.json", &out.join("summary.json"));
    assert_schema("run_config.schema.json", &out.join("resolved_config.json"));
    let s = read_json(&out.join("summary.json"));
    assert!(s["dopri5"]["nfe"].as_u64().unwrap() > 0);
}

#[test]
fn train_without_task_is_a_config_error() {
    let o = tembed(&["train", bundled("instance_valid.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("task"));
}

#[test]
fn divergence_is_exit_4_with_step() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("diverge.json");
    std::fs::write(
        &path,
        r#"{"block": {"pipeline": "node_additive", "channels": 4, "kernel": 1, "height": 2, "width": 2,
                     "norm": {"kind": "group", "groups": 1}, "padding": "valid"},
            "task": {"name": "sine_gate"},
            "train": {"optimizer": {"kind": "sgd", "momentum": 0.9}, "lr": 1e200, "steps": 50, "batch": 4}}"#,
    )
    .unwrap();
    let o = tembed(&["train", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
}

#[test]
fn env_seed_overrides_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_train_config(tmp.path(), r#", "seed": 3"#);
    let run = |dir: &str, env: Option<&str>| {
        let out = tmp.path().join(dir);
        let mut cmd = Command::new(BIN);
        cmd.args(["train", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
            .env_remove("TEMBED_SEED");
        if let Some(s) = env {
            cmd.env("TEMBED_SEED", s);
        }
        assert!(cmd.status().unwrap().success());
        (
            read_json(&out.join("resolved_config.json")),
            std::fs::read(out.join("metrics.csv")).unwrap(),
        )
    };
    let (cfg3, m3) = run("a", None);
    let (cfg8, m8) = run("b", Some("8"));
    let (_, m3b) = run("c", Some("3"));
    assert_eq!(cfg3["seed"], 3);
    assert_eq!(cfg8["seed"], 8);
    assert_eq!(cfg8["block"]["seed"], 8);
    assert_eq!(cfg8["train"]["seed"], 8);
    assert_ne!(m3, m8);
    assert_eq!(m3, m3b);

    let mut cmd = Command::new(BIN);
    let o = cmd
        .args(["train", cfg.to_str().unwrap()])
        .env("TEMBED_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_aggregates_over_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_train_config(tmp.path(), "");
    let out = tmp.path().join("sweep");
    let o = tembed(&[
        "sweep",
        cfg.to_str().unwrap(),
        "--param",
        "groups",
        "--values",
        "1,2,4",
        "--jobs",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let agg = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = agg.lines().collect();
    assert_eq!(lines[0], "value,mean_metric,std_metric,mean_nfe");
    assert_eq!(lines.len(), 4);
    let runs = std::fs::read_to_string(out.join("sweep_runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 1 + 3 * 3);
    assert_schema("sweep_summary.schema.json", &out.join("sweep.json"));
    assert!(out.join("runs/groups_2/seed_1/metrics.csv").exists());
}

#[test]
fn singleton_sweep_matches_train() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_train_config(tmp.path(), r#", "seed": 4"#);
    let sweep_out = tmp.path().join("sweep");
    let o = tembed(&[
        "sweep",
        cfg.to_str().unwrap(),
        "--param",
        "activation",
        "--values",
        "silu",
        "--seeds",
        "1",
        "--out",
        sweep_out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let train_out = tmp.path().join("train");
    assert!(
        tembed(&["train", cfg.to_str().unwrap(), "--out", train_out.to_str().unwrap()])
            .status
            .success()
    );
    let run_dir = sweep_out.join("runs/activation_silu/seed_4");
    for f in ["metrics.csv", "summary.json"] {
        assert_eq!(
            std::fs::read(run_dir.join(f)).unwrap(),
            std::fs::read(train_out.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn weight_scale_probe_sweep_without_task() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("probe.json");
    std::fs::write(
        &path,
        r#"{"block": {"pipeline": "node_additive", "channels": 8, "kernel": 1, "height": 4, "width": 4,
                     "padding": "valid", "activation": "silu"},
            "diagnostics": {"probes": 2, "t_grid": 4}}"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    let o = tembed(&[
        "sweep",
        path.to_str().unwrap(),
        "--param",
        "weight_scale",
        "--values",
        "0.1,1,10",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s = read_json(&out.join("sweep.json"));
    assert_eq!(s["metric"], "embed_grad_norm");
    let means: Vec<f64> = s["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["mean_metric"].as_f64().unwrap())
        .collect();
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

fn tree_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_train_config(tmp.path(), r#", "seed": 2"#);
    let cfg = cfg.to_str().unwrap();
    let diag = bundled("instance_valid.json");
    let commands: Vec<Vec<&str>> = vec![
        vec!["diagnose", diag.to_str().unwrap()],
        vec!["train", cfg],
        vec![
            "sweep",
            cfg,
            "--param",
            "bias_policy",
            "--values",
            "zero_both,zero_conv",
            "--jobs",
            "2",
        ],
        vec!["solve", "--testcase", "oscillator"],
    ];
    for args in commands {
        let trees: Vec<_> = ["first", "second"]
            .iter()
            .map(|run| {
                let out = tmp.path().join(format!("{}_{run}", args[0]));
                let mut full = args.clone();
                full.extend(["--out", out.to_str().unwrap()]);
                let o = tembed(&full);
                assert!(o.status.success(), "{args:?}: {}", stderr(&o));
                (stdout(&o), tree_bytes(&out))
            })
            .collect();
        assert!(!trees[0].1.is_empty());
        assert_eq!(trees[0], trees[1], "{args:?} is not reproducible");
    }
}
