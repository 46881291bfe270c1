use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ssr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssr"))
        .args(args)
        .env_remove("SSR_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    let c = out.status.code().expect("exited normally");
    assert!((0..=3).contains(&c), "exit code {c} outside 0..=3");
    c
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn route_softmax_weights() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "s.csv", &format!("{},0\n", 2f64.ln()));
    let out = ssr(&["route", "--scores", &scores, "--k", "2", "--force-branch", "softmax"]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    assert_eq!(v["branch"], "Softmax");
    let w: Vec<f64> = serde_json::from_value(v["tokens"][0]["weights"].clone()).unwrap();
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn route_inference_never_sinkhorn() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "s.csv", "1,2,3\n3,2,1\n");
    for seed in ["0", "1", "2"] {
        let out = ssr(&[
            "route",
            "--scores",
            &scores,
            "--mode",
            "inference",
            "--p",
            "1.0",
            "--seed",
            seed,
        ]);
        assert_eq!(code(&out), 0);
        assert_eq!(stdout_json(&out)["branch"], "Softmax");
    }
}

#[test]
fn route_identity_plan() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "id.csv", "1,0\n0,1\n");
    let out = ssr(&[
        "route",
        "--scores",
        &scores,
        "--k",
        "1",
        "--cost",
        "linear",
        "--xi",
        "1",
        "--force-branch",
        "sinkhorn",
        "--plan",
    ]);
    assert_eq!(code(&out), 0);
    let v = stdout_json(&out);
    let e = std::f64::consts::E;
    let data: Vec<f64> = serde_json::from_value(v["plan"]["data"].clone()).unwrap();
    let want = [e / (e + 1.0), 1.0 / (e + 1.0), 1.0 / (e + 1.0), e / (e + 1.0)];
    for (a, b) in data.iter().zip(want) {
        assert!((a - b).abs() < 1e-12, "{data:?}");
    }
    assert_eq!(v["diagnostics"]["converged"], true);
    assert_eq!(v["decision"]["branch"], "Sinkhorn");
}

#[test]
fn route_plan_is_null_on_softmax_branch() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "s.csv", "1,0\n");
    let out = ssr(&["route", "--scores", &scores, "--force-branch", "softmax", "--plan"]);
    assert_eq!(code(&out), 0);
    assert!(stdout_json(&out)["plan"].is_null());
}

#[test]
fn route_ragged_is_input_error() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "r.csv", "1,2\n3\n");
    let out = ssr(&["route", "--scores", &scores]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn route_missing_file_and_bad_flags() {
    assert_eq!(code(&ssr(&["route", "--scores", "/nonexistent/s.csv"])), 2);
    assert_eq!(code(&ssr(&["route"])), 2);
    assert_eq!(code(&ssr(&["frobnicate"])), 2);
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "s.csv", "1,0\n");
    assert_eq!(code(&ssr(&["route", "--scores", &scores, "--k", "5"])), 2);
    assert_eq!(code(&ssr(&["route", "--scores", &scores, "--cost", "quadratic"])), 2);
}

#[test]
fn route_overflow_is_numeric_failure() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "hi.csv", "40,39\n39,40\n");
    let args = [
        "route",
        "--scores",
        &scores,
        "--cost",
        "linear",
        "--xi",
        "0.05",
        "--force-branch",
        "sinkhorn",
    ];
    let naive = ssr(&[&args[..], &["--naive"]].concat());
    assert_eq!(code(&naive), 3);
    let v = stdout_json(&naive);
    assert_eq!(v["error"], "overflow");
    assert_eq!(v["diagnostics"]["overflow"], true);

    let stable = ssr(&args);
    assert_eq!(code(&stable), 0, "{}", String::from_utf8_lossy(&stable.stderr));
    assert_eq!(stdout_json(&stable)["branch"], "Sinkhorn");
}

#[test]
fn route_plan_underflow_is_numeric_failure() {
    let dir = TempDir::new().unwrap();
    let scores = write(dir.path(), "big.csv", "40,0\n0,45\n");
    let out = ssr(&[
        "route",
        "--scores",
        &scores,
        "--cost",
        "linear",
        "--xi",
        "0.05",
        "--force-branch",
        "sinkhorn",
    ]);
    assert_eq!(code(&out), 3);
    let v = stdout_json(&out);
    assert_eq!(v["error"], "underflow");
    assert_eq!(v["diagnostics"]["converged"], true);
}

#[test]
fn verify_filter_runs_one_suite() {
    let out = ssr(&["verify", "--filter", "prop1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<_> = text.lines().filter(|l| l.contains(" pass ")).collect();
    assert_eq!(lines.len(), 2, "{text}");
    assert!(lines.iter().all(|l| l.starts_with("prop1.")));
}

#[test]
fn verify_unknown_filter() {
    assert_eq!(code(&ssr(&["verify", "--filter", "no-such-thing"])), 2);
}

#[test]
fn verify_full_suite() {
    let out = ssr(&["verify"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains(" 0 failed"));
}

const TASK: &str =
    r#""task": {"tokens": 128, "steps": 40, "d": 4, "experts": 4, "hidden": 8, "clusters": 4, "batch_size": 32}"#;

fn experiment(dir: &Path, runs: &str) -> String {
    let out = dir.join("out");
    write(
        dir,
        "exp.json",
        &format!(
            r#"{{{TASK}, "runs": [{runs}], "output_dir": {:?}, "seed": 5}}"#,
            out.to_str().unwrap()
        ),
    )
}

/// Rows of a run CSV with the wall-time column removed.
fn csv_without_time(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut reader = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    let time = header.iter().position(|h| h == "step_ms").unwrap();
    let rows = reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            r.iter()
                .enumerate()
                .filter(|(i, _)| *i != time)
                .map(|(_, v)| v.to_string())
                .collect()
        })
        .collect();
    (header, rows)
}

#[test]
fn train_writes_schema_valid_outputs() {
    let dir = TempDir::new().unwrap();
    let config = experiment(
        dir.path(),
        r#"{"name": "a", "router": {"p": 0.2}}, {"name": "b", "router": {"p": 0.2, "seed": 1}}"#,
    );
    let out = ssr(&["train", "--config", &config]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");

    let (ha, ra) = csv_without_time(&out_dir.join("a.csv"));
    let (hb, rb) = csv_without_time(&out_dir.join("b.csv"));
    assert_eq!(
        ha,
        [
            "step",
            "loss",
            "aux_loss",
            "branch",
            "load_entropy",
            "load_cv",
            "step_ms"
        ]
    );
    assert_eq!(ha, hb);
    assert_eq!(ra.len(), 40);
    assert_ne!(ra, rb, "different seeds must give different runs");
    for row in &ra {
        assert!(row[0].parse::<usize>().is_ok());
        for v in [&row[1], &row[2], &row[4], &row[5]] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
        assert!(row[3] == "Softmax" || row[3] == "Sinkhorn");
    }
    let raw = std::fs::read(out_dir.join("a.csv")).unwrap();
    assert!(!raw.contains(&b'\r'));

    let summary: Value = serde_json::from_slice(&std::fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    assert_eq!(runs.len(), 2);
    for r in runs {
        assert_eq!(r["failed"], false);
        for key in ["final_loss", "load_entropy", "load_cv", "wall_time_ms"] {
            assert!(r[key].as_f64().unwrap().is_finite(), "{key}");
        }
    }
}

#[test]
fn train_is_deterministic() {
    let runs = r#"{"name": "ssr", "router": {"p": 0.3, "alpha_noise": 0.5}}"#;
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    assert_eq!(code(&ssr(&["train", "--config", &experiment(a.path(), runs)])), 0);
    assert_eq!(code(&ssr(&["train", "--config", &experiment(b.path(), runs)])), 0);
    let read = |d: &TempDir| csv_without_time(&d.path().join("out/ssr.csv"));
    assert_eq!(read(&a), read(&b));
}

#[test]
fn train_marks_overflowing_run_failed() {
    let dir = TempDir::new().unwrap();
    let config = experiment(
        dir.path(),
        r#"{"name": "ok", "router": {"p": 0}},
           {"name": "unstable", "router": {"p": 1, "cost_mode": "linear", "xi": 0.05, "stabilized": false},
            "gate_init_scale": 200}"#,
    );
    let out = ssr(&["train", "--config", &config]);
    assert_eq!(code(&out), 0);
    let summary: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/summary.json")).unwrap()).unwrap();
    let runs = summary["runs"].as_array().unwrap();
    let unstable = runs.iter().find(|r| r["name"] == "unstable").unwrap();
    assert_eq!(unstable["failed"], true);
    assert_eq!(unstable["failure"], "NaN");
    assert!(unstable["final_loss"].is_null());
    let ok = runs.iter().find(|r| r["name"] == "ok").unwrap();
    assert_eq!(ok["failed"], false);
}

#[test]
fn train_rejects_bad_configs() {
    let dir = TempDir::new().unwrap();
    let empty = write(dir.path(), "empty.json", r#"{"runs": []}"#);
    assert_eq!(code(&ssr(&["train", "--config", &empty])), 2);

    let unknown = write(
        dir.path(),
        "unknown.json",
        "{\"runs\": [\n{\"name\": \"a\", \"lr\": 1}]}",
    );
    let out = ssr(&["train", "--config", &unknown]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lr") && err.contains("line 2"), "{err}");

    let dup = write(dir.path(), "dup.json", r#"{"runs": [{"name": "a"}, {"name": "a"}]}"#);
    assert_eq!(code(&ssr(&["train", "--config", &dup])), 2);
    assert_eq!(code(&ssr(&["train", "--config", "/nonexistent.json"])), 2);
}

#[test]
fn output_dir_env_override() {
    let dir = TempDir::new().unwrap();
    let config = experiment(dir.path(), r#"{"name": "v", "router": {"p": 0}}"#);
    let elsewhere = dir.path().join("elsewhere");
    let out = Command::new(env!("CARGO_BIN_EXE_ssr"))
        .args(["train", "--config", &config])
        .env("SSR_OUTPUT_DIR", &elsewhere)
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert!(elsewhere.join("v.csv").exists());
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bench_single_vanilla_is_unit_and_warns() {
    let dir = TempDir::new().unwrap();
    let config = write(
        dir.path(),
        "bench.json",
        &format!(
            r#"{{"runs": [{{"name": "vanilla", "router": {{"p": 0}}}}],
                "bench": {{"m": 16, "n": 4, "d": 4, "h": 8, "repetitions": 5, "warmup": 1}},
                "output_dir": {:?}}}"#,
            dir.path().join("out").to_str().unwrap()
        ),
    );
    let out = ssr(&["bench", "--config", &config]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let mut reader = csv::Reader::from_path(dir.path().join("out/bench.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        [
            "config_id",
            "p",
            "xi",
            "cost_mode",
            "mean_ms",
            "std_ms",
            "overhead_ratio"
        ]
    );
    let rows: Vec<_> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][6].parse::<f64>().unwrap(), 1.0);
    let doc: Value = serde_json::from_slice(&std::fs::read(dir.path().join("out/bench.json")).unwrap()).unwrap();
    assert_eq!(doc["results"].as_array().unwrap().len(), 1);
}
