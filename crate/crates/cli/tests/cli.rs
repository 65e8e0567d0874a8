use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

const TINY: &str = r#"
seed = 3
[sim]
fleet_size = 4
episode_ticks = 48
hour_ticks = 2
entry_window = 2
[sim.grid]
radius = 2
speed = 300.0
[demand]
mode = "synthetic"
base_rate = 0.02
hotspots = [{ cell = { q = 1, r = 0 }, peak_rate = 0.4, peak_hour = 8.0, width = 5.0 }]
[train]
episodes = 2
batch_size = 8
hidden = [8]
refresh_period = 1
[train.options]
batch_size = 8
warmup_steps = 5
hidden = [8]
[train.embedding]
hidden = [8]
batch_size = 8
steps = 30
[eval]
seeds = [1, 2]
episodes = 1
gap_ticks = [10, 20]
"#;

fn droplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_droplab")).args(args).output().unwrap()
}

fn ok_json(args: &[&str]) -> Value {
    let out = droplab(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(args: &[&str]) -> Value {
    let out = droplab(args);
    assert!(!out.status.success(), "{args:?} should fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, TINY).unwrap();
    p.display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn train_evaluate_and_compare() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let dqn = tmp.path().join("dqn");
    let greedy = tmp.path().join("greedy");

    let trained = ok_json(&["train", "--config", &cfg, "--model", "dqn", "--out", &s(&dqn)]);
    assert_eq!(trained["command"], "train");
    assert_eq!(trained["training"].as_array().unwrap().len(), 2);
    for f in ["policy.json", "train_log.csv", "metrics.json", "episodes.jsonl", "gaps.csv", "training.json"] {
        assert!(dqn.join(f).exists(), "{f} missing");
    }
    let m = &trained["metrics"];
    let arrivals = m["overall"]["arrivals"].as_u64().unwrap();
    let accounted = m["overall"]["served"].as_u64().unwrap()
        + m["overall"]["rejected"].as_u64().unwrap()
        + m["pending"].as_u64().unwrap();
    assert_eq!(accounted, arrivals);

    // the saved policy replays the training run's evaluation
    let policy = s(&dqn.join("policy.json"));
    let again = ok_json(&["evaluate", "--config", &cfg, "--policy", &policy]);
    assert_eq!(again["event_hashes"], trained["event_hashes"]);
    assert_eq!(again["metrics"], trained["metrics"]);

    ok_json(&["simulate", "--config", &cfg, "--model", "greedy", "--out", &s(&greedy)]);
    let events = std::fs::read_to_string(greedy.join("events.jsonl")).unwrap();
    assert!(events.lines().count() > 0);

    let report_dir = tmp.path().join("report");
    let report = ok_json(&[
        "report",
        "compare",
        &s(&dqn),
        &s(&greedy),
        "--expected",
        "dqn,greedy,drdqn",
        "--out",
        &s(&report_dir),
    ]);
    assert_eq!(report["report"]["rows"].as_array().unwrap().len(), 2);
    assert_eq!(report["report"]["missing"], serde_json::json!(["drdqn"]));
    let md = std::fs::read_to_string(report_dir.join("report.md")).unwrap();
    assert!(md.contains("**"));
    // re-running the report changes nothing
    let first = std::fs::read(report_dir.join("report.csv")).unwrap();
    ok_json(&["report", "compare", &s(&dqn), &s(&greedy), "--out", &s(&report_dir)]);
    assert_eq!(std::fs::read(report_dir.join("report.csv")).unwrap(), first);
}

#[test]
fn embed_and_dithering_write_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("embed");
    let e = ok_json(&["embed", "--config", &cfg, "--model", "random", "--bucket-ticks", "4", "--out", &s(&out)]);
    assert!(e["nodes"].as_u64().unwrap() > 0);
    for f in ["terg.csv", "embedding.csv", "norms.csv", "embed_loss.csv", "phi.json", "embed.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }

    let d = tmp.path().join("dither");
    let v = ok_json(&["diag", "dithering", "--trials", "20000", "--max-ring", "3", "--out", &s(&d), "--seed", "9"]);
    let curve: Vec<f64> = v["curve"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((curve[0] - 6.0 / 7.0).abs() < 0.01);
    assert!(curve.windows(2).all(|w| w[1] <= w[0]));
    let csv = std::fs::read_to_string(d.join("curve.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn failures_exit_nonzero_with_error_json() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());

    let e = err_json(&["train", "--config", "/definitely/not/here.toml"]);
    assert_eq!(e["error"]["code"], "io");

    let e = err_json(&["simulate", "--config", &cfg, "--model", "dqn"]);
    assert_eq!(e["error"]["code"], "invalid_argument");

    let e = err_json(&["train", "--model", "sarsa"]);
    assert_eq!(e["error"]["code"], "usage");

    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[sim]\nfleet = 3\n").unwrap();
    let e = err_json(&["train", "--config", &s(&bad)]);
    assert_eq!(e["error"]["code"], "invalid_config");

    let e = err_json(&["diag", "dithering", "--server", "http://127.0.0.1:9"]);
    assert_eq!(e["error"]["code"], "transport");
}

#[test]
fn talks_to_a_separate_server() {
    let mut server = Command::new(env!("CARGO_BIN_EXE_droplab"))
        .args(["serve", "--addr", "127.0.0.1:0", "--workers", "1"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().strip_prefix("listening on ").unwrap().to_string();
    let v = ok_json(&["diag", "dithering", "--trials", "1000", "--max-ring", "2", "--server", &url]);
    server.kill().unwrap();
    server.wait().unwrap();
    assert_eq!(v["curve"].as_array().unwrap().len(), 2);
}
