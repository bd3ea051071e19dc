use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::time::{Duration, Instant};

fn dpoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpoe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("spawn dpoe")
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = dpoe(args, cwd);
    assert!(
        out.status.success(),
        "dpoe {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const CONFIG: &str = r#"
k = 3
latent_dims = [2]
epochs = 2
batch_size = 32
learning_rate = 1e-3
lambda = 1.0
gamma = 1.0

[architecture]
hidden_width = 16
disc_mapping_width = 8
disc_score_width = 8
"#;

/// synth → inject → train, leaving `m.ckpt` and `dirty/` in `dir`.
fn trained(dir: &Path) {
    ok(&["synth", "--n", "200", "--dim", "4", "--seed", "3", "--out", "clean"], dir);
    let log = ok(&["inject", "--type", "mix", "--seed", "1", "--data", "clean", "--out", "dirty"], dir);
    assert!(log.contains("injected 30 anomalies"), "{log}");
    std::fs::write(dir.join("cfg.toml"), CONFIG).unwrap();
    ok(
        &["train", "--config", "cfg.toml", "--data", "dirty", "--out", "m.ckpt", "--quiet"],
        dir,
    );
}

#[test]
fn train_and_score_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let telemetry = std::fs::read_to_string(dir.join("m.ckpt.telemetry.csv")).unwrap();
    assert_eq!(telemetry.lines().count(), 3);
    assert!(telemetry.starts_with("epoch,recon,kl_s,kl_c,tc,disc_loss,wall_time"));

    let log = ok(&["score", "--ckpt", "m.ckpt", "--data", "dirty", "--out", "scores.csv"], dir);
    assert!(log.contains("AUC"));
    let scores = std::fs::read_to_string(dir.join("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines[0], "instance_id,score,argmax_cluster");
    assert_eq!(lines.len(), 201);
    let again_log = ok(&["score", "--ckpt", "m.ckpt", "--data", "dirty", "--out", "again.csv"], dir);
    assert_eq!(log.lines().next(), again_log.lines().next());
    assert_eq!(scores, std::fs::read_to_string(dir.join("again.csv")).unwrap());
}

#[test]
fn ablated_training_and_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let log = ok(
        &["train", "--config", "cfg.toml", "--data", "dirty", "--out", "a.ckpt", "--ablate", "Cc", "--ablate", "tc", "--quiet"],
        dir,
    );
    assert!(log.contains("w/o Cc+tc"), "{log}");

    let bad = dpoe(
        &["train", "--config", "cfg.toml", "--data", "dirty", "--out", "b.ckpt", "--ablate", "xyz"],
        dir,
    );
    assert!(!bad.status.success());

    std::fs::write(dir.join("junk.ckpt"), b"NOTACKPT and some bytes").unwrap();
    let bad = dpoe(&["score", "--ckpt", "junk.ckpt", "--data", "dirty", "--out", "x.csv"], dir);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unrecognized checkpoint format"));

    let bad = dpoe(&["inject", "--type", "mix", "--ratio", "0", "--data", "dirty", "--out", "y"], dir);
    assert!(!bad.status.success());
}

const REQUEST: &str = r#"{"views":{"v1":[0.1,-0.2,0.3,0.0],"v2":[1.0,0.5,-1.0,0.2]}}"#;

#[test]
fn serve_over_stdio() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let mut child = Command::new(env!("CARGO_BIN_EXE_dpoe"))
        .args(["serve", "--ckpt", "m.ckpt", "--stdio"])
        .current_dir(dir)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    {
        let stdin = child.stdin.as_mut().unwrap();
        writeln!(stdin, "{REQUEST}\n{{oops\n{REQUEST}").unwrap();
    }
    drop(child.stdin.take());
    let out = child.wait_with_output().unwrap();
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with(r#"{"score":"#));
    assert_eq!(lines[1], r#"{"error":"parse"}"#);
    assert_eq!(lines[0], lines[2]);
}

#[test]
fn serve_over_tcp() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let mut child = Command::new(env!("CARGO_BIN_EXE_dpoe"))
        .args(["serve", "--ckpt", "m.ckpt", "--port", &port.to_string()])
        .current_dir(dir)
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let deadline = Instant::now() + Duration::from_secs(30);
    let stream = loop {
        match TcpStream::connect(("127.0.0.1", port)) {
            Ok(s) => break s,
            Err(_) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(50)),
            Err(e) => {
                child.kill().ok();
                panic!("server never came up: {e}");
            }
        }
    };
    let mut writer = stream.try_clone().unwrap();
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    writeln!(writer, r#"{{"views":{{"v7":[1]}}}}"#).unwrap();
    reader.read_line(&mut line).unwrap();
    assert!(line.contains("unknown view 'v7'"), "{line}");
    line.clear();
    writeln!(writer, "{REQUEST}").unwrap();
    reader.read_line(&mut line).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    let probs: f64 = v["cluster_probs"].as_array().unwrap().iter().map(|p| p.as_f64().unwrap()).sum();
    assert!((probs - 1.0).abs() < 1e-5);
    child.kill().ok();
    child.wait().ok();
}

#[test]
fn eval_writes_a_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("spec.toml"),
        r#"
[[experiment]]
id = "tiny"
anomaly = "mix"
seeds = [0, 1]
variants = ["full", "Cc"]
[experiment.source]
kind = "synthetic"
views = 2
clusters = 3
n = 120
dim = 4
[experiment.model]
k = 3
latent_dims = [2]
epochs = 1
batch_size = 32
[experiment.model.architecture]
hidden_width = 16
disc_mapping_width = 8
disc_score_width = 8
[experiment.sweep]
param = "gamma"
values = [0.0, 1.0]
"#,
    )
    .unwrap();
    ok(&["eval", "--spec", "spec.toml", "--out", "report"], dir);
    let results = std::fs::read_to_string(dir.join("report/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 2 * 2);
    let summary = std::fs::read_to_string(dir.join("report/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(dir.join("report/summary.md").exists());
    assert!(dir.join("report/curve_tiny_gamma.png").exists());
}
