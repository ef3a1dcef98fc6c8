use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::Duration;

use ordepth_client::Client;
use ordepth_core::annotation::Answer;
use ordepth_core::supervision::RelationSet;

fn ordepth(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ordepth"))
        .args(args)
        .current_dir(dir)
        .env_remove("ORDEPTH_PORT")
        .env_remove("ORDEPTH_DATA_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path) {
    let o = ordepth(dir, &["gen-data", "--out", "data", "--count", "4", "--seed", "2", "--validate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn every_seeded_command_prints_its_seed() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let runs = [
        ordepth(dir.path(), &["gen-data", "--out", "d2", "--count", "2", "--seed", "17"]),
        ordepth(dir.path(), &["annotate-cost", "--poses", "5", "--seed", "17"]),
        ordepth(dir.path(), &["annotate-sim", "--registry", "data/registry.json", "--in-process", "--seed", "17"]),
        ordepth(dir.path(), &["gradcheck", "--configs", "2", "--seed", "17"]),
        ordepth(dir.path(), &["train", "--task", "depth-ordinal", "--iterations", "5", "--dataset-size", "20", "--hidden", "8", "--seed", "17", "--out", "run"]),
        ordepth(dir.path(), &["eval", "--model", "run/model.ckpt"]),
    ];
    for o in runs {
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("seed: 17\n"), "{}", stdout(&o));
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let code = |args: &[&str]| ordepth(dir.path(), args).status.code().unwrap();
    assert_eq!(code(&["no-such-command"]), 2);
    assert_eq!(code(&["train", "--task", "nope", "--out", "x"]), 2);
    assert_eq!(code(&["gen-data", "--out", "x", "--count", "0"]), 2);
    assert_eq!(code(&["annotate-sim", "--registry", "missing.json"]), 2);
    assert_eq!(code(&["annotate-cost", "--poses", "5", "--error-rate", "0.7"]), 2);
    std::fs::write(dir.path().join("bad.json"), "{not json").unwrap();
    assert_eq!(code(&["train", "--config", "bad.json", "--out", "x"]), 2);
    // A failed check.
    assert_eq!(code(&["annotate-cost", "--poses", "20", "--max-mean", "1"]), 1);
    assert_eq!(code(&["annotate-cost", "--poses", "20", "--max-mean", "40", "--min-accuracy", "0.5"]), 0);
}

#[test]
fn corrupted_checkpoint_is_a_clean_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = ordepth(dir.path(), &["train", "--task", "depth-regression", "--iterations", "5", "--dataset-size", "20", "--hidden", "8", "--out", "run"]);
    assert!(o.status.success());
    let ckpt = dir.path().join("run/model.ckpt");
    let bytes = std::fs::read(&ckpt).unwrap();
    std::fs::write(&ckpt, &bytes[..bytes.len() / 2]).unwrap();
    for args in [
        &["gradcheck", "--configs", "2", "--checkpoint", "run/model.ckpt"][..],
        &["eval", "--model", "run/model.ckpt"][..],
    ] {
        let o = ordepth(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("usage error") && !err.contains("panicked"), "{err}");
    }
}

#[test]
fn train_validate_and_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let o = ordepth(
        dir.path(),
        &["train", "--task", "end-to-end", "--iterations", "20", "--dataset-size", "30", "--hidden", "16", "--out", "run", "--validate"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("without reconstruction"));
    assert!(dir.path().join("run/recon.ckpt").exists());
    let csv = std::fs::read_to_string(dir.path().join("run/report.csv")).unwrap();
    assert!(csv.starts_with("task,seed,ordinal_accuracy"));

    // End-to-end evaluation needs the reconstruction checkpoint.
    assert_eq!(ordepth(dir.path(), &["eval", "--model", "run/model.ckpt"]).status.code(), Some(1));
    let o = ordepth(dir.path(), &["eval", "--model", "run/model.ckpt", "--recon", "run/recon.ckpt", "--out", "eval.json", "--validate"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/report.json")).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"task": "coords-weak", "seed": 9, "dataset_size": 20, "hidden": 8, "iterations": 1000}"#,
    )
    .unwrap();
    let o = ordepth(dir.path(), &["train", "--config", "cfg.json", "--iterations", "5", "--out", "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("seed: 9\n") && out.contains("task: coords-weak"), "{out}");
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(r["config"]["iterations"], 5);
}

#[test]
fn embedded_http_and_in_process_simulation_match() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let base = ["annotate-sim", "--registry", "data/registry.json", "--error-rate", "0.2", "--ambiguous-rate", "0.1", "--seed", "3"];
    let http = ordepth(dir.path(), &[&base[..], &["--out", "http.jsonl", "--validate"]].concat());
    let local = ordepth(dir.path(), &[&base[..], &["--in-process", "--out", "local.jsonl"]].concat());
    assert!(http.status.success() && local.status.success());
    assert_eq!(
        std::fs::read(dir.path().join("http.jsonl")).unwrap(),
        std::fs::read(dir.path().join("local.jsonl")).unwrap()
    );
    assert!(stdout(&http).contains("non-transitive exports: 0"));
}

#[test]
fn cost_csv_has_one_row_per_pose() {
    let dir = tempfile::tempdir().unwrap();
    let o = ordepth(dir.path(), &["annotate-cost", "--poses", "25", "--joints", "6", "--shuffled", "--csv", "c.csv", "--json", "c.json"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert!(out.contains("exhaustive pairs: 15") && out.contains("order: shuffled"), "{out}");
    let csv = std::fs::read_to_string(dir.path().join("c.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "pose,questions,strict_pairs,correct,inverted,exact,transitive_truth,exported_transitive"
    );
    assert_eq!(lines.count(), 25);
}

struct Served(Child);

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

fn serve(dir: &Path, port: u16) -> Served {
    let child = Command::new(env!("CARGO_BIN_EXE_ordepth"))
        .arg("serve")
        .current_dir(dir)
        .env("ORDEPTH_PORT", port.to_string())
        .env("ORDEPTH_DATA_DIR", "data")
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    Served(child)
}

async fn wait_healthy(client: &Client) {
    for _ in 0..200 {
        if client.health().await.is_ok() {
            return;
        }
        std::thread::sleep(Duration::from_millis(25));
    }
    panic!("server did not come up");
}

#[tokio::test]
async fn serve_persists_sessions_and_export_reads_them() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let port = free_port();
    let client = Client::new(format!("http://127.0.0.1:{port}"));

    let server = serve(dir.path(), port);
    wait_healthy(&client).await;
    let id = client.create_session("item-00001").await.unwrap().session_id;
    for _ in 0..3 {
        client.answer(&id, Answer::Closer).await.unwrap();
    }
    drop(server);

    // Restart on the same data directory and finish the session.
    let _server = serve(dir.path(), port);
    wait_healthy(&client).await;
    assert_eq!(client.question(&id).await.unwrap().question_count, 3);
    let done = client.drive(&id, |i, j| if i < j { Answer::Closer } else { Answer::Farther }).await.unwrap();
    assert!(done.ordering.is_some());

    let port_s = port.to_string();
    let d = dir.path().to_path_buf();
    let id2 = id.clone();
    let o = tokio::task::spawn_blocking(move || {
        Command::new(env!("CARGO_BIN_EXE_ordepth"))
            .args(["export-relations", "--session", &id2, "--out", "rel.json"])
            .current_dir(&d)
            .env("ORDEPTH_PORT", &port_s)
            .output()
            .unwrap()
    })
    .await
    .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let exported: RelationSet = serde_json::from_slice(&std::fs::read(dir.path().join("rel.json")).unwrap()).unwrap();
    assert_eq!(exported, client.relations(&id).await.unwrap());
    assert_eq!(exported.len(), 91);

    let port_s = port.to_string();
    let d = dir.path().to_path_buf();
    let missing = tokio::task::spawn_blocking(move || {
        Command::new(env!("CARGO_BIN_EXE_ordepth"))
            .args(["export-relations", "--session", "s999999"])
            .current_dir(&d)
            .env("ORDEPTH_PORT", &port_s)
            .output()
            .unwrap()
    })
    .await
    .unwrap();
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn serve_fails_cleanly_when_port_is_taken() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path());
    let held = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = held.local_addr().unwrap().port().to_string();
    let o = ordepth(dir.path(), &["serve", "--port", &port]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cannot bind"));
}

#[test]
fn annotate_cost_examples() {
    let dir = tempfile::tempdir().unwrap();
    let o = ordepth(dir.path(), &["annotate-cost", "--poses", "50", "--joints", "2"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("mean questions: 1.00\n"), "{}", stdout(&o));
    let o = ordepth(dir.path(), &["annotate-cost", "--poses", "10000", "--error-rate", "0.05", "--min-accuracy", "0.90", "--max-mean", "30"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("reference mean (human annotators, 14 joints): 17"));
}

#[test]
fn gradcheck_scope_selects_suites() {
    let dir = tempfile::tempdir().unwrap();
    let o = ordepth(dir.path(), &["gradcheck", "--scope", "volumetric", "--configs", "5", "--json", "g.json"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    let checks = r["checks"].as_array().unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c["scope"] == "volumetric"), "{checks:?}");
    assert_eq!(ordepth(dir.path(), &["gradcheck", "--scope", "everything"]).status.code(), Some(2));
}
