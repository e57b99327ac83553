use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accel_core::embedding::HashProvider;
use accel_core::ingest::write_csv;
use accel_core::synthetic::{generate, SyntheticSpec};
use serde_json::Value;

const DIM: usize = 24;
const SPEC: &str = "hash:24:3";

fn accel(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accel"))
        .args(args)
        .env_remove("ACCEL_EMBED_CACHE")
        .env_remove("ACCEL_PROVIDER_URL")
        .env_remove("ACCEL_CHAT_URL")
        .env_remove("SOURCE_DATE_EPOCH")
        .output()
        .unwrap()
}

fn ok(o: &Output) -> Value {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(n: usize) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let corpus = generate(&HashProvider::new(DIM, 3), &SyntheticSpec { n_experiments: n, ..Default::default() }).unwrap();
        write_csv(&corpus.experiments, &root.join("train.csv")).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, name: &str) -> String {
        self.root.join(name).display().to_string()
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (train, bundle) = (self.path("train.csv"), self.path(out));
        let mut args = vec!["train", "--experiments", &train, "--bundle", &bundle, "--provider-url", SPEC, "--q", "24"];
        args.extend_from_slice(extra);
        accel(&args)
    }
}

fn write(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

#[test]
fn train_is_fast_and_byte_identical_on_rerun() {
    let fx = Fixture::new(15);
    let t = std::time::Instant::now();
    let report = ok(&fx.train("a.bundle", &["--seed", "11"]));
    assert!(t.elapsed().as_secs() < 10);
    assert_eq!(report["p"], DIM);
    assert_eq!(report["m"], 16);
    ok(&fx.train("b.bundle", &["--seed", "11"]));
    let a = std::fs::read(fx.path("a.bundle")).unwrap();
    let b = std::fs::read(fx.path("b.bundle")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn missing_lexicon_exits_2() {
    let fx = Fixture::new(6);
    let o = fx.train("x.bundle", &["--lexicon", "/definitely/not/here.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!Path::new(&fx.path("x.bundle")).exists());
}

#[test]
fn bad_flag_values_exit_2() {
    let fx = Fixture::new(6);
    assert_eq!(fx.train("x.bundle", &["--lambda", "lots"]).status.code(), Some(2));
    assert_eq!(fx.train("x.bundle", &["--q", "0"]).status.code(), Some(2));
    assert_eq!(accel(&["rank", "--bundle", &fx.path("missing.bundle"), "a", "b"]).status.code(), Some(2));
}

#[test]
fn empty_test_set_exits_2() {
    let fx = Fixture::new(8);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6"]));
    let empty = fx.root.join("empty.csv");
    write(&empty, "test_id,arm_id,text,impressions,clicks\n");
    let o = accel(&["eval", "--bundle", &fx.path("m.bundle"), "--test", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn rank_table_has_one_sorted_row_per_variant() {
    let fx = Fixture::new(8);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6"]));
    let o = accel(&["rank", "--bundle", &fx.path("m.bundle"), "--format", "table", "first", "second", "third"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 3);
    let ranks: Vec<f64> = rows.iter().map(|r| r.split_whitespace().next().unwrap().parse().unwrap()).collect();
    assert!(ranks.windows(2).all(|w| w[0] <= w[1]));

    let o = accel(&["rank", "--bundle", &fx.path("m.bundle"), "lonely"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn narrate_without_chat_warns_and_still_answers() {
    let fx = Fixture::new(8);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6"]));
    let req = fx.root.join("ins.json");
    write(
        &req,
        r#"{"arms":[{"id":"a","text":"Hurry, ends tonight","impressions":100,"clicks":9},
                    {"id":"b","text":"Our story","impressions":100,"clicks":3}]}"#,
    );
    let o = accel(&["insights", "--bundle", &fx.path("m.bundle"), "--input", req.to_str().unwrap(), "--narrate"]);
    let v = ok(&o);
    assert!(v["narration"].is_null());
    assert_eq!(v["contributions"].as_array().unwrap().len(), 16);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning: narration requested"));
}

#[test]
fn opportunities_command_honours_k_flag() {
    let fx = Fixture::new(8);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6"]));
    let req = fx.root.join("opp.json");
    write(&req, r#"{"variants":[{"id":"a","text":"Meet the founders"},{"id":"b","text":"Spring notes"}],"k":5}"#);
    let v = ok(&accel(&["opportunities", "--bundle", &fx.path("m.bundle"), "--input", req.to_str().unwrap(), "--k", "1"]));
    assert!(v["selected"].as_array().unwrap().len() <= 1);
    assert_eq!(v["attributes"].as_array().unwrap().len(), 16);
}

#[test]
fn eval_self_consistent_transfer_is_perfect() {
    let fx = Fixture::new(12);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6", "--fit-corpus", "training"]));
    let csv = fx.path("rho.csv");
    let v = ok(&accel(&["eval", "--bundle", &fx.path("m.bundle"), "--test", &fx.path("train.csv"), "--csv", &csv]));
    assert!((v["mean_rho"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(v["top1_accuracy"], 1.0);
    let lines = std::fs::read_to_string(csv).unwrap();
    assert_eq!(lines.lines().count(), 13);
}

#[test]
fn two_backend_loo_gives_two_rows() {
    let fx = Fixture::new(8);
    let o = accel(&[
        "eval",
        "--loo",
        &fx.path("train.csv"),
        "--backend",
        SPEC,
        "--backend",
        "hash:8:1",
        "--q",
        "8",
        "--format",
        "table",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains(SPEC) && text.contains("hash:8:1"));
}

#[test]
fn cli_output_equals_service_response() {
    let fx = Fixture::new(8);
    ok(&fx.train("m.bundle", &["--lambda", "1e-6"]));
    let req = fx.root.join("rank.json");
    write(&req, r#"{"variants":[{"id":"x","text":"Save now"},{"id":"y","text":"Read more"},{"id":"z","text":"Join free"}]}"#);
    let cli = ok(&accel(&["rank", "--bundle", &fx.path("m.bundle"), "--input", req.to_str().unwrap()]));

    let engine = accel_core::api::EngineConfig { bundle: fx.root.join("m.bundle"), ..Default::default() }
        .build()
        .unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let served: Value = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        tokio::spawn(accel_service::serve(listener, std::sync::Arc::new(engine)));
        let body: Value = serde_json::from_str(&std::fs::read_to_string(&req).unwrap()).unwrap();
        reqwest::Client::new()
            .post(format!("http://{addr}/rank"))
            .json(&body)
            .send()
            .await
            .unwrap()
            .json()
            .await
            .unwrap()
    });
    assert_eq!(cli, served);
}
