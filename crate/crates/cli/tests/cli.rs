use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use graph_hawkes::checkpoint::{Checkpoint, IntensitySource};
use graph_hawkes::config::ExperimentConfig;
use graph_hawkes::model::KernelModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_graph-hawkes"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const BASE: &str = r#"
seed = 11
horizon = 20.0
[graph]
ground_truth = "gt3_negative"
[model]
num_basis = 1
grid_density = 10.0
tau_max = 5.0
[train]
epochs = 1
batch_size = 8
[simulation]
num_sequences = 20
[evaluation]
generated_sequences = 10
"#;

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn manifest(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest written");
    serde_json::from_str(&text).unwrap()
}

fn simulate(dir: &Path, cfg: &Path) -> PathBuf {
    let out = dir.join("sim");
    let o = run(&["simulate", "--config", s(cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out.join("events.csv")
}

#[test]
fn simulate_writes_events_and_manifest() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let events = simulate(dir.path(), &cfg);
    let text = std::fs::read_to_string(&events).unwrap();
    assert!(text.starts_with("seq_id,t,v\n"));
    let m = manifest(&dir.path().join("sim"));
    assert_eq!(m["seed"], 11);
    assert_eq!(m["details"]["kind"], "gt3_negative");
    assert_eq!(m["details"]["num_sequences"], 20);
    assert_eq!(m["config"]["horizon"], 20.0);
    assert_eq!(m["details"]["num_events"].as_u64().unwrap() as usize, text.lines().count() - 1);
}

#[test]
fn simulate_is_reproducible_and_seed_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let read = |sub: &str, seed: &str| {
        let out = dir.path().join(sub);
        let o = run(&["simulate", "--config", s(&cfg), "--out", s(&out), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(out.join("events.csv")).unwrap()
    };
    let a = read("a", "3");
    assert_eq!(a, read("b", "3"));
    assert_ne!(a, read("c", "4"));
}

#[test]
fn zero_sequences_give_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &BASE.replace("num_sequences = 20", "num_sequences = 0"));
    let events = simulate(dir.path(), &cfg);
    assert_eq!(std::fs::read_to_string(events).unwrap(), "seq_id,t,v\n");
}

#[test]
fn missing_graph_file_is_named() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "[graph]\nedge_list = \"absent_graph.txt\"\n");
    let o = run(&["train", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("absent_graph.txt"), "{}", stderr(&o));
}

#[test]
fn bad_config_field_is_a_validation_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &format!("{BASE}\n[data]\ntest_fraction = 1.5\n"));
    let o = run(&["simulate", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("data.test_fraction"), "{}", stderr(&o));
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg_path = write_config(dir.path(), &BASE.replace("epochs = 1", "epochs = 0"));
    let events = simulate(dir.path(), &cfg_path);
    let out = dir.path().join("train");
    let o = run(&["train", "--config", s(&cfg_path), "--data", s(&events), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let cfg = ExperimentConfig::load(&cfg_path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = KernelModel::new(&cfg.load_graph().unwrap(), &cfg.model, cfg.horizon, &mut rng).unwrap();
    let ck = Checkpoint::load(out.join("checkpoint.json")).unwrap();
    let IntensitySource::Learned { state } = ck.source else {
        panic!("expected a learned checkpoint");
    };
    let trained = KernelModel::from_state(state).unwrap();
    let (a, b) = (init.params(), trained.params());
    assert_eq!(a.len(), b.len());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(std::fs::read_to_string(out.join("train_log.ndjson")).unwrap(), "");
}

#[test]
fn train_then_evaluate_and_export() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let events = simulate(dir.path(), &cfg);
    let tr = dir.path().join("train");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&events), "--out", s(&tr)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["checkpoint.json", "train_log.ndjson", "test.csv", "manifest.json"] {
        assert!(tr.join(f).exists(), "{f}");
    }
    let first: Value = serde_json::from_str(
        std::fs::read_to_string(tr.join("train_log.ndjson")).unwrap().lines().next().unwrap(),
    )
    .unwrap();
    for key in ["epoch", "step", "data_term", "integral_term", "barrier_term", "w", "b", "min_grid_intensity", "grad_norm"] {
        assert!(first.get(key).is_some(), "log misses {key}");
    }
    let m = manifest(&tr);
    let ids = |k: &str| m["details"][k].as_array().unwrap().len();
    assert_eq!(ids("train_ids") + ids("validation_ids") + ids("test_ids"), 20);

    let ev = dir.path().join("eval");
    let ck = tr.join("checkpoint.json");
    let o = run(&["evaluate", "--checkpoint", s(&ck), "--data", s(&tr.join("test.csv")), "--out", s(&ev)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout).into_owned();
    let order: Vec<usize> = ["test_ll_per_event", "time_mae", "count_mae", "type_kld"]
        .iter()
        .map(|k| table.find(k).expect(k))
        .collect();
    assert!(order.windows(2).all(|w| w[0] < w[1]));
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["num_generated_sequences"], 10);
    assert!(metrics["test_ll_per_event"].as_f64().unwrap().is_finite());
    assert!(ev.join("manifest.json").exists());

    let kx = dir.path().join("kernel");
    let o = run(&["export-kernel", "--checkpoint", s(&ck), "--lags", "0,0.5,1", "--out", s(&kx)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csvs: Vec<_> = std::fs::read_dir(&kx)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "csv"))
        .collect();
    assert_eq!(csvs.len(), 3);
    for e in csvs {
        let text = std::fs::read_to_string(e.path()).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().all(|l| l.split(',').count() == 3));
    }

    let neg = dir.path().join("neg");
    let o = run(&["export-kernel", "--checkpoint", s(&ck), "--lags", "0.5,-1", "--out", s(&neg)]);
    assert_eq!(code(&o), 1);
    assert!(!neg.exists());

    let empty = dir.path().join("empty");
    let o = run(&["export-kernel", "--checkpoint", s(&ck), "--lags", "", "--out", s(&empty)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = std::fs::read_dir(&empty).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(files, vec![std::ffi::OsString::from("manifest.json")]);
}

#[test]
fn malformed_csv_line_is_reported() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "seq_id,t,v\n0,0.5,1\n0,zero,2\n1,0.3,0\n").unwrap();
    let o = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(dir.path())]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn evaluate_rejects_mismatched_node_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let events = simulate(dir.path(), &cfg);
    let tr = dir.path().join("train");
    let o = run(&["train", "--config", s(&cfg), "--data", s(&events), "--out", s(&tr)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = dir.path().join("wide.csv");
    std::fs::write(&data, "seq_id,t,v\n0,0.5,1\n0,1.5,7\n").unwrap();
    let o = run(&[
        "evaluate",
        "--checkpoint",
        s(&tr.join("checkpoint.json")),
        "--data",
        s(&data),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_and_writes_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), BASE);
    let out = dir.path().join("gc");
    let o = run(&["gradcheck", "--config", s(&cfg), "--max-per-block", "8", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("gradcheck.json")).unwrap()).unwrap();
    assert!(!report["blocks"].as_array().unwrap().is_empty());
    assert_eq!(manifest(&out)["details"]["tolerance"], 1e-4);

    let o = run(&["gradcheck", "--config", s(&cfg), "--tolerance", "0", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["simulate"])), 1);
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--workers", "0", "simulate", "--config", "x.toml"])), 1);
}
