use std::path::Path;
use std::process::{Command, Output};

fn nidiff(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nidiff"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("run nidiff")
}

const SMALL: &[&str] = &[
    "--set", "dataset.n_train=48",
    "--set", "dataset.n_test=12",
    "--set", "generate.n_samples=6",
    "--set", "generate.steps=4",
    "--set", "model.n_blocks=1",
    "--set", "model.embed_dim=8",
    "--set", "train.epochs=3",
    "--set", "train.batch_size=16",
];

fn small(out: &Path, verb: &[&str]) -> Output {
    let mut args = verb.to_vec();
    args.extend_from_slice(SMALL);
    nidiff(out, &args)
}

fn data_lines(path: &Path) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# config_sha256="), "{} lacks the provenance header", path.display());
    lines.map(str::to_string).collect()
}

#[test]
fn default_dataset_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = nidiff(dir.path(), &["dataset"]);
    assert!(out.status.success());
    let train = nidiff::channel::ChannelDataset::load(&dir.path().join("train.nidf")).unwrap();
    let test = nidiff::channel::ChannelDataset::load(&dir.path().join("test.nidf")).unwrap();
    assert_eq!((train.len(), test.len()), (4096, 1024));
    assert_eq!((train.n_antennas, train.n_subcarriers), (8, 16));
}

#[test]
fn train_then_generate_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(small(d, &["dataset"]).status.success());
    let out = small(d, &["train", "--set", "train.checkpoint_every=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(data_lines(&d.join("loss.csv")).len(), 1 + 3);
    assert_eq!(std::fs::read_dir(d.join("checkpoints")).unwrap().count(), 3);

    assert!(small(d, &["generate"]).status.success());
    let rows = data_lines(&d.join("trajectory.csv"));
    assert_eq!(rows[0], "step,tau_mean,nmse");
    assert_eq!(rows.len() - 1, 4 + 1);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("generate_summary.json")).unwrap()).unwrap();
    assert!(summary["config_sha256"].is_string());

    assert!(small(d, &["generate", "--compare"]).status.success());
    let rows = data_lines(&d.join("compare.csv"));
    // Four patterns, two initializations, NG + 1 steps each.
    assert_eq!(rows.len() - 1, 4 * 2 * 5);

    assert!(small(d, &["generate", "--sweep"]).status.success());
    let rows = data_lines(&d.join("sweep.csv"));
    assert_eq!(rows[0], "stepping,exp,salt,salt_rec,pilot,pilot_car");
    assert_eq!(rows.len() - 1, 10);
    assert!(rows[1..].iter().all(|r| r.split(',').count() == 6));

    let out = small(d, &["eval", "--set", "generate.eval_patterns=[\"white\",\"pilot\"]", "--set", "generate.eval_seeds=3"]);
    assert!(out.status.success());
    let rows = data_lines(&d.join("eval.csv"));
    assert_eq!(rows[0], "stepping,white_mean,white_std,pilot_mean,pilot_std");
    for row in &rows[1..] {
        let std: f64 = row.split(',').nth(2).unwrap().parse().unwrap();
        assert!(std > 0.0);
    }
}

#[test]
fn train_grid_has_twelve_rows() {
    let dir = tempfile::tempdir().unwrap();
    let out = small(dir.path(), &["train", "--grid", "--set", "train.epochs=1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rows = data_lines(&dir.path().join("grid_summary.csv"));
    assert_eq!(rows.len() - 1, 12);
    assert_eq!(std::fs::read_dir(dir.path().join("grid")).unwrap().count(), 12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(nidiff(d, &["train", "--set", "train.epoch=2"]).status.code(), Some(1));
    assert_eq!(nidiff(d, &["fly"]).status.code(), Some(1));
    assert_eq!(nidiff(d, &["generate"]).status.code(), Some(3));
    let cfg = d.join("bad.json");
    std::fs::write(&cfg, r#"{"model": {"depth": 3}}"#).unwrap();
    assert_eq!(nidiff(d, &["dataset", "--config", cfg.to_str().unwrap()]).status.code(), Some(1));
    let missing = d.join("missing.json");
    assert_eq!(nidiff(d, &["dataset", "--config", missing.to_str().unwrap()]).status.code(), Some(3));
    assert_eq!(nidiff(d, &["dataset", "--set", "dataset.train_path=\"/no/such.nidf\""]).status.code(), Some(3));
}

#[test]
fn checkpoint_shape_mismatch_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(small(d, &["train", "--set", "train.epochs=1"]).status.success());
    let out = small(d, &["generate", "--set", "dataset.n_antennas=4"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn oracle_passes_deterministic_runs_and_catches_sabotage() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let base = ["oracle", "--set", "oracle.generation.eps_values=[1.0]"];
    let out = nidiff(d, &base);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("oracle.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["passed"], serde_json::Value::Bool(true));

    let mut sabotaged = base.to_vec();
    sabotaged.extend(["--sabotage", "1", "--set", "oracle.generation.n_samples=2000"]);
    assert_eq!(nidiff(d, &sabotaged).status.code(), Some(2));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("oracle.json")).unwrap()).unwrap();
    let cases = report["report"]["generation"]["cases"].as_array().unwrap();
    assert!(cases.iter().all(|c| c["moment_pass"] == serde_json::Value::Bool(false)));
}

#[test]
fn oracle_zero_start_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = nidiff(
        dir.path(),
        &[
            "oracle",
            "--set", "oracle.forward.n_samples=2000",
            "--set", "oracle.generation.n_samples=2000",
            "--set", "oracle.generation.t0_patterns=[[0,0]]",
        ],
    );
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn dataset_reruns_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert!(small(d.path(), &["dataset", "--seed", "4"]).status.success());
    }
    for f in ["train.nidf", "test.nidf"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
    }
    let c = tempfile::tempdir().unwrap();
    assert!(small(c.path(), &["dataset", "--seed", "5"]).status.success());
    assert_ne!(std::fs::read(a.path().join("train.nidf")).unwrap(), std::fs::read(c.path().join("train.nidf")).unwrap());
}
