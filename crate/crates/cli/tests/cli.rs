use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use labelsynth::graph::{LabelGraph, TargetRule};

const TINY: &str = r#"{
  "data": {"n_inexact": 4, "n_target": 1, "input_dim": 8, "n_labeled": 40, "n_unlabeled": 60,
           "n_test": 60, "n_val": 30, "dependencies": [[0, 1]], "target_parents": [[0, 2]]},
  "gen": {"latent_dim": 2, "encoder_hidden": [8], "decoder_hidden": [8]},
  "classifier": {"extractor_hidden": [8], "feature_dim": 4, "gcn_hidden": [4]},
  "train": {"batch_size": 16, "pretrain_classifier_epochs": 1, "pretrain_autoencoder_epochs": 1, "joint_epochs": 3},
  "downstream": {"extractor_hidden": [8], "feature_dim": 4, "gcn_hidden": [4], "steps": 20, "batch_size": 16},
  "experiment": {"seeds": [0], "n_synthetic": 20, "ds_grid": [0, 20]}
}"#;

struct Ws {
    dir: tempfile::TempDir,
}

impl Ws {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.json"), TINY).unwrap();
        Ws { dir }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_labelsynth"))
            .current_dir(self.dir.path())
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn tiny(&self, args: &[&str]) -> String {
        let mut all = vec!["--config", "tiny.json"];
        all.extend_from_slice(args);
        self.ok(&all)
    }

    /// Data, graph and a trained checkpoint under the tiny config.
    fn pipeline(&self) {
        self.tiny(&["synth-data", "--out", "d"]);
        self.tiny(&["build-graph", "--data", "d", "--out", "g"]);
        self.tiny(&[
            "train",
            "--data",
            "d",
            "--graph",
            "g/graph.json",
            "--out",
            "m",
        ]);
    }
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    lines(p)
        .iter()
        .map(|l| l.split(',').map(String::from).collect())
        .collect()
}

fn manifest_outputs(dir: &Path) -> serde_json::Value {
    let m: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    m["outputs"].clone()
}

#[test]
fn synth_data_default_sizes() {
    let ws = Ws::new();
    ws.ok(&["synth-data", "--out", "d"]);
    assert_eq!(lines(&ws.path("d/d_l.jsonl")).len(), 500);
    assert_eq!(lines(&ws.path("d/d_u.jsonl")).len(), 3000);
    assert_eq!(lines(&ws.path("d/test.jsonl")).len(), 2000);
}

#[test]
fn synth_data_is_deterministic() {
    let ws = Ws::new();
    ws.tiny(&["synth-data", "--out", "a"]);
    ws.tiny(&["synth-data", "--out", "b"]);
    assert_eq!(
        manifest_outputs(&ws.path("a")),
        manifest_outputs(&ws.path("b"))
    );
    ws.tiny(&["--set", "seed=1", "synth-data", "--out", "c"]);
    assert_ne!(
        manifest_outputs(&ws.path("a")),
        manifest_outputs(&ws.path("c"))
    );
}

#[test]
fn empty_inexact_set_is_a_validation_error() {
    let ws = Ws::new();
    let out = ws.run(&[
        "--config",
        "tiny.json",
        "--set",
        "data.n_inexact=0",
        "synth-data",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("inexact"));
}

#[test]
fn bad_config_field_is_a_validation_error() {
    let ws = Ws::new();
    let out = ws.run(&["--set", "gen.nonsense=1", "synth-data"]);
    assert_eq!(out.status.code(), Some(2));
}

fn write_fixture(dir: &Path) {
    fs::create_dir_all(dir).unwrap();
    let meta = r#"{"space": {"inexact_classes": ["a", "b", "c"], "target_classes": ["t"]},
                   "relations": {"t": ["a", "c"]}}"#;
    fs::write(dir.join("meta.json"), meta).unwrap();
    let d_l = [
        r#"{"x": [0.0, 1.0], "y_s": [1, 1, 0]}"#,
        r#"{"x": [1.0, 0.0], "y_s": [1, 0, 0]}"#,
        r#"{"x": [1.0, 1.0], "y_s": [0, 1, 1]}"#,
        r#"{"x": [0.5, 0.5], "y_s": [1, 1, 1]}"#,
    ];
    fs::write(dir.join("d_l.jsonl"), d_l.join("\n") + "\n").unwrap();
    for s in ["d_u", "d_e", "test", "val"] {
        fs::write(dir.join(format!("{s}.jsonl")), "").unwrap();
    }
}

#[test]
fn build_graph_matches_hand_counts() {
    let ws = Ws::new();
    write_fixture(&ws.path("fx"));
    ws.ok(&["build-graph", "--data", "fx", "--out", "g"]);
    let g = LabelGraph::load(&ws.path("g/graph.json")).unwrap();
    // N = (3, 3, 2); M_ab = 2, M_ac = 1, M_bc = 2; A_ij = M_ij / N_j.
    let want = [
        [1.0, 2.0 / 3.0, 1.0 / 2.0],
        [2.0 / 3.0, 1.0, 2.0 / 2.0],
        [1.0 / 3.0, 2.0 / 3.0, 1.0],
    ];
    for (i, row) in want.iter().enumerate() {
        for (j, &w) in row.iter().enumerate() {
            assert_eq!(g.adjacency.get(i, j), w, "A[{i}][{j}]");
        }
    }
    let text = fs::read_to_string(ws.path("g/graph.json")).unwrap();
    let again = LabelGraph::from_json(&text).unwrap();
    assert_eq!(again.adjacency, g.adjacency);
    assert_eq!(again.to_json().unwrap(), text);
}

#[test]
fn build_graph_relations_file() {
    let ws = Ws::new();
    write_fixture(&ws.path("fx"));
    fs::write(ws.path("none.json"), "{}").unwrap();
    ws.ok(&[
        "build-graph",
        "--data",
        "fx",
        "--relations",
        "none.json",
        "--out",
        "g",
    ]);
    let g = LabelGraph::load(&ws.path("g/graph.json")).unwrap();
    assert!((0..4).all(|j| g.adjacency.get(3, j) == 0.0));

    fs::write(ws.path("bad.json"), r#"{"t": ["zebra"]}"#).unwrap();
    let out = ws.run(&[
        "build-graph",
        "--data",
        "fx",
        "--relations",
        "bad.json",
        "--out",
        "h",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("zebra"));
}

#[test]
fn train_writes_log_and_reproduces_checkpoint() {
    let ws = Ws::new();
    ws.pipeline();
    let rows = csv_rows(&ws.path("m/log.csv"));
    assert_eq!(rows[0][0], "epoch");
    assert_eq!(rows.len(), 1 + 3);
    for r in &rows[1..] {
        assert_eq!(r.len(), 8);
        assert!(r[1..].iter().all(|v| v.parse::<f64>().unwrap().is_finite()));
    }
    ws.tiny(&[
        "train",
        "--data",
        "d",
        "--graph",
        "g/graph.json",
        "--out",
        "m2",
    ]);
    assert_eq!(
        fs::read(ws.path("m/checkpoint.json")).unwrap(),
        fs::read(ws.path("m2/checkpoint.json")).unwrap()
    );
}

#[test]
fn train_names_missing_input() {
    let ws = Ws::new();
    let out = ws.run(&["train", "--data", "nowhere", "--graph", "g.json"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn generate_writes_labeled_lines() {
    let ws = Ws::new();
    ws.pipeline();
    let args = [
        "generate",
        "--checkpoint",
        "m/checkpoint.json",
        "--graph",
        "g/graph.json",
        "-n",
        "100",
    ];
    ws.tiny(&[&args[..], &["--out", "s"]].concat());
    let rows = lines(&ws.path("s/synthetic.jsonl"));
    assert_eq!(rows.len(), 100);
    let rule = TargetRule::from_graph(&LabelGraph::load(&ws.path("g/graph.json")).unwrap());
    for r in &rows {
        let v: serde_json::Value = serde_json::from_str(r).unwrap();
        let bits = |k: &str| -> Vec<u8> { serde_json::from_value(v[k].clone()).unwrap() };
        assert_eq!(bits("y_t"), rule.apply(&bits("y_s")));
    }
    ws.tiny(&[&args[..], &["--out", "s2"]].concat());
    assert_eq!(
        manifest_outputs(&ws.path("s")),
        manifest_outputs(&ws.path("s2"))
    );

    let out = ws.run(&[
        "generate",
        "--checkpoint",
        "m/checkpoint.json",
        "--graph",
        "g/graph.json",
        "-n",
        "0",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_without_synthetic_data_matches_baseline() {
    let ws = Ws::new();
    ws.tiny(&["synth-data", "--out", "d"]);
    ws.tiny(&["evaluate", "--data", "d", "--out", "e"]);
    let rows = csv_rows(&ws.path("e/evaluate.csv"));
    let plain = rows.iter().find(|r| r[0] == "plain").unwrap();
    let aug = rows.iter().find(|r| r[0] == "augmented").unwrap();
    assert_eq!(aug[2], "0");
    assert_eq!(plain[4..], aug[4..]);
}

#[test]
fn sweep_emits_one_row_per_value_and_seed() {
    let ws = Ws::new();
    ws.tiny(&["synth-data", "--out", "d"]);
    ws.tiny(&[
        "--set",
        "experiment.seeds=[0,1]",
        "sweep",
        "--data",
        "d",
        "--variable",
        "size_of_Ds",
        "--grid",
        "0,500,1000,2000",
        "--out",
        "w",
    ]);
    let rows = csv_rows(&ws.path("w/sweep.csv"));
    assert_eq!(rows.len() - 1, 4 * 2);
    for r in &rows[1..] {
        for v in &r[4..6] {
            let v: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
    let curve = lines(&ws.path("w/plots/full_size_of_Ds_map.txt"));
    assert_eq!(curve.len(), 4);
    assert!(curve[0].starts_with("0 "));
}

#[test]
fn ablate_reports_every_variant() {
    let ws = Ws::new();
    ws.tiny(&["synth-data", "--out", "d"]);
    ws.tiny(&["ablate", "--data", "d", "--out", "a"]);
    let rows = csv_rows(&ws.path("a/ablation.csv"));
    let variants: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(variants, ["full", "independent-head", "weighted-graph"]);
}
