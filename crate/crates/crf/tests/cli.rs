use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crf::io::save_dataset;
use crf::model::load_model;
use crf_core::{Cluster, ClusteredDataset, ClusteredForest, CovariateShiftSpec, ForestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn crf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crf")).args(args).output().unwrap()
}

fn grouped(seed: u64, n_clusters: usize, constant: Option<f64>) -> ClusteredDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clusters = (0..n_clusters)
        .map(|i| {
            let shared: f64 = rng.random_range(-0.5..0.5);
            let x: Vec<f64> = (0..3 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = x
                .chunks(2)
                .map(|r| constant.unwrap_or(r[0] - r[1] + shared + rng.random_range(-0.2..0.2)))
                .collect();
            Cluster { id: format!("g{i}"), y, x }
        })
        .collect();
    ClusteredDataset::new(clusters, 2).unwrap()
}

struct Files {
    dir: tempfile::TempDir,
}

impl Files {
    fn new() -> Self {
        Files { dir: tempfile::tempdir().unwrap() }
    }
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn write_query(path: &Path) -> Vec<[f64; 2]> {
    let rows: Vec<[f64; 2]> = (0..25).map(|i| [i as f64 / 12.0 - 1.0, 0.3 - i as f64 / 30.0]).collect();
    let text: String = std::iter::once("x1,x2\n".to_string())
        .chain(rows.iter().map(|r| format!("{},{}\n", r[0], r[1])))
        .collect();
    std::fs::write(path, text).unwrap();
    rows
}

fn read_column(path: &Path, column: &str) -> Vec<f64> {
    let mut rdr = csv::Reader::from_path(path).unwrap();
    let idx = rdr.headers().unwrap().iter().position(|h| h == column).unwrap();
    rdr.records().map(|r| r.unwrap()[idx].parse().unwrap()).collect()
}

#[test]
fn saved_model_predicts_like_the_in_memory_forest() {
    let f = Files::new();
    let ds = grouped(1, 120, None);
    save_dataset(&f.path("d.csv"), &ds).unwrap();
    std::fs::write(f.path("c.json"), r#"{"s_I": 12, "k": 4, "B": 6, "R": 3, "alpha_split": 0.1}"#).unwrap();
    let out = crf(&[
        "train", "--data", &f.s("d.csv"), "--config", &f.s("c.json"), "--out", &f.s("m.json"), "--seed", "42",
        "--shift", "point:0.2,-0.1", "--dump-trees", &f.s("trees.json"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let cfg = ForestConfig { s_i: Some(12), k: 4, trees_per_bag: 6, bags: 3, alpha_split: 0.1, seed: 42, ..ForestConfig::default() };
    let memory = ClusteredForest::fit(&ds, &cfg, &CovariateShiftSpec::PointMass { x: vec![0.2, -0.1] }).unwrap();
    let loaded = load_model(&f.path("m.json")).unwrap();
    assert_eq!(loaded, memory);

    let rows = write_query(&f.path("q.csv"));
    let out = crf(&["predict", "--model", &f.s("m.json"), "--query", &f.s("q.csv"), "--out", &f.s("p.csv")]);
    assert!(out.status.success());
    let mu = read_column(&f.path("p.csv"), "mu_hat");
    assert_eq!(mu.len(), rows.len());
    for (r, m) in rows.iter().zip(&mu) {
        assert_eq!(m.to_bits(), memory.predict(r).unwrap().mu_hat.to_bits());
    }

    let out = crf(&["ci", "--model", &f.s("m.json"), "--query", &f.s("q.csv"), "--out", &f.s("i.csv")]);
    assert!(out.status.success());
    let lo = read_column(&f.path("i.csv"), "lo");
    let hi = read_column(&f.path("i.csv"), "hi");
    assert!(lo.iter().zip(&hi).zip(&mu).all(|((l, h), m)| l <= m && m <= h));

    let dump: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("trees.json")).unwrap()).unwrap();
    assert_eq!(dump["bags"].as_array().unwrap().len(), 3);
}

#[test]
fn thread_count_does_not_change_the_model() {
    let f = Files::new();
    save_dataset(&f.path("d.csv"), &grouped(2, 80, None)).unwrap();
    for t in ["1", "3"] {
        let out = crf(&[
            "train", "--data", &f.s("d.csv"), "--out", &f.s(&format!("m{t}.json")), "--seed", "5", "--B", "8",
            "--k", "3", "--threads", t,
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    assert_eq!(std::fs::read(f.path("m1.json")).unwrap(), std::fs::read(f.path("m3.json")).unwrap());
}

#[test]
fn constant_model_predicts_the_constant() {
    let f = Files::new();
    save_dataset(&f.path("d.csv"), &grouped(3, 60, Some(2.5))).unwrap();
    let out = crf(&["train", "--data", &f.s("d.csv"), "--out", &f.s("m.json"), "--seed", "1", "--B", "5", "--k", "3"]);
    assert!(out.status.success());
    write_query(&f.path("q.csv"));
    let out = crf(&["predict", "--model", &f.s("m.json"), "--query", &f.s("q.csv")]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut n = 0;
    for line in text.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap().parse::<f64>().unwrap(), 2.5);
        n += 1;
    }
    assert_eq!(n, 25);
}

#[test]
fn ci_without_little_bags_names_the_requirement() {
    let f = Files::new();
    save_dataset(&f.path("d.csv"), &grouped(4, 60, None)).unwrap();
    assert!(crf(&["train", "--data", &f.s("d.csv"), "--out", &f.s("m.json"), "--seed", "1", "--B", "4", "--k", "3"])
        .status
        .success());
    write_query(&f.path("q.csv"));
    let out = crf(&["ci", "--model", &f.s("m.json"), "--query", &f.s("q.csv")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("R >= 2"));
}

#[test]
fn exit_codes() {
    let f = Files::new();
    save_dataset(&f.path("d.csv"), &grouped(5, 30, None)).unwrap();
    // usage errors
    assert_eq!(crf(&["train", "--out", &f.s("m.json"), "--seed", "1"]).status.code(), Some(2));
    assert_eq!(crf(&["train", "--data", &f.s("d.csv"), "--out", &f.s("m.json")]).status.code(), Some(2));
    assert_eq!(crf(&["predict", "--model", "m.json", "--query", "q.csv", "--bogus"]).status.code(), Some(2));
    let conflict = crf(&[
        "train", "--data", &f.s("d.csv"), "--out", &f.s("m.json"), "--seed", "1", "--rho-strategy", "q_shift",
        "--rho-fixed", "0.3",
    ]);
    assert_eq!(conflict.status.code(), Some(2));
    // runtime errors
    assert_eq!(crf(&["train", "--data", &f.s("missing.csv"), "--out", &f.s("m.json"), "--seed", "1"]).status.code(), Some(1));
    std::fs::write(f.path("bad.csv"), "cluster_id,y,x1\na,1,nan\n").unwrap();
    let bad = crf(&["train", "--data", &f.s("bad.csv"), "--out", &f.s("m.json"), "--seed", "1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("row 2"));
    assert_eq!(crf(&["--help"]).status.code(), Some(0));
}

#[test]
fn bench_emits_three_rows() {
    let f = Files::new();
    let out = crf(&["bench", "--seed", "3", "--out", &f.s("b.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(read_column(&f.path("b.csv"), "n_obs"), vec![10_000.0, 20_000.0, 40_000.0]);
}

#[test]
fn simulate_writes_report_and_rows() {
    let f = Files::new();
    std::fs::write(f.path("c.json"), r#"{"n_clusters": 120, "k": 5, "rho_grid": 9}"#).unwrap();
    let out = crf(&["simulate", "--dgp", "theorem2", "--reps", "3", "--seed", "9", "--config", &f.s("c.json"), "--out", &f.s("r.json")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("r.json")).unwrap()).unwrap();
    assert_eq!(report["experiment"], "theorem2");
    assert_eq!(report["reps"], 3);
    assert_eq!(read_column(&f.path("r.reps.csv"), "rep").len(), 6);
    assert_eq!(crf(&["simulate", "--dgp", "nope", "--seed", "1", "--out", &f.s("x.json")]).status.code(), Some(2));
}
