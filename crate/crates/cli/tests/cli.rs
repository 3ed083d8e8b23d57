use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use maxentmil::mil::{self, DistanceKind, PipelineConfig};
use maxentmil::{
    solvers, CmenaConfig, FeatureGrid, IntegrationGrid, NewtonConfig, SufficientStats,
};
use maxentmil_cli::io::{self, ModelFile};
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_maxentmil"));
    c.env_remove("MAXENTMIL_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Six unlabeled 2-D bags and their ground truth.
fn synth(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("synth");
    let o = run(&[
        "synth",
        "--bags",
        "6",
        "--m",
        "8",
        "--rank",
        "2",
        "--n",
        "200",
        "--seed",
        "1",
        "--out",
        s(&dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn classification(tmp: &TempDir) -> PathBuf {
    let dir = tmp.path().join("cls");
    let o = run(&[
        "synth",
        "--kind",
        "classification",
        "--bags",
        "16",
        "--m",
        "8",
        "--n",
        "80",
        "--out",
        s(&dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir.join("bags.jsonl")
}

#[test]
fn every_output_directory_has_config_and_version() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let version = fs::read_to_string(dir.join("VERSION")).unwrap();
    assert_eq!(version, format!("maxentmil {}\n", maxentmil::VERSION));
    let cfg = read_json(&dir.join("config.json"));
    assert_eq!(cfg["seed"], 1);
    assert_eq!(cfg["synth"]["N"], 6);
    assert_eq!(cfg["synth"]["seed"], 1);
    assert!(dir.join("bags.jsonl").exists() && dir.join("truth.json").exists());
}

#[test]
fn empty_bag_is_rejected_by_name() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("bad.jsonl");
    fs::write(
        &data,
        "{\"bag_id\": \"ok\", \"instances\": [[0.1, 0.2]]}\n{\"bag_id\": \"hollow\", \"instances\": []}\n",
    )
    .unwrap();
    let o = run(&["fit", s(&data), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&o), 1);
    let err = stderr(&o);
    assert!(err.contains("hollow") && err.contains(":2"), "{err}");
}

#[test]
fn bad_flags_and_configs_exit_one() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&run(&["fit"])), 1);
    assert_eq!(code(&run(&["frobnicate", "--out", s(&out)])), 1);
    assert_eq!(
        code(&run(&["bench", "--out", s(&out), "--sizes", "10,x"])),
        1
    );
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, "{\"fit\": {\"lambda\": 3}}").unwrap();
    let o = run(&["bench", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lambda"), "{}", stderr(&o));
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn threads_come_from_the_environment() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("o");
    let o = bin()
        .args([
            "bench",
            "--sizes",
            "20",
            "--min-seconds",
            "0.0001",
            "--out",
            s(&out),
        ])
        .env("MAXENTMIL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_json(&out.join("config.json"))["threads"], 2);
    let o = bin()
        .args(["bench", "--sizes", "20", "--out", s(&out)])
        .env("MAXENTMIL_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
    let o = bin()
        .args([
            "bench",
            "--sizes",
            "20",
            "--min-seconds",
            "0.0001",
            "--threads",
            "3",
            "--out",
            s(&out),
        ])
        .env("MAXENTMIL_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(read_json(&out.join("config.json"))["threads"], 3);
}

#[test]
fn non_convergence_exits_two() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let cfg = tmp.path().join("cfg.json");
    fs::write(
        &cfg,
        "{\"fit\": {\"cmena\": {\"max_outer\": 1, \"max_inner\": 1}}}",
    )
    .unwrap();
    let out = tmp.path().join("fit");
    let o = run(&[
        "fit",
        s(&dir.join("bags.jsonl")),
        "--basis-from",
        s(&dir.join("truth.json")),
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stderr(&o).contains("warning:"));
    assert_eq!(read_json(&out.join("report.json"))["converged"], false);
}

#[test]
fn fit_reruns_are_identical_apart_from_wall_time() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let mut reports = Vec::new();
    let mut models = Vec::new();
    for k in 0..2 {
        let out = tmp.path().join(format!("fit{k}"));
        let o = run(&[
            "fit",
            s(&dir.join("bags.jsonl")),
            "--m",
            "8",
            "--seed",
            "4",
            "--out",
            s(&out),
        ]);
        assert_ne!(code(&o), 1, "{}", stderr(&o));
        let mut r = read_json(&out.join("report.json"));
        r.as_object_mut().unwrap().remove("wall_time");
        reports.push(r);
        models.push(fs::read(out.join("model.json")).unwrap());
        assert_eq!(
            fs::read(out.join("config.json")).unwrap(),
            fs::read(tmp.path().join("fit0/config.json")).unwrap()
        );
    }
    assert_eq!(reports[0], reports[1]);
    assert_eq!(models[0], models[1]);
}

#[test]
fn fitted_model_matches_in_process_fit() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let out = tmp.path().join("fit");
    let o = run(&[
        "fit",
        s(&dir.join("bags.jsonl")),
        "--basis-from",
        s(&dir.join("truth.json")),
        "--solver",
        "cmen",
        "--out",
        s(&out),
    ]);
    assert_ne!(code(&o), 1, "{}", stderr(&o));
    let saved: ModelFile = io::read_json(&out.join("model.json")).unwrap();
    let report = read_json(&out.join("report.json"));

    let truth: ModelFile = io::read_json(&dir.join("truth.json")).unwrap();
    let data = io::read_dataset(&dir.join("bags.jsonl")).unwrap();
    let grid = IntegrationGrid::build(&truth.domain, truth.grid).unwrap();
    let fg = FeatureGrid::new(&truth.basis, &grid).unwrap();
    let stats: Vec<SufficientStats> = data
        .bags
        .iter()
        .map(|b| {
            SufficientStats::from_instances(&b.instances, &truth.basis, b.bag_id.clone()).unwrap()
        })
        .collect();
    let (lambda, rep) = solvers::fit_cmen(
        &stats,
        &fg,
        &NewtonConfig::default(),
        &CmenaConfig::default(),
    )
    .unwrap();
    assert_eq!(saved.lambda, lambda);
    assert_eq!(
        report["rank_trace"].as_array().unwrap().last().unwrap(),
        rep.rank_trace.last().unwrap()
    );
    let (_, densities) = saved.densities().unwrap();
    assert_eq!(densities.len(), 6);
}

#[test]
fn kl_matrix_has_zero_diagonal() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let fit = tmp.path().join("fit");
    let o = run(&[
        "fit",
        s(&dir.join("bags.jsonl")),
        "--solver",
        "mde",
        "--m",
        "8",
        "--out",
        s(&fit),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = tmp.path().join("kl");
    let o = run(&[
        "kl-matrix",
        s(&fit.join("model.json")),
        "--gamma",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (ids, d) = io::read_matrix_csv(&out.join("kl_matrix.csv")).unwrap();
    assert_eq!(ids.len(), 6);
    for i in 0..6 {
        assert_eq!(d[(i, i)], 0.0);
        for j in 0..6 {
            assert_eq!(d[(i, j)], d[(j, i)]);
            if i != j {
                assert!(d[(i, j)] > 0.0);
            }
        }
    }
    let (_, k) = io::read_matrix_csv(&out.join("kernel.csv")).unwrap();
    assert!((k[(0, 1)] - (-0.5 * d[(0, 1)]).exp()).abs() < 1e-15);
}

#[test]
fn hausdorff_classification_matches_library() {
    let tmp = TempDir::new().unwrap();
    let bags = classification(&tmp);
    let out = tmp.path().join("cl");
    let o = run(&[
        "classify",
        s(&bags),
        "--distance",
        "hausdorff",
        "--folds",
        "4",
        "--k",
        "3",
        "--k-prime",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = io::read_dataset(&bags).unwrap();
    let mut cfg = PipelineConfig {
        distance: DistanceKind::Hausdorff,
        ..PipelineConfig::default()
    };
    cfg.knn.k = 3;
    cfg.knn.k_prime = 3;
    let res = mil::kfold_evaluate(&data, 4, &cfg, 0).unwrap();
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["accuracy"].as_f64().unwrap(), res.mean_accuracy);
    let lines: Vec<Value> = fs::read_to_string(out.join("predictions.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), res.predictions.len());
    for (l, p) in lines.iter().zip(&res.predictions) {
        assert_eq!(l["bag_id"], p.bag_id.as_str());
        assert_eq!(l["predicted"], p.predicted.as_str());
    }
}

#[test]
fn split_classification_writes_predictions_per_test_bag() {
    let tmp = TempDir::new().unwrap();
    let bags = classification(&tmp);
    let csv = tmp.path().join("test.csv");
    io::write_dataset(&csv, &io::read_dataset(&bags).unwrap()).unwrap();
    let out = tmp.path().join("split");
    let o = run(&[
        "classify",
        s(&bags),
        s(&csv),
        "--distance",
        "kl-mde",
        "--m",
        "8",
        "--gamma",
        "1",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = read_json(&out.join("summary.json"));
    assert_eq!(summary["mode"], "split");
    assert_eq!(summary["test_bags"], 16);
    let preds = fs::read_to_string(out.join("predictions.jsonl")).unwrap();
    assert_eq!(preds.lines().count(), 16);
    assert!(out.join("kernel.csv").exists() && out.join("train_distances.csv").exists());
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(p).unwrap();
    r.records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect()
}

const PHASE: [&str; 10] = [
    "--m-values",
    "6,8",
    "--t-values",
    "1,2",
    "--reps",
    "2",
    "--n",
    "120",
    "--bags",
    "5",
];

#[test]
fn phase_diagram_grids_align_and_resume() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("pd");
    let mut args = vec!["phase-diagram", "--solver", "both", "--out", s(&out)];
    args.extend(PHASE);
    let o = run(&args);
    assert_ne!(code(&o), 1, "{}", stderr(&o));
    let cmen = csv_rows(&out.join("phase_cmen.csv"));
    let rmde = csv_rows(&out.join("phase_rmde-continuation.csv"));
    assert_eq!(cmen.len(), 4);
    assert_eq!(rmde.len(), 4);
    for (a, b) in cmen.iter().zip(&rmde) {
        assert_eq!(a[..2], b[..2]);
        assert_eq!(a[4], b[4], "shared data gives a shared threshold");
        assert_eq!(a[5].split(';').count(), 2);
    }

    // a finished cell is read back instead of recomputed
    let cell = out.join("cells/cmen/m6_T1.json");
    let mut v = read_json(&cell);
    v["cell"]["recovery_probability"] = Value::from(0.25);
    fs::write(&cell, serde_json::to_string(&v).unwrap()).unwrap();
    let o = run(&args);
    assert_ne!(code(&o), 1);
    assert_eq!(csv_rows(&out.join("phase_cmen.csv"))[0][3], "0.25");

    // a cell computed under other settings is not
    let mut changed = args.clone();
    let reps = changed.iter().position(|a| *a == "--reps").unwrap();
    changed[reps + 1] = "3";
    let o = run(&changed);
    assert_ne!(code(&o), 1);
    let rows = csv_rows(&out.join("phase_cmen.csv"));
    assert_eq!(rows[0][5].split(';').count(), 3);
}

#[test]
fn synth_fit_bound_check_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let start = Instant::now();
    let dir = tmp.path().join("synth");
    let o = run(&[
        "synth",
        "--bags",
        "10",
        "--m",
        "10",
        "--rank",
        "2",
        "--n",
        "500",
        "--out",
        s(&dir),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fit = tmp.path().join("fit");
    let o = run(&[
        "fit",
        s(&dir.join("bags.jsonl")),
        "--basis-from",
        s(&dir.join("truth.json")),
        "--out",
        s(&fit),
    ]);
    assert_ne!(code(&o), 1, "{}", stderr(&o));
    assert_eq!(read_json(&fit.join("model.json"))["solver"], "cmen");
    let bc = tmp.path().join("bc");
    let o = run(&["bound-check", "--trials", "60", "--out", s(&bc)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = csv_rows(&bc.join("bound_check.csv"));
    assert_eq!(rows.len(), 2);
    for r in rows {
        let exceed: f64 = r[2].parse().unwrap();
        let limit: f64 = r[3].parse().unwrap();
        assert!(exceed <= limit + 0.05);
    }
    assert!(start.elapsed().as_secs() < 300);
}

#[test]
fn csv_and_jsonl_inputs_fit_alike() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(&tmp);
    let csv = tmp.path().join("bags.csv");
    io::write_dataset(&csv, &io::read_dataset(&dir.join("bags.jsonl")).unwrap()).unwrap();
    let mut models = Vec::new();
    for (k, input) in [dir.join("bags.jsonl"), csv].iter().enumerate() {
        let out = tmp.path().join(format!("f{k}"));
        let o = run(&[
            "fit",
            s(input),
            "--solver",
            "mde",
            "--m",
            "8",
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        models.push(fs::read(out.join("model.json")).unwrap());
    }
    assert_eq!(models[0], models[1]);
}
