use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use scotoma::dataset::{load_dataset, write_dataset_to, CsvSchema};
use scotoma::simlab::{generate, DgpConfig};
use scotoma::{fit_canonical, greedy_match, HyperParams};

fn scotoma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scotoma"))
        .args(args)
        .env_remove("SCOTOMA_THREADS")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TOY: &str = "\
id,group,pair_id,role,x1,x2,x3
c1,c,a,train,0.0,1.0,2.0
t1,t,a,train,0.1,1.5,2.0
c2,c,b,train,1.0,0.0,-1.0
t2,t,b,train,1.2,0.3,-1.4
";

#[test]
fn initial_fit_on_toy_file_gives_unit_beta() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let cfg = dir.path().join("fit.json");
    fs::write(&data, TOY).unwrap();
    fs::write(&cfg, r#"{"mode": "initial"}"#).unwrap();
    let out = dir.path().join("out");
    let o = scotoma(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let text = fs::read_to_string(out.join("beta.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("coordinate,weight"));
    let w: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(w.len(), 3);
    let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);

    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("diagnostics.json")).unwrap()).unwrap();
    assert_eq!(diag["mode"], "initial");
    assert!(diag["initial_degenerate"].is_boolean());
    assert_eq!(diag["iterations"], 0);
}

#[test]
fn tau2_outside_self_taught_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let cfg = dir.path().join("fit.json");
    fs::write(&data, TOY).unwrap();
    fs::write(&cfg, r#"{"mode": "canonical", "tau2": 2}"#).unwrap();
    let o = scotoma(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau2 requires self_taught"));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let cfg = dir.path().join("fit.json");
    fs::write(&data, TOY).unwrap();
    fs::write(&cfg, r#"{"lamda": 0.1}"#).unwrap();
    let o = scotoma(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_covariate_column_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.csv");
    let cfg = dir.path().join("fit.json");
    fs::write(&data, TOY).unwrap();
    fs::write(&cfg, r#"{"mode": "initial", "schema": {"covariates": ["x1", "x7"]}}"#).unwrap();
    let o = scotoma(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("x7"));
}

#[test]
fn bad_usage_and_unknown_protocol_exit_1() {
    assert_eq!(scotoma(&["fit"]).status.code(), Some(1));
    assert_eq!(scotoma(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.json");
    fs::write(&cfg, r#"{"protocol": "figure_9"}"#).unwrap();
    let o = scotoma(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
}

fn simulated_csv(dir: &Path) -> std::path::PathBuf {
    let g = generate(&DgpConfig {
        n_train_pairs: 24,
        n_unpaired: 10,
        n_test_pairs: 20,
        seed: 31,
        ..DgpConfig::default()
    })
    .unwrap();
    let path = dir.join("sim.csv");
    let mut buf = Vec::new();
    write_dataset_to(&g.dataset, &mut buf).unwrap();
    fs::write(&path, buf).unwrap();
    let mut truth = Vec::new();
    g.object_truth.write_csv(&mut truth).unwrap();
    fs::write(dir.join("truth.csv"), truth).unwrap();
    path
}

#[test]
fn fit_then_match_reproduces_in_process_result() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_csv(dir.path());
    let cfg = dir.path().join("fit.json");
    fs::write(&cfg, r#"{"mode": "canonical", "tau1": 3}"#).unwrap();
    let fit_out = dir.path().join("fit");
    let o = scotoma(&["fit", "--config", p(&cfg), "--data", p(&data), "--out", p(&fit_out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let match_out = dir.path().join("match");
    let o = scotoma(&[
        "match",
        "--beta",
        p(&fit_out.join("beta.csv")),
        "--data",
        p(&data),
        "--out",
        p(&match_out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let d = load_dataset(&data, &CsvSchema::default()).unwrap();
    let hp = HyperParams {
        tau1: Some(3),
        ..HyperParams::default()
    };
    let (beta, _) = fit_canonical(&d, &hp).unwrap();
    let m = greedy_match(&beta, d.object_control(), d.object_treatment(), None, None);
    let mut expected = Vec::new();
    m.write_csv(&mut expected).unwrap();
    assert_eq!(fs::read(match_out.join("matching.csv")).unwrap(), expected);
    assert_eq!(fs::read(fit_out.join("matching.csv")).unwrap(), expected);

    let saved: Vec<f64> = fs::read_to_string(fit_out.join("beta.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(saved, beta.as_slice());

    let o = scotoma(&[
        "evaluate",
        "--matching",
        p(&match_out.join("matching.csv")),
        "--truth",
        p(&dir.path().join("truth.csv")),
    ]);
    assert!(o.status.success());
    let acc: f64 = String::from_utf8_lossy(&o.stdout).trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn epsilon_threshold_controls_match_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulated_csv(dir.path());
    let beta = dir.path().join("beta.csv");
    let mut text = String::from("coordinate,weight\nx1,1\n");
    for k in 2..=12 {
        text.push_str(&format!("x{k},0\n"));
    }
    fs::write(&beta, text).unwrap();

    let tiny = dir.path().join("tiny");
    let o = scotoma(&["match", "--beta", p(&beta), "--data", p(&data), "--epsilon", "1e-300", "--out", p(&tiny)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read_to_string(tiny.join("matching.csv")).unwrap(),
        "control_id,treatment_id,score,rank\n"
    );

    let all = dir.path().join("all");
    let o = scotoma(&["match", "--beta", p(&beta), "--data", p(&data), "--out", p(&all)]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(all.join("matching.csv")).unwrap().lines().count(), 21);

    let o = scotoma(&["match", "--beta", p(&beta), "--data", p(&data), "--epsilon", "-1", "--out", p(&all)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn random_table_writes_four_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("rt.json");
    fs::write(&cfg, r#"{"protocol": "random_table", "n": [5, 10, 20, 50], "replicates": 100000}"#).unwrap();
    let out = dir.path().join("o");
    let o = scotoma(&["simulate", "--config", p(&cfg), "--out", p(&out), "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut rdr = csv::Reader::from_path(out.join("results.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 4);
    // P(no correct) = (1 - 1/n)^n
    for r in &rows {
        let n: f64 = r[0].parse().unwrap();
        let p0: f64 = r[4].parse().unwrap();
        assert!((p0 - (1.0 - 1.0 / n).powf(n)).abs() < 0.01, "n={n} p0={p0}");
    }
}

fn manifest_ok(dir: &Path) {
    use sha2::{Digest, Sha256};
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("diagnostics.json")).unwrap()).unwrap();
    let entries = diag["manifest"].as_array().unwrap();
    assert!(!entries.is_empty());
    for e in entries {
        let bytes = fs::read(dir.join(e["file"].as_str().unwrap())).unwrap();
        assert_eq!(e["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
}

#[test]
fn simulate_is_byte_identical_across_runs_and_threads() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("grid.json");
    fs::write(
        &cfg,
        r#"{"protocol": "linear_grid", "p": [12], "replicates": 8, "methods": ["scotoma", "euclidean", "rca"], "seed": 4}"#,
    )
    .unwrap();
    let run = |name: &str, threads: &str| {
        let out = dir.path().join(name);
        let o = scotoma(&["simulate", "--config", p(&cfg), "--out", p(&out), "--threads", threads]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        manifest_ok(&out);
        out
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "3");
    for f in ["results.csv", "summary.json", "diagnostics.json"] {
        let x = fs::read(a.join(f)).unwrap();
        assert_eq!(x, fs::read(b.join(f)).unwrap(), "{f}");
        assert_eq!(x, fs::read(c.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn every_protocol_runs_with_small_settings() {
    let dir = tempfile::tempdir().unwrap();
    let configs = [
        r#"{"protocol": "conjunctive_grid", "replicates": 3, "methods": ["scotoma"]}"#,
        r#"{"protocol": "experiment", "replicates": 3, "methods": ["euclidean", "mahalanobis", "propensity"]}"#,
        r#"{"protocol": "self_taught", "n_unpaired": [15], "replicates": 4}"#,
        r#"{"protocol": "interaction", "train_sizes": [15], "counts": [1, 2], "replicates": 3}"#,
        r#"{"protocol": "rate", "train_sizes": [25, 50], "replicates": 3, "master_factor": 4}"#,
    ];
    for (k, text) in configs.iter().enumerate() {
        let cfg = dir.path().join(format!("{k}.json"));
        fs::write(&cfg, text).unwrap();
        let out = dir.path().join(format!("o{k}"));
        let o = scotoma(&["simulate", "--config", p(&cfg), "--out", p(&out)]);
        assert!(o.status.success(), "{text}: {}", String::from_utf8_lossy(&o.stderr));
        manifest_ok(&out);
    }
}
