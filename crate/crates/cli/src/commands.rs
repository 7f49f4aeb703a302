use std::collections::BTreeSet;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scotoma::dataset::{load_dataset, CsvSchema};
use scotoma::fit::{match_object_set, FitState, StopReason};
use scotoma::matcher::{greedy_match_with, GreedyOptions};
use scotoma::{
    fit_canonical, fit_initial, fit_self_taught, matching_accuracy, Epsilon, ExpertPairing, HyperParams, Matching,
    PairScorer, Result, ScotomaError, SemiDataset, WeightVector,
};

use crate::output::{read_config, OutDir};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Initial,
    #[default]
    Canonical,
    SelfTaught,
}

#[derive(Debug, Deserialize)]
pub struct FitConfig {
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub schema: CsvSchema,
    #[serde(flatten)]
    pub hyper: HyperParams,
}

const FIT_KEYS: &[&str] = &[
    "mode",
    "schema",
    "lambda",
    "tau1",
    "tau2",
    "delta0",
    "epsilon",
    "max_iters",
    "exclusion",
    "seed",
];

pub fn load_fit_config(path: &Path) -> Result<FitConfig> {
    let raw: serde_json::Value = read_config(path)?;
    if let Some(obj) = raw.as_object() {
        let unknown: Vec<&String> = obj.keys().filter(|k| !FIT_KEYS.contains(&k.as_str())).collect();
        if !unknown.is_empty() {
            return Err(ScotomaError::Config(format!("unknown config keys: {unknown:?}")));
        }
    }
    let cfg: FitConfig =
        serde_json::from_value(raw).map_err(|e| ScotomaError::Config(format!("{}: {e}", path.display())))?;
    if cfg.hyper.tau2 > 0 && cfg.mode != Mode::SelfTaught {
        return Err(ScotomaError::Config("tau2 requires self_taught mode".into()));
    }
    cfg.hyper.validate()?;
    Ok(cfg)
}

fn coordinate_names(schema: &CsvSchema, p: usize) -> Vec<String> {
    match &schema.covariates {
        Some(names) => names.clone(),
        None => (1..=p).map(|k| format!("x{k}")).collect(),
    }
}

fn write_beta(out: &mut OutDir, names: &[String], beta: &WeightVector) -> Result<()> {
    out.write_with("beta.csv", |buf| {
        let mut wtr = csv::Writer::from_writer(buf);
        wtr.write_record(["coordinate", "weight"])?;
        for (name, w) in names.iter().zip(beta.as_slice()) {
            wtr.write_record([name.clone(), w.to_string()])?;
        }
        wtr.flush()?;
        Ok(())
    })
}

pub fn read_beta(path: &Path) -> Result<(Vec<String>, WeightVector)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["coordinate", "weight"] {
        return Err(ScotomaError::Data(format!(
            "{}: expected header coordinate,weight",
            path.display()
        )));
    }
    let mut names = Vec::new();
    let mut weights = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        names.push(rec[0].to_string());
        let w: f64 = rec[1]
            .parse()
            .map_err(|_| ScotomaError::Data(format!("non-numeric weight {:?} for {}", &rec[1], &rec[0])))?;
        weights.push(w);
    }
    Ok((names, WeightVector::from_saved(weights)?))
}

fn write_matching(out: &mut OutDir, m: &Matching) -> Result<()> {
    out.write_with("matching.csv", |buf| m.write_csv(buf))?;
    out.write_with("unmatched.csv", |buf| m.write_unmatched_csv(buf))
}

/// Largest within-pair score of the expert pairs under `beta`.
fn expert_pair_epsilon(d: &SemiDataset, beta: &WeightVector) -> Option<f64> {
    d.paired()
        .iter()
        .map(|p| beta.pair_score(&p.control.x, &p.treatment.x))
        .reduce(f64::max)
}

fn greedy_object_matching(d: &SemiDataset, beta: &WeightVector, eps: Option<f64>) -> Matching {
    let oc: Vec<_> = d.object_control().iter().collect();
    let ot: Vec<_> = d.object_treatment().iter().collect();
    greedy_match_with(
        beta,
        &oc,
        &ot,
        &GreedyOptions {
            epsilon: eps,
            ..GreedyOptions::default()
        },
    )
}

#[derive(Serialize)]
struct FitDiagnostics<'a> {
    command: &'static str,
    mode: Mode,
    p: usize,
    expert_pairs: usize,
    training_pairs: usize,
    iterations: usize,
    stop_reason: Option<StopReason>,
    initial_eigenvalue: f64,
    initial_second_eigenvalue: Option<f64>,
    initial_degenerate: bool,
    initial_condition_number: f64,
    degenerate_updates: usize,
    lambda: Option<f64>,
    warnings: &'a [String],
    hyper: &'a HyperParams,
}

pub fn fit(config: &Path, data: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg = load_fit_config(config)?;
    if let Some(s) = seed {
        cfg.hyper.seed = s;
    }
    let d = load_dataset(data, &cfg.schema)?;
    let names = coordinate_names(&cfg.schema, d.p());
    let init = fit_initial(&d, &cfg.hyper)?;

    let state: Option<FitState> = match cfg.mode {
        Mode::Initial => None,
        Mode::Canonical => Some(fit_canonical(&d, &cfg.hyper)?.1),
        Mode::SelfTaught => Some(fit_self_taught(&d, &cfg.hyper)?.1),
    };
    let beta = state.as_ref().map_or(&init.beta, |s| &s.beta);

    let mut dir = OutDir::create(out)?;
    write_beta(&mut dir, &names, beta)?;
    dir.write_with("trajectory.csv", |buf| match &state {
        Some(s) => s.write_trajectory_csv(buf),
        None => {
            buf.extend_from_slice(b"iteration,delta_inf,added,excluded\n");
            Ok(())
        }
    })?;
    if d.dims().object_control + d.dims().object_treatment > 0 {
        let m = match &state {
            Some(s) => match_object_set(&d, s, cfg.hyper.epsilon),
            None => {
                let eps = match cfg.hyper.epsilon {
                    Epsilon::Auto => expert_pair_epsilon(&d, beta),
                    Epsilon::Value(v) => Some(v),
                    Epsilon::Unbounded => None,
                };
                greedy_object_matching(&d, beta, eps)
            }
        };
        write_matching(&mut dir, &m)?;
    }

    let no_warnings = Vec::new();
    dir.finish(&FitDiagnostics {
        command: "fit",
        mode: cfg.mode,
        p: d.p(),
        expert_pairs: d.paired().len(),
        training_pairs: state.as_ref().map_or(d.paired().len(), |s| s.ell_dot()),
        iterations: state.as_ref().map_or(0, |s| s.iteration),
        stop_reason: state.as_ref().map(|s| s.stop_reason),
        initial_eigenvalue: init.eigenvalue,
        initial_second_eigenvalue: init.second_eigenvalue,
        initial_degenerate: init.degenerate,
        initial_condition_number: init.condition_number,
        degenerate_updates: state.as_ref().map_or(0, |s| s.degenerate_updates),
        lambda: state.as_ref().map(|s| s.lambda),
        warnings: state.as_ref().map_or(&no_warnings, |s| &s.warnings),
        hyper: &cfg.hyper,
    })
}

#[derive(Serialize)]
struct MatchDiagnostics {
    command: &'static str,
    epsilon: Option<f64>,
    pairs: usize,
    unmatched_control: usize,
    unmatched_treatment: usize,
}

pub fn match_cmd(beta: &Path, data: &Path, epsilon: &str, schema: Option<&Path>, out: &Path) -> Result<()> {
    let eps = Epsilon::parse(epsilon).map_err(ScotomaError::Config)?;
    if let Epsilon::Value(v) = eps {
        if !(v > 0.0) {
            return Err(ScotomaError::Config(format!("epsilon must be > 0, got {v}")));
        }
    }
    let schema: CsvSchema = match schema {
        Some(p) => read_config(p)?,
        None => CsvSchema::default(),
    };
    let (_, beta) = read_beta(beta)?;
    let d = load_dataset(data, &schema)?;
    if beta.len() != d.p() {
        return Err(ScotomaError::DimensionMismatch {
            expected: d.p(),
            got: beta.len(),
        });
    }
    let eps = match eps {
        Epsilon::Auto => Some(expert_pair_epsilon(&d, &beta).ok_or_else(|| {
            ScotomaError::Config("epsilon auto needs expert pairs in the data file".into())
        })?),
        Epsilon::Value(v) => Some(v),
        Epsilon::Unbounded => None,
    };
    let m = greedy_object_matching(&d, &beta, eps);
    let mut dir = OutDir::create(out)?;
    write_matching(&mut dir, &m)?;
    dir.finish(&MatchDiagnostics {
        command: "match",
        epsilon: eps,
        pairs: m.len(),
        unmatched_control: m.unmatched_control.len(),
        unmatched_treatment: m.unmatched_treatment.len(),
    })
}

#[derive(Serialize)]
struct Evaluation {
    command: &'static str,
    accuracy: f64,
    truth_pairs: usize,
    predicted_pairs: usize,
    correct_pairs: usize,
}

pub fn evaluate(matching: &Path, truth: &Path, out: Option<&Path>) -> Result<()> {
    let m = Matching::read_csv(File::open(matching)?)?;
    let t = ExpertPairing::read_csv(File::open(truth)?)?;
    let accuracy = matching_accuracy(&m, &t)?;
    let truth_set: BTreeSet<(&str, &str)> = t.pairs.iter().map(|(c, t)| (c.as_str(), t.as_str())).collect();
    let correct = m
        .pairs
        .iter()
        .filter(|p| truth_set.contains(&(p.control_id.as_str(), p.treatment_id.as_str())))
        .count();
    let ev = Evaluation {
        command: "evaluate",
        accuracy,
        truth_pairs: t.pairs.len(),
        predicted_pairs: m.len(),
        correct_pairs: correct,
    };
    println!("accuracy {accuracy}");
    if let Some(dir) = out {
        let mut dir = OutDir::create(dir)?;
        dir.write_json("evaluation.json", &ev)?;
        dir.finish(&ev)?;
    }
    Ok(())
}
