use std::path::Path;

use serde::{Deserialize, Serialize};

use scotoma::matcher::random_matching_stats;
use scotoma::simlab::{
    interaction_protocol, rate_protocol, run_experiment, self_taught_gain_protocol, DgpConfig, ExperimentSpec,
    ExpertModel, Method,
};
use scotoma::{HyperParams, Result, ScotomaError};

use crate::output::{read_config, OutDir};

#[derive(Debug, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum SimConfig {
    RandomTable(RandomTable),
    LinearGrid(Grid),
    ConjunctiveGrid(Grid),
    Experiment(ExperimentSpec),
    SelfTaught(SelfTaught),
    Interaction(InteractionGrid),
    Rate(Rate),
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomTable {
    pub n: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for RandomTable {
    fn default() -> Self {
        RandomTable {
            n: vec![5, 10, 20, 50],
            replicates: 100_000,
            seed: 0,
        }
    }
}

/// Cells are every `(p, b)` combination, with `round(pairs_per_covariate · p)` training pairs.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Grid {
    pub base: DgpConfig,
    pub p: Vec<usize>,
    pub b: Vec<f64>,
    pub pairs_per_covariate: f64,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed: u64,
    pub hyper: HyperParams,
}

impl Default for Grid {
    fn default() -> Self {
        Grid {
            base: DgpConfig::default(),
            p: vec![12],
            b: vec![0.5],
            pairs_per_covariate: 2.0,
            methods: vec![
                Method::Scotoma,
                Method::Euclidean,
                Method::Mahalanobis,
                Method::Propensity,
                Method::Rca,
            ],
            replicates: 100,
            seed: 0,
            hyper: HyperParams::default(),
        }
    }
}

impl Grid {
    fn spec(&self, expert: ExpertModel) -> Result<ExperimentSpec> {
        if !(self.pairs_per_covariate > 0.0) {
            return Err(ScotomaError::Config("pairs_per_covariate must be > 0".into()));
        }
        let mut cells = Vec::new();
        for &p in &self.p {
            for &b in &self.b {
                cells.push(DgpConfig {
                    p,
                    b,
                    n_train_pairs: (self.pairs_per_covariate * p as f64).round() as usize,
                    expert,
                    ..self.base.clone()
                });
            }
        }
        Ok(ExperimentSpec {
            cells,
            methods: self.methods.clone(),
            replicates: self.replicates,
            seed: self.seed,
            hyper: self.hyper.clone(),
        })
    }
}

/// One cell per entry of `n_unpaired`, all other settings from `base`.
#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelfTaught {
    pub base: DgpConfig,
    pub n_unpaired: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
    pub hyper: HyperParams,
}

impl Default for SelfTaught {
    fn default() -> Self {
        SelfTaught {
            base: DgpConfig {
                n_train_pairs: 15,
                ..DgpConfig::default()
            },
            n_unpaired: vec![15, 30, 45],
            replicates: 50,
            seed: 0,
            hyper: HyperParams {
                tau2: 2,
                delta0: 0.0,
                max_iters: 10,
                ..HyperParams::default()
            },
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionGrid {
    pub base: DgpConfig,
    pub train_sizes: Vec<usize>,
    pub counts: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for InteractionGrid {
    fn default() -> Self {
        InteractionGrid {
            base: DgpConfig::default(),
            train_sizes: vec![15, 24, 36],
            counts: vec![1, 2, 3, 5],
            replicates: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rate {
    pub base: DgpConfig,
    pub train_sizes: Vec<usize>,
    pub replicates: usize,
    pub master_factor: usize,
    pub seed: u64,
}

impl Default for Rate {
    fn default() -> Self {
        Rate {
            base: DgpConfig {
                p: 6,
                ..DgpConfig::default()
            },
            train_sizes: vec![25, 50, 100, 200, 400],
            replicates: 100,
            master_factor: 50,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct Diagnostics {
    command: &'static str,
    protocol: &'static str,
    seed: u64,
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(header)?;
    for r in rows {
        wtr.write_record(&r)?;
    }
    wtr.into_inner().map_err(|e| ScotomaError::Io(e.into_error()))
}

fn run_spec(dir: &mut OutDir, spec: &ExperimentSpec) -> Result<()> {
    let res = run_experiment(spec)?;
    dir.write_with("results.csv", |buf| res.write_csv(buf))?;
    dir.write_json(
        "summary.json",
        &serde_json::json!({ "cells": spec.cells, "summaries": res.summaries }),
    )
}

pub fn simulate(config: &Path, out: &Path, seed: Option<u64>) -> Result<()> {
    let mut cfg: SimConfig = read_config(config)?;
    let slot = match &mut cfg {
        SimConfig::RandomTable(c) => &mut c.seed,
        SimConfig::LinearGrid(c) | SimConfig::ConjunctiveGrid(c) => &mut c.seed,
        SimConfig::Experiment(c) => &mut c.seed,
        SimConfig::SelfTaught(c) => &mut c.seed,
        SimConfig::Interaction(c) => &mut c.seed,
        SimConfig::Rate(c) => &mut c.seed,
    };
    if let Some(s) = seed {
        *slot = s;
    }
    let seed = *slot;

    let mut dir = OutDir::create(out)?;
    let protocol = match &cfg {
        SimConfig::RandomTable(c) => {
            let stats = c
                .n
                .iter()
                .map(|&n| random_matching_stats(n, c.replicates, seed))
                .collect::<Result<Vec<_>>>()?;
            let rows = stats.iter().map(|s| {
                vec![
                    s.n_pairs.to_string(),
                    s.replicates.to_string(),
                    s.mean_accuracy.to_string(),
                    s.accuracy_se.to_string(),
                    s.prob_no_correct.to_string(),
                    s.no_correct_se.to_string(),
                ]
            });
            let bytes = csv_bytes(
                &["n_pairs", "replicates", "mean_accuracy", "accuracy_se", "prob_no_correct", "no_correct_se"],
                rows,
            )?;
            dir.write("results.csv", &bytes)?;
            dir.write_json("summary.json", &stats)?;
            "random_table"
        }
        SimConfig::LinearGrid(g) => {
            run_spec(&mut dir, &g.spec(ExpertModel::WeightedEuclidean)?)?;
            "linear_grid"
        }
        SimConfig::ConjunctiveGrid(g) => {
            run_spec(&mut dir, &g.spec(ExpertModel::Conjunctive)?)?;
            "conjunctive_grid"
        }
        SimConfig::Experiment(spec) => {
            run_spec(&mut dir, spec)?;
            "experiment"
        }
        SimConfig::SelfTaught(c) => {
            let mut rows = Vec::new();
            let mut summary = Vec::new();
            for (cell, &n) in c.n_unpaired.iter().enumerate() {
                let cfg = DgpConfig {
                    n_unpaired: n,
                    ..c.base.clone()
                };
                // one substream family per cell
                let res = self_taught_gain_protocol(&cfg, &c.hyper, c.replicates, seed.wrapping_add(cell as u64))?;
                for p in &res.points {
                    rows.push(vec![
                        cell.to_string(),
                        n.to_string(),
                        p.replicate.to_string(),
                        p.initial_accuracy.to_string(),
                        p.final_accuracy.to_string(),
                        p.gain.to_string(),
                    ]);
                }
                summary.push(serde_json::json!({
                    "cell": cell,
                    "n_unpaired": n,
                    "mean_gain": res.mean_gain,
                    "quadratic": res.quadratic,
                }));
            }
            let bytes = csv_bytes(
                &["cell", "n_unpaired", "replicate", "initial_accuracy", "final_accuracy", "gain"],
                rows,
            )?;
            dir.write("results.csv", &bytes)?;
            dir.write_json("summary.json", &summary)?;
            "self_taught"
        }
        SimConfig::Interaction(c) => {
            let cells = interaction_protocol(&c.base, &c.train_sizes, &c.counts, c.replicates, seed)?;
            let rows = cells.iter().map(|x| {
                vec![
                    x.n_train_pairs.to_string(),
                    x.n_interactions.to_string(),
                    x.mean_difference.to_string(),
                    x.replicates.to_string(),
                ]
            });
            let bytes = csv_bytes(&["n_train_pairs", "n_interactions", "mean_difference", "replicates"], rows)?;
            dir.write("results.csv", &bytes)?;
            dir.write_json("summary.json", &cells)?;
            "interaction"
        }
        SimConfig::Rate(c) => {
            let res = rate_protocol(&c.base, &c.train_sizes, c.replicates, c.master_factor, seed)?;
            let rows = res
                .train_sizes
                .iter()
                .zip(&res.mean_distance)
                .map(|(n, d)| vec![n.to_string(), d.to_string()]);
            let bytes = csv_bytes(&["n_train_pairs", "mean_distance"], rows)?;
            dir.write("results.csv", &bytes)?;
            dir.write_json("summary.json", &res)?;
            "rate"
        }
    };
    dir.finish(&Diagnostics {
        command: "simulate",
        protocol,
        seed,
    })
}
