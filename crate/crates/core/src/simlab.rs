//! Synthetic data with an expert oracle, the experiment runner, and the evaluation
//! protocols built on them (interaction weights, self-taught gain, estimation rate).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{mahalanobis_scorer, rca_scorer, Euclidean};
use crate::dataset::{ExpertPair, Group, Observation, SemiDataset};
use crate::eigen::subspace_dist;
use crate::error::{Result, ScotomaError};
use crate::fit::{fit_canonical, fit_initial, fit_self_taught, match_object_set};
use crate::matcher::{greedy_match, greedy_on_table, matching_accuracy, ExpertPairing, GreedyOptions, PairScorer};
use crate::params::HyperParams;
use crate::rng::{cell_stream, stream_rng};
use crate::score::WeightVector;

const MAX_SESSION_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertModel {
    /// Pairs by the squared difference of the expert's linear score.
    #[default]
    WeightedEuclidean,
    /// As `WeightedEuclidean`, but a pair is infeasible unless both principal
    /// coordinates differ by less than `c`.
    Conjunctive,
}

/// Product term `weight · x[principal] · x[noise]` in the expert's score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub principal: usize,
    pub noise: usize,
    pub weight: f64,
}

/// Either an explicit interaction list or a count drawn at random per replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Interactions {
    Count(usize),
    List(Vec<Interaction>),
}

impl Default for Interactions {
    fn default() -> Self {
        Interactions::Count(0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub p: usize,
    pub n_train_pairs: usize,
    /// Expert pairs whose pairing is hidden, forming the unpaired pools.
    pub n_unpaired: usize,
    pub n_test_pairs: usize,
    /// Shift of treatment coordinate 0.
    pub b: f64,
    pub sigma2: f64,
    pub expert: ExpertModel,
    /// Drawn at random per replicate when absent.
    pub principal_idx: Option<[usize; 2]>,
    pub w_principal: f64,
    pub w_noise: f64,
    pub c: f64,
    /// Equicorrelation between coordinates.
    pub rho: Option<f64>,
    pub interactions: Interactions,
    /// Weight of randomly drawn interactions.
    pub interaction_weight: f64,
    /// Candidates drawn per group are `ceil(pool_factor · m)` for a session of `m` pairs.
    pub pool_factor: f64,
    /// Largest number of expert pairs taken from one session.
    pub session_pairs: Option<usize>,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        DgpConfig {
            p: 12,
            n_train_pairs: 24,
            n_unpaired: 0,
            n_test_pairs: 20,
            b: 0.5,
            sigma2: 0.25,
            expert: ExpertModel::WeightedEuclidean,
            principal_idx: None,
            w_principal: 0.9,
            w_noise: 0.05,
            c: 1.5,
            rho: None,
            interactions: Interactions::Count(0),
            interaction_weight: 0.2,
            pool_factor: 2.0,
            session_pairs: None,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScotomaError::Config(m));
        if self.p < 2 {
            return bad(format!("p must be at least 2, got {}", self.p));
        }
        if let Some([a, b]) = self.principal_idx {
            if a == b || a >= self.p || b >= self.p {
                return bad(format!("principal indices must be distinct and < p, got [{a}, {b}]"));
            }
        }
        if !(self.w_principal > 0.0) || !(self.w_noise >= 0.0) {
            return bad("expert weights must be positive".into());
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad(format!("sigma2 must be positive, got {}", self.sigma2));
        }
        if !self.b.is_finite() {
            return bad("b must be finite".into());
        }
        if let Some(r) = self.rho {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("rho must lie in [0, 1), got {r}"));
            }
        }
        if self.expert == ExpertModel::Conjunctive && !(self.c > 0.0) {
            return bad(format!("conjunctive threshold c must be positive, got {}", self.c));
        }
        if !(self.pool_factor >= 1.0 && self.pool_factor.is_finite()) {
            return bad(format!("pool_factor must be >= 1, got {}", self.pool_factor));
        }
        if self.session_pairs == Some(0) {
            return bad("session_pairs must be at least 1".into());
        }
        match &self.interactions {
            Interactions::Count(k) if *k > self.p - 2 => {
                return bad(format!("{k} interactions but only {} noise coordinates", self.p - 2))
            }
            Interactions::List(list) => {
                for it in list {
                    if it.principal >= self.p || it.noise >= self.p || it.principal == it.noise {
                        return bad(format!("invalid interaction {it:?}"));
                    }
                    if let Some(pi) = self.principal_idx {
                        if !pi.contains(&it.principal) || pi.contains(&it.noise) {
                            return bad(format!("interaction {it:?} must join a principal and a noise coordinate"));
                        }
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// The expert's view of one replicate: linear weights plus product terms.
#[derive(Debug, Clone)]
struct Expert {
    w: Vec<f64>,
    principal: [usize; 2],
    interactions: Vec<Interaction>,
    conjunctive: Option<f64>,
}

impl Expert {
    fn project(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.w.iter().zip(x).map(|(w, v)| w * v).sum();
        lin + self
            .interactions
            .iter()
            .map(|it| it.weight * x[it.principal] * x[it.noise])
            .sum::<f64>()
    }

    fn feasible(&self, c: &[f64], t: &[f64]) -> bool {
        match self.conjunctive {
            None => true,
            Some(th) => self.principal.iter().all(|&k| (c[k] - t[k]).abs() < th),
        }
    }
}

/// One simulated replicate.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: SemiDataset,
    /// Expert pairing of the object set.
    pub object_truth: ExpertPairing,
    /// Hidden expert pairing of the unpaired pools.
    pub unpaired_truth: ExpertPairing,
    /// Normalized expert weights; only defined for the linear expert without interactions.
    pub true_beta: Option<WeightVector>,
    pub principal_idx: [usize; 2],
    pub interactions: Vec<Interaction>,
}

/// Draws a replicate from the stream of `cfg.seed`.
pub fn generate(cfg: &DgpConfig) -> Result<Generated> {
    generate_with(cfg, &mut stream_rng(cfg.seed, 0))
}

pub fn generate_with(cfg: &DgpConfig, rng: &mut ChaCha8Rng) -> Result<Generated> {
    cfg.validate()?;
    let p = cfg.p;
    let principal = match cfg.principal_idx {
        Some(pi) => pi,
        None => {
            let picked: Vec<usize> = rand::seq::index::sample(rng, p, 2).into_iter().collect();
            [picked[0], picked[1]]
        }
    };
    let interactions = match &cfg.interactions {
        Interactions::List(list) => list.clone(),
        Interactions::Count(k) => {
            let noise: Vec<usize> = (0..p).filter(|j| !principal.contains(j)).collect();
            let chosen: Vec<usize> = noise.choose_multiple(rng, *k).copied().collect();
            chosen
                .into_iter()
                .map(|j| Interaction {
                    principal: principal[rng.random_range(0..2)],
                    noise: j,
                    weight: cfg.interaction_weight,
                })
                .collect()
        }
    };
    let mut w = vec![cfg.w_noise; p];
    for &k in &principal {
        w[k] = cfg.w_principal;
    }
    let expert = Expert {
        w: w.clone(),
        principal,
        interactions: interactions.clone(),
        conjunctive: (cfg.expert == ExpertModel::Conjunctive).then_some(cfg.c),
    };

    let rho = cfg.rho.unwrap_or(0.0);
    let cov = DMatrix::from_fn(p, p, |i, j| cfg.sigma2 * if i == j { 1.0 } else { rho });
    let chol = Cholesky::new(cov)
        .ok_or_else(|| ScotomaError::Config("covariance is not positive definite".into()))?
        .l();
    let mu: f64 = rng.random_range(0.0..5.0);
    let sampler = Sampler {
        chol: &chol,
        mu,
        b: cfg.b,
    };

    let block = |m: usize, rng: &mut ChaCha8Rng| -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let size = cfg.session_pairs.unwrap_or(m.max(1));
        let mut out = Vec::with_capacity(m);
        while out.len() < m {
            let take = size.min(m - out.len());
            out.extend(expert_session(&sampler, &expert, take, cfg.pool_factor, rng)?);
        }
        Ok(out)
    };
    let train = block(cfg.n_train_pairs, rng)?;
    let unpaired = block(cfg.n_unpaired, rng)?;
    let test = block(cfg.n_test_pairs, rng)?;

    let paired: Vec<ExpertPair> = train
        .into_iter()
        .enumerate()
        .map(|(k, (c, t))| ExpertPair {
            pair_id: format!("P{k}"),
            control: Observation::control(format!("pc{k}"), c),
            treatment: Observation::treatment(format!("pt{k}"), t),
        })
        .collect();
    let (uc, ut, unpaired_truth) = hide_pairs(unpaired, "u", rng);
    let (oc, ot, object_truth) = hide_pairs(test, "o", rng);
    let dataset = SemiDataset::new(paired, uc, ut, oc, ot)?;

    let true_beta = (cfg.expert == ExpertModel::WeightedEuclidean && interactions.is_empty())
        .then(|| WeightVector::new(w))
        .transpose()?;
    Ok(Generated {
        dataset,
        object_truth,
        unpaired_truth,
        true_beta,
        principal_idx: principal,
        interactions,
    })
}

struct Sampler<'a> {
    chol: &'a DMatrix<f64>,
    mu: f64,
    b: f64,
}

impl Sampler<'_> {
    fn draw(&self, group: Group, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let p = self.chol.nrows();
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut x: Vec<f64> = (self.chol * z).iter().map(|v| v + self.mu).collect();
        if group == Group::Treatment {
            x[0] += self.b;
        }
        x
    }
}

/// Draws an oversampled pool and keeps the expert's first `m` greedy pairs.
fn expert_session(
    sampler: &Sampler,
    expert: &Expert,
    m: usize,
    pool_factor: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    if m == 0 {
        return Ok(Vec::new());
    }
    let n = (pool_factor * m as f64).ceil() as usize;
    for _ in 0..MAX_SESSION_ATTEMPTS {
        let controls: Vec<Vec<f64>> = (0..n).map(|_| sampler.draw(Group::Control, rng)).collect();
        let treatments: Vec<Vec<f64>> = (0..n).map(|_| sampler.draw(Group::Treatment, rng)).collect();
        let hc: Vec<f64> = controls.iter().map(|x| expert.project(x)).collect();
        let ht: Vec<f64> = treatments.iter().map(|x| expert.project(x)).collect();
        let pairs = if expert.conjunctive.is_none() {
            greedy_1d(&hc, &ht, m)
        } else {
            let mut table = Vec::with_capacity(n * n);
            for (i, c) in controls.iter().enumerate() {
                for (j, t) in treatments.iter().enumerate() {
                    let s = if expert.feasible(c, t) { (hc[i] - ht[j]).powi(2) } else { f64::INFINITY };
                    table.push(s);
                }
            }
            let opts = GreedyOptions {
                max_pairs: Some(m),
                ..GreedyOptions::default()
            };
            greedy_on_table(&table, n, n, &opts).into_iter().map(|(i, j, _)| (i, j)).collect()
        };
        if pairs.len() == m {
            return Ok(pairs.into_iter().map(|(i, j)| (controls[i].clone(), treatments[j].clone())).collect());
        }
    }
    Err(ScotomaError::Numerical(format!(
        "expert found fewer than {m} feasible pairs in {MAX_SESSION_ATTEMPTS} attempts"
    )))
}

#[derive(PartialEq)]
struct Gap(f64, usize, usize);

impl Eq for Gap {}

impl PartialOrd for Gap {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Gap {
    // min-heap on the gap, then on the sorted positions
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| (other.1, other.2).cmp(&(self.1, self.2)))
    }
}

/// Sequential-minimum matching on scalar projections, first `limit` pairs.
///
/// The closest remaining control/treatment pair is always adjacent in sorted order, so a
/// heap over adjacent gaps reproduces the quadratic scan in `O(n log n)`.
fn greedy_1d(a: &[f64], b: &[f64], limit: usize) -> Vec<(usize, usize)> {
    let vals: Vec<(f64, bool, usize)> = a
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, false, i))
        .chain(b.iter().enumerate().map(|(j, &v)| (v, true, j)))
        .collect();
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&x, &y| vals[x].0.total_cmp(&vals[y].0).then(x.cmp(&y)));
    let n = order.len();
    let mut prev: Vec<Option<usize>> = (0..n).map(|k| k.checked_sub(1)).collect();
    let mut next: Vec<Option<usize>> = (0..n).map(|k| (k + 1 < n).then_some(k + 1)).collect();
    let mut alive = vec![true; n];
    let at = |k: usize| vals[order[k]];

    let mut heap = BinaryHeap::new();
    for k in 0..n.saturating_sub(1) {
        if at(k).1 != at(k + 1).1 {
            heap.push(Gap(at(k + 1).0 - at(k).0, k, k + 1));
        }
    }
    let mut out = Vec::new();
    while let Some(Gap(_, k1, k2)) = heap.pop() {
        if out.len() == limit {
            break;
        }
        if !(alive[k1] && alive[k2] && next[k1] == Some(k2)) {
            continue;
        }
        let (u, v) = (at(k1), at(k2));
        out.push(if v.1 { (u.2, v.2) } else { (v.2, u.2) });
        alive[k1] = false;
        alive[k2] = false;
        let (l, r) = (prev[k1], next[k2]);
        if let Some(l) = l {
            next[l] = r;
        }
        if let Some(r) = r {
            prev[r] = l;
        }
        if let (Some(l), Some(r)) = (l, r) {
            if at(l).1 != at(r).1 {
                heap.push(Gap(at(r).0 - at(l).0, l, r));
            }
        }
    }
    out
}

/// Splits pairs into control and treatment lists with shuffled treatment order.
fn hide_pairs(
    pairs: Vec<(Vec<f64>, Vec<f64>)>,
    tag: &str,
    rng: &mut ChaCha8Rng,
) -> (Vec<Observation>, Vec<Observation>, ExpertPairing) {
    let mut controls = Vec::with_capacity(pairs.len());
    let mut treatments = Vec::with_capacity(pairs.len());
    let mut truth = Vec::with_capacity(pairs.len());
    for (k, (c, t)) in pairs.into_iter().enumerate() {
        let (cid, tid) = (format!("{tag}c{k}"), format!("{tag}t{k}"));
        truth.push((cid.clone(), tid.clone()));
        controls.push(Observation::control(cid, c));
        treatments.push(Observation::treatment(tid, t));
    }
    treatments.shuffle(rng);
    (controls, treatments, ExpertPairing::new(truth))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Canonical fit, then greedy matching of the object set.
    Scotoma,
    ScotomaSelfTaught,
    Euclidean,
    Mahalanobis,
    Propensity,
    Rca,
    /// Matching under the expert's own normalized weights.
    TrueBeta,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Scotoma => "scotoma",
            Method::ScotomaSelfTaught => "scotoma_self_taught",
            Method::Euclidean => "euclidean",
            Method::Mahalanobis => "mahalanobis",
            Method::Propensity => "propensity",
            Method::Rca => "rca",
            Method::TrueBeta => "true_beta",
        }
    }
}

/// Object-set accuracy of one method on one replicate.
pub fn evaluate_method(method: Method, g: &Generated, hp: &HyperParams) -> Result<f64> {
    let d = &g.dataset;
    let baseline = |s: &dyn PairScorer| {
        let m = greedy_match(s, d.object_control(), d.object_treatment(), None, None);
        matching_accuracy(&m, &g.object_truth)
    };
    match method {
        Method::Scotoma | Method::ScotomaSelfTaught => {
            let (_, state) = if method == Method::Scotoma {
                fit_canonical(d, hp)?
            } else {
                fit_self_taught(d, hp)?
            };
            matching_accuracy(&match_object_set(d, &state, hp.epsilon), &g.object_truth)
        }
        Method::Euclidean => baseline(&Euclidean),
        Method::Mahalanobis => {
            let sample: Vec<&[f64]> = d.observations().map(|o| o.x.as_slice()).collect();
            baseline(&mahalanobis_scorer(&sample, true)?)
        }
        Method::Propensity => baseline(&crate::baselines::propensity_scorer(d)?),
        Method::Rca => {
            let (c, t): (Vec<&[f64]>, Vec<&[f64]>) =
                d.paired().iter().map(|p| (p.control.x.as_slice(), p.treatment.x.as_slice())).unzip();
            baseline(&rca_scorer(&c, &t, true)?)
        }
        Method::TrueBeta => {
            let beta = g
                .true_beta
                .as_ref()
                .ok_or_else(|| ScotomaError::Config("true_beta needs the linear expert without interactions".into()))?;
            baseline(beta)
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub cells: Vec<DgpConfig>,
    pub methods: Vec<Method>,
    pub replicates: usize,
    pub seed: u64,
    pub hyper: HyperParams,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            cells: vec![DgpConfig::default()],
            methods: vec![Method::Scotoma, Method::Euclidean],
            replicates: 100,
            seed: 0,
            hyper: HyperParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub cell: usize,
    pub replicate: usize,
    pub method: Method,
    pub accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellSummary {
    pub cell: usize,
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    /// More than 10% of the replicates errored.
    pub failed: bool,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub spec: ExperimentSpec,
    pub records: Vec<ReplicateRecord>,
    pub summaries: Vec<CellSummary>,
}

impl ExperimentResult {
    pub fn summary(&self, cell: usize, method: Method) -> Option<&CellSummary> {
        self.summaries.iter().find(|s| s.cell == cell && s.method == method)
    }

    /// Long format: `cell,replicate,method,accuracy,error`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["cell", "replicate", "method", "accuracy", "error"])?;
        for r in &self.records {
            wtr.write_record([
                r.cell.to_string(),
                r.replicate.to_string(),
                r.method.name().to_string(),
                r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Runs every method on every replicate of every cell.
///
/// Replicate `r` of cell `c` draws from stream `cell_stream(c, r)` of `spec.seed`, so
/// the output does not depend on the number of threads.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    if spec.methods.is_empty() {
        return Err(ScotomaError::Config("at least one method is required".into()));
    }
    if spec.replicates == 0 {
        return Err(ScotomaError::Config("replicates must be at least 1".into()));
    }
    spec.hyper.validate()?;
    for cell in &spec.cells {
        cell.validate()?;
    }
    let jobs: Vec<(usize, usize)> = (0..spec.cells.len())
        .flat_map(|c| (0..spec.replicates).map(move |r| (c, r)))
        .collect();
    let records: Vec<ReplicateRecord> = jobs
        .par_iter()
        .flat_map_iter(|&(c, r)| {
            let mut rng = stream_rng(spec.seed, cell_stream(c, r));
            let generated = generate_with(&spec.cells[c], &mut rng);
            spec.methods
                .iter()
                .map(|&method| {
                    let res = generated.as_ref().map_err(|e| e.to_string()).and_then(|g| {
                        evaluate_method(method, g, &spec.hyper).map_err(|e| e.to_string())
                    });
                    ReplicateRecord {
                        cell: c,
                        replicate: r,
                        method,
                        accuracy: res.as_ref().ok().copied(),
                        error: res.err(),
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();

    let mut summaries = Vec::new();
    for c in 0..spec.cells.len() {
        for &method in &spec.methods {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.cell == c && r.method == method)
                .filter_map(|r| r.accuracy)
                .collect();
            let n_failed = spec.replicates - vals.len();
            summaries.push(CellSummary {
                cell: c,
                method,
                n_ok: vals.len(),
                n_failed,
                failed: n_failed * 10 > spec.replicates,
                median: quantile(&vals, 0.5),
                q1: quantile(&vals, 0.25),
                q3: quantile(&vals, 0.75),
                mean: mean(&vals),
            });
        }
    }
    Ok(ExperimentResult {
        spec: spec.clone(),
        records,
        summaries,
    })
}

/// Linear-interpolation quantile; NaN on empty input.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Least-squares polynomial coefficients, constant term first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(ScotomaError::Data(format!(
            "polynomial fit of degree {degree} needs more than {degree} points, got {}",
            x.len()
        )));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, k| x[i].powi(k as i32));
    let rhs = DVector::from_column_slice(y);
    let sol = a
        .svd(true, true)
        .solve(&rhs, 1e-12)
        .map_err(|e| ScotomaError::Numerical(e.to_string()))?;
    Ok(sol.iter().copied().collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct InteractionCell {
    pub n_train_pairs: usize,
    pub n_interactions: usize,
    /// Mean over replicates of `mean|β̂| on interacting noise − mean|β̂| on other noise`.
    pub mean_difference: f64,
    pub replicates: usize,
}

/// `mean|β̂_j|` over noise coordinates that enter an interaction minus the same mean over
/// noise coordinates that do not.
pub fn interaction_weight_diff(beta: &WeightVector, principal: [usize; 2], interactions: &[Interaction]) -> Result<f64> {
    if interactions.is_empty() {
        return Err(ScotomaError::Config("at least one interaction is required".into()));
    }
    let b = beta.as_slice();
    let noise: Vec<usize> = (0..b.len()).filter(|j| !principal.contains(j)).collect();
    let (inside, outside): (Vec<usize>, Vec<usize>) =
        noise.into_iter().partition(|j| interactions.iter().any(|it| it.noise == *j));
    if outside.is_empty() {
        return Err(ScotomaError::Config("no noise coordinates outside the interactions".into()));
    }
    let avg = |idx: &[usize]| idx.iter().map(|&j| b[j].abs()).sum::<f64>() / idx.len() as f64;
    Ok(avg(&inside) - avg(&outside))
}

/// Interaction table: for each training size and interaction count, the averaged weight
/// difference of the initial fit over `replicates` draws.
pub fn interaction_protocol(
    base: &DgpConfig,
    train_sizes: &[usize],
    counts: &[usize],
    replicates: usize,
    seed: u64,
) -> Result<Vec<InteractionCell>> {
    let hp = HyperParams::default();
    let mut cells = Vec::new();
    for (a, &ell) in train_sizes.iter().enumerate() {
        for (b, &k) in counts.iter().enumerate() {
            let cfg = DgpConfig {
                n_train_pairs: ell,
                n_unpaired: 0,
                n_test_pairs: 0,
                interactions: Interactions::Count(k),
                ..base.clone()
            };
            cfg.validate()?;
            let cell = a * counts.len() + b;
            let diffs: Vec<f64> = (0..replicates)
                .into_par_iter()
                .map(|r| {
                    let g = generate_with(&cfg, &mut stream_rng(seed, cell_stream(cell, r)))?;
                    let fit = fit_initial(&g.dataset, &hp)?;
                    interaction_weight_diff(&fit.beta, g.principal_idx, &g.interactions)
                })
                .collect::<Result<_>>()?;
            cells.push(InteractionCell {
                n_train_pairs: ell,
                n_interactions: k,
                mean_difference: mean(&diffs),
                replicates,
            });
        }
    }
    Ok(cells)
}

#[derive(Debug, Clone, Serialize)]
pub struct GainPoint {
    pub replicate: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SelfTaughtResult {
    pub points: Vec<GainPoint>,
    pub mean_gain: f64,
    /// Least-squares `gain ≈ c0 + c1·a + c2·a²` on initial accuracy `a`.
    pub quadratic: Vec<f64>,
}

/// Per replicate: object-set accuracy of the initial fit, then of the self-taught fit
/// after `hp.max_iters` iterations.
pub fn self_taught_gain_protocol(cfg: &DgpConfig, hp: &HyperParams, replicates: usize, seed: u64) -> Result<SelfTaughtResult> {
    cfg.validate()?;
    hp.validate()?;
    let points: Vec<GainPoint> = (0..replicates)
        .into_par_iter()
        .map(|r| {
            let g = generate_with(cfg, &mut stream_rng(seed, cell_stream(0, r)))?;
            let d = &g.dataset;
            let init = fit_initial(d, hp)?;
            let m0 = greedy_match(&init.beta, d.object_control(), d.object_treatment(), None, None);
            let initial_accuracy = matching_accuracy(&m0, &g.object_truth)?;
            let (_, state) = fit_self_taught(d, hp)?;
            let final_accuracy = matching_accuracy(&match_object_set(d, &state, hp.epsilon), &g.object_truth)?;
            Ok(GainPoint {
                replicate: r,
                initial_accuracy,
                final_accuracy,
                gain: final_accuracy - initial_accuracy,
            })
        })
        .collect::<Result<_>>()?;
    let x: Vec<f64> = points.iter().map(|p| p.initial_accuracy).collect();
    let y: Vec<f64> = points.iter().map(|p| p.gain).collect();
    Ok(SelfTaughtResult {
        mean_gain: mean(&y),
        quadratic: polyfit(&x, &y, 2)?,
        points,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct RateResult {
    pub train_sizes: Vec<usize>,
    pub mean_distance: Vec<f64>,
    /// Slope of `log(mean distance)` on `log(ℓ)`.
    pub slope: f64,
}

/// Distance of the initial fit from a reference fitted on a `master_factor`-times larger
/// sample of the same replicate, averaged per training size.
pub fn rate_protocol(
    base: &DgpConfig,
    train_sizes: &[usize],
    replicates: usize,
    master_factor: usize,
    seed: u64,
) -> Result<RateResult> {
    let hp = HyperParams::default();
    let mut mean_distance = Vec::new();
    for (cell, &ell) in train_sizes.iter().enumerate() {
        let dists: Vec<f64> = (0..replicates)
            .into_par_iter()
            .map(|r| {
                let mut rng = stream_rng(seed, cell_stream(cell, r));
                let principal = match base.principal_idx {
                    Some(pi) => pi,
                    None => {
                        let v: Vec<usize> = rand::seq::index::sample(&mut rng, base.p, 2).into_iter().collect();
                        [v[0], v[1]]
                    }
                };
                let cfg = |n: usize| DgpConfig {
                    n_train_pairs: n,
                    n_unpaired: 0,
                    n_test_pairs: 0,
                    principal_idx: Some(principal),
                    ..base.clone()
                };
                let master = generate_with(&cfg(ell * master_factor), &mut rng)?;
                let reference = fit_initial(&master.dataset, &hp)?.beta;
                let sample = generate_with(&cfg(ell), &mut rng)?;
                let estimate = fit_initial(&sample.dataset, &hp)?.beta;
                subspace_dist(reference.as_slice(), estimate.as_slice())
            })
            .collect::<Result<_>>()?;
        mean_distance.push(mean(&dists));
    }
    let lx: Vec<f64> = train_sizes.iter().map(|&l| (l as f64).ln()).collect();
    let ly: Vec<f64> = mean_distance.iter().map(|d| d.ln()).collect();
    let slope = polyfit(&lx, &ly, 1)?[1];
    Ok(RateResult {
        train_sizes: train_sizes.to_vec(),
        mean_distance,
        slope,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_match_config_and_truth_is_bijection() {
        let cfg = DgpConfig {
            n_train_pairs: 15,
            n_unpaired: 7,
            n_test_pairs: 9,
            seed: 3,
            ..DgpConfig::default()
        };
        let g = generate(&cfg).unwrap();
        let dims = g.dataset.dims();
        assert_eq!(dims.paired, 15);
        assert_eq!((dims.unpaired_control, dims.unpaired_treatment), (7, 7));
        assert_eq!((dims.object_control, dims.object_treatment), (9, 9));
        assert_eq!(dims.p, 12);
        let c: std::collections::HashSet<_> = g.object_truth.pairs.iter().map(|p| &p.0).collect();
        let t: std::collections::HashSet<_> = g.object_truth.pairs.iter().map(|p| &p.1).collect();
        assert_eq!((c.len(), t.len()), (9, 9));
        assert!(g.true_beta.is_some());
    }

    #[test]
    fn true_weights_recover_object_pairing() {
        let g = generate(&DgpConfig {
            seed: 11,
            ..DgpConfig::default()
        })
        .unwrap();
        let acc = evaluate_method(Method::TrueBeta, &g, &HyperParams::default()).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_noise_weight_gives_two_support_points() {
        let g = generate(&DgpConfig {
            w_noise: 0.0,
            principal_idx: Some([3, 7]),
            ..DgpConfig::default()
        })
        .unwrap();
        let nz: Vec<usize> =
            g.true_beta.unwrap().as_slice().iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(k, _)| k).collect();
        assert_eq!(nz, vec![3, 7]);
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = DgpConfig {
            expert: ExpertModel::Conjunctive,
            rho: Some(0.3),
            interactions: Interactions::Count(2),
            seed: 5,
            ..DgpConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert!(a.true_beta.is_none());
        assert_eq!(a.interactions.len(), 2);
    }

    #[test]
    fn conjunctive_pairs_respect_threshold() {
        let cfg = DgpConfig {
            expert: ExpertModel::Conjunctive,
            c: 0.4,
            principal_idx: Some([1, 2]),
            seed: 9,
            ..DgpConfig::default()
        };
        let g = generate(&cfg).unwrap();
        for p in g.dataset.paired() {
            for k in [1, 2] {
                assert!((p.control.x[k] - p.treatment.x[k]).abs() < 0.4);
            }
        }
    }

    #[test]
    fn greedy_1d_matches_table_scan() {
        let mut rng = stream_rng(1, 0);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let m = rng.random_range(1..9);
            let a: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random::<f64>()).collect();
            let table: Vec<f64> = a.iter().flat_map(|x| b.iter().map(move |y| (x - y) * (x - y))).collect();
            let scan: Vec<(usize, usize)> = greedy_on_table(&table, n, m, &GreedyOptions::default())
                .into_iter()
                .map(|(i, j, _)| (i, j))
                .collect();
            assert_eq!(greedy_1d(&a, &b, usize::MAX), scan);
        }
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            DgpConfig {
                principal_idx: Some([1, 1]),
                ..DgpConfig::default()
            },
            DgpConfig {
                rho: Some(1.0),
                ..DgpConfig::default()
            },
            DgpConfig {
                interactions: Interactions::Count(11),
                ..DgpConfig::default()
            },
            DgpConfig {
                pool_factor: 0.5,
                ..DgpConfig::default()
            },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn equicorrelation_vanishes_continuously() {
        let p = 4;
        let cov = |r: f64| DMatrix::from_fn(p, p, |i, j| 0.25 * if i == j { 1.0 } else { r });
        assert!((cov(1e-9) - cov(0.0)).amax() < 1e-6);
    }

    #[test]
    fn experiment_is_deterministic() {
        let spec = ExperimentSpec {
            replicates: 3,
            methods: vec![Method::Scotoma, Method::Euclidean, Method::Propensity],
            seed: 2,
            ..ExperimentSpec::default()
        };
        let a = run_experiment(&spec).unwrap();
        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.records.len(), 9);
        assert!(a.records.iter().all(|r| r.accuracy.is_some()));
    }

    #[test]
    fn easy_instance_euclidean_is_accurate() {
        // no bias, and near-perfect correlation leaves almost no spread across the
        // expert's direction
        let g = generate(&DgpConfig {
            b: 0.0,
            w_noise: 0.0,
            rho: Some(0.9999),
            p: 2,
            principal_idx: Some([0, 1]),
            seed: 4,
            ..DgpConfig::default()
        })
        .unwrap();
        let acc = evaluate_method(Method::Euclidean, &g, &HyperParams::default()).unwrap();
        assert!(acc >= 0.9, "{acc}");
    }

    #[test]
    fn quantiles_and_fit() {
        assert_eq!(quantile(&[3.0, 1.0, 2.0], 0.5), 2.0);
        assert_eq!(quantile(&[0.0, 1.0], 0.25), 0.25);
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v - 0.5 * v * v).collect();
        let c = polyfit(&x, &y, 2).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-10 && (c[1] - 2.0).abs() < 1e-10 && (c[2] + 0.5).abs() < 1e-10);
    }

    #[test]
    fn interaction_diff_requires_interactions() {
        let beta = WeightVector::new(vec![1.0; 5]).unwrap();
        assert!(interaction_weight_diff(&beta, [0, 1], &[]).is_err());
        let it = [Interaction {
            principal: 0,
            noise: 2,
            weight: 0.2,
        }];
        assert_eq!(interaction_weight_diff(&beta, [0, 1], &it).unwrap(), 0.0);
    }
}
