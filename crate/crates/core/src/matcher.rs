//! Greedy sequential-minimum one-to-one matching, accuracy against an expert pairing,
//! and the random-matching reference model.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Observation;
use crate::error::{Result, ScotomaError};
use crate::rng::stream_rng;
use crate::score::WeightVector;

/// Pairwise dissimilarity between a control and a treatment.
///
/// Implementations must be symmetric in the two covariate vectors, nonnegative, and zero
/// on identical points. `+∞` marks an infeasible pair.
pub trait PairScorer: Sync {
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64;

    /// Row-major `controls.len() × treatments.len()` score table.
    fn score_table(&self, controls: &[&[f64]], treatments: &[&[f64]]) -> Vec<f64> {
        let mut out = Vec::with_capacity(controls.len() * treatments.len());
        for c in controls {
            for t in treatments {
                out.push(self.pair_score(c, t));
            }
        }
        out
    }
}

impl PairScorer for WeightVector {
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64 {
        let d = self.project(control) - self.project(treatment);
        d * d
    }

    fn score_table(&self, controls: &[&[f64]], treatments: &[&[f64]]) -> Vec<f64> {
        let pt: Vec<f64> = treatments.iter().map(|t| self.project(t)).collect();
        let mut out = Vec::with_capacity(controls.len() * treatments.len());
        for c in controls {
            let pc = self.project(c);
            out.extend(pt.iter().map(|t| (pc - t) * (pc - t)));
        }
        out
    }
}

/// Adapts a closure to [`PairScorer`].
pub struct FnScorer<F>(pub F);

impl<F: Fn(&[f64], &[f64]) -> f64 + Sync> PairScorer for FnScorer<F> {
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64 {
        (self.0)(control, treatment)
    }
}

/// How the greedy matcher finds each round's minimum. Both give identical output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyStrategy {
    /// Full rescan of the remaining score table every round.
    #[default]
    Rescan,
    /// One sort of all candidate pairs, then a single pass skipping used units.
    Sorted,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyOptions {
    /// Accept a pair only if its score is `<= epsilon`.
    pub epsilon: Option<f64>,
    pub max_pairs: Option<usize>,
    pub strategy: GreedyStrategy,
}

/// One selected pair: (control index, treatment index, score).
pub type IndexPair = (usize, usize, f64);

/// Sequential global-minimum matching on a row-major score table.
///
/// Each round takes the smallest remaining score, ties broken by lowest control index then
/// lowest treatment index, and removes both units. Stops when a side is exhausted, when
/// `max_pairs` is reached, when the minimum exceeds `epsilon`, or when only infeasible
/// (non-finite) pairs remain.
pub fn greedy_on_table(table: &[f64], nc: usize, nt: usize, opts: &GreedyOptions) -> Vec<IndexPair> {
    assert_eq!(table.len(), nc * nt, "score table shape");
    let cap = opts.max_pairs.unwrap_or(usize::MAX).min(nc.min(nt));
    let limit = opts.epsilon.unwrap_or(f64::INFINITY);
    let accept = |s: f64| s.is_finite() && s <= limit;
    let mut out = Vec::with_capacity(cap);
    if cap == 0 {
        return out;
    }
    match opts.strategy {
        GreedyStrategy::Rescan => {
            let mut used_c = vec![false; nc];
            let mut used_t = vec![false; nt];
            while out.len() < cap {
                let mut best: Option<IndexPair> = None;
                for i in (0..nc).filter(|&i| !used_c[i]) {
                    let row = &table[i * nt..(i + 1) * nt];
                    for j in (0..nt).filter(|&j| !used_t[j]) {
                        let s = row[j];
                        if s.is_nan() {
                            continue;
                        }
                        if best.is_none_or(|(_, _, b)| s < b) {
                            best = Some((i, j, s));
                        }
                    }
                }
                match best {
                    Some((i, j, s)) if accept(s) => {
                        used_c[i] = true;
                        used_t[j] = true;
                        out.push((i, j, s));
                    }
                    _ => break,
                }
            }
        }
        GreedyStrategy::Sorted => {
            let mut cand: Vec<IndexPair> = (0..nc)
                .flat_map(|i| (0..nt).map(move |j| (i, j)))
                .map(|(i, j)| (i, j, table[i * nt + j]))
                .filter(|&(_, _, s)| !s.is_nan())
                .collect();
            cand.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            let mut used_c = vec![false; nc];
            let mut used_t = vec![false; nt];
            for (i, j, s) in cand {
                if out.len() == cap || !accept(s) {
                    break;
                }
                if used_c[i] || used_t[j] {
                    continue;
                }
                used_c[i] = true;
                used_t[j] = true;
                out.push((i, j, s));
            }
        }
    }
    out
}

/// Greedy matching over raw covariate rows; returns index triples.
pub fn greedy_indices<S: PairScorer + ?Sized>(
    scorer: &S,
    controls: &[&[f64]],
    treatments: &[&[f64]],
    opts: &GreedyOptions,
) -> Vec<IndexPair> {
    let table = scorer.score_table(controls, treatments);
    greedy_on_table(&table, controls.len(), treatments.len(), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub control_id: String,
    pub treatment_id: String,
    pub score: f64,
    /// 1-based inclusion order.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_control: Vec<String>,
    pub unmatched_treatment: Vec<String>,
}

impl Matching {
    pub fn from_indices(
        controls: &[&Observation],
        treatments: &[&Observation],
        picked: &[IndexPair],
    ) -> Matching {
        let mut used_c = vec![false; controls.len()];
        let mut used_t = vec![false; treatments.len()];
        let pairs = picked
            .iter()
            .enumerate()
            .map(|(k, &(i, j, s))| {
                used_c[i] = true;
                used_t[j] = true;
                MatchedPair {
                    control_id: controls[i].id.clone(),
                    treatment_id: treatments[j].id.clone(),
                    score: s,
                    rank: k + 1,
                }
            })
            .collect();
        Matching {
            pairs,
            unmatched_control: unused(controls, &used_c),
            unmatched_treatment: unused(treatments, &used_t),
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Writes `control_id,treatment_id,score,rank`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["control_id", "treatment_id", "score", "rank"])?;
        for p in &self.pairs {
            wtr.write_record([
                p.control_id.as_str(),
                p.treatment_id.as_str(),
                &p.score.to_string(),
                &p.rank.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Writes the unmatched units as `id,group`.
    pub fn write_unmatched_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["id", "group"])?;
        for id in &self.unmatched_control {
            wtr.write_record([id.as_str(), "c"])?;
        }
        for id in &self.unmatched_treatment {
            wtr.write_record([id.as_str(), "t"])?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Reads the pair list written by [`Matching::write_csv`]. Unmatched lists stay empty.
    pub fn read_csv<R: Read>(reader: R) -> Result<Matching> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut pairs = Vec::new();
        for rec in rdr.deserialize() {
            let p: MatchedPair = rec?;
            pairs.push(p);
        }
        Ok(Matching {
            pairs,
            ..Matching::default()
        })
    }
}

fn unused(units: &[&Observation], used: &[bool]) -> Vec<String> {
    units
        .iter()
        .zip(used)
        .filter(|(_, u)| !**u)
        .map(|(o, _)| o.id.clone())
        .collect()
}

/// Greedy one-to-one matching of `controls` to `treatments` under `scorer`.
pub fn greedy_match<S: PairScorer + ?Sized>(
    scorer: &S,
    controls: &[Observation],
    treatments: &[Observation],
    epsilon: Option<f64>,
    max_pairs: Option<usize>,
) -> Matching {
    let opts = GreedyOptions {
        epsilon,
        max_pairs,
        strategy: GreedyStrategy::Rescan,
    };
    greedy_match_with(scorer, &refs(controls), &refs(treatments), &opts)
}

pub fn greedy_match_with<S: PairScorer + ?Sized>(
    scorer: &S,
    controls: &[&Observation],
    treatments: &[&Observation],
    opts: &GreedyOptions,
) -> Matching {
    let xc: Vec<&[f64]> = controls.iter().map(|o| o.x.as_slice()).collect();
    let xt: Vec<&[f64]> = treatments.iter().map(|o| o.x.as_slice()).collect();
    let picked = greedy_indices(scorer, &xc, &xt, opts);
    Matching::from_indices(controls, treatments, &picked)
}

pub(crate) fn refs(obs: &[Observation]) -> Vec<&Observation> {
    obs.iter().collect()
}

/// Reference pairing produced by an expert, with the ids of units the expert left unpaired.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExpertPairing {
    pub pairs: Vec<(String, String)>,
    pub unpaired: Vec<String>,
}

impl ExpertPairing {
    pub fn new(pairs: Vec<(String, String)>) -> Self {
        ExpertPairing {
            pairs,
            unpaired: Vec::new(),
        }
    }

    pub fn universe(&self) -> HashSet<&str> {
        self.pairs
            .iter()
            .flat_map(|(c, t)| [c.as_str(), t.as_str()])
            .chain(self.unpaired.iter().map(String::as_str))
            .collect()
    }

    /// Reads `control_id,treatment_id` rows.
    pub fn read_csv<R: Read>(reader: R) -> Result<ExpertPairing> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| ScotomaError::Data(format!("truth file is missing column {name}")))
        };
        let (ci, ti) = (col("control_id")?, col("treatment_id")?);
        let mut pairs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            pairs.push((rec[ci].to_string(), rec[ti].to_string()));
        }
        Ok(ExpertPairing::new(pairs))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["control_id", "treatment_id"])?;
        for (c, t) in &self.pairs {
            wtr.write_record([c, t])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Fraction of expert pairs reproduced by `predicted`.
///
/// The denominator is the number of expert pairs, so units left unmatched by a threshold
/// count as misses.
pub fn matching_accuracy(predicted: &Matching, truth: &ExpertPairing) -> Result<f64> {
    if truth.pairs.is_empty() {
        return Err(ScotomaError::Data("expert pairing is empty".into()));
    }
    let universe = truth.universe();
    let expert: HashSet<(&str, &str)> = truth
        .pairs
        .iter()
        .map(|(c, t)| (c.as_str(), t.as_str()))
        .collect();
    let mut hits = 0usize;
    for p in &predicted.pairs {
        for id in [&p.control_id, &p.treatment_id] {
            if !universe.contains(id.as_str()) {
                return Err(ScotomaError::Data(format!(
                    "predicted unit {id} is not part of the expert pairing"
                )));
            }
        }
        if expert.contains(&(p.control_id.as_str(), p.treatment_id.as_str())) {
            hits += 1;
        }
    }
    Ok(hits as f64 / truth.pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandomMatchingStats {
    pub n_pairs: usize,
    pub replicates: usize,
    pub mean_accuracy: f64,
    pub accuracy_se: f64,
    pub prob_no_correct: f64,
    pub no_correct_se: f64,
}

const RANDOM_CHUNK: usize = 4096;

/// Monte-Carlo accuracy of random matching.
///
/// Each control is assigned independently and uniformly to one of `n_pairs` treatments.
/// Replicates are processed in fixed chunks with one RNG substream each, so the result does
/// not depend on the rayon thread count.
pub fn random_matching_stats(n_pairs: usize, replicates: usize, seed: u64) -> Result<RandomMatchingStats> {
    if n_pairs == 0 || replicates == 0 {
        return Err(ScotomaError::Config("n_pairs and replicates must be at least 1".into()));
    }
    let chunks = replicates.div_ceil(RANDOM_CHUNK);
    let partial: Vec<(f64, f64, usize)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = stream_rng(seed, chunk as u64);
            let reps = RANDOM_CHUNK.min(replicates - chunk * RANDOM_CHUNK);
            let (mut sum, mut sum_sq, mut none) = (0.0, 0.0, 0usize);
            for _ in 0..reps {
                let correct = (0..n_pairs)
                    .filter(|&i| rng.random_range(0..n_pairs) == i)
                    .count();
                let acc = correct as f64 / n_pairs as f64;
                sum += acc;
                sum_sq += acc * acc;
                none += usize::from(correct == 0);
            }
            (sum, sum_sq, none)
        })
        .collect();
    let (sum, sum_sq, none) = partial
        .iter()
        .fold((0.0, 0.0, 0usize), |a, b| (a.0 + b.0, a.1 + b.1, a.2 + b.2));
    let n = replicates as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    let p0 = none as f64 / n;
    Ok(RandomMatchingStats {
        n_pairs,
        replicates,
        mean_accuracy: mean,
        accuracy_se: (var / n).sqrt(),
        prob_no_correct: p0,
        no_correct_se: (p0 * (1.0 - p0) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(ids: &[(&str, f64)], group: crate::dataset::Group) -> Vec<Observation> {
        ids.iter()
            .map(|(id, v)| Observation::new(*id, group, vec![*v]))
            .collect()
    }

    #[test]
    fn separated_clusters() {
        use crate::dataset::Group;
        let c = line(&[("c0", 0.0), ("c10", 10.0)], Group::Control);
        let t = line(&[("t1", 1.0), ("t11", 11.0)], Group::Treatment);
        let beta = WeightVector::new(vec![1.0]).unwrap();
        let m = greedy_match(&beta, &c, &t, None, None);
        assert_eq!(m.len(), 2);
        assert_eq!((m.pairs[0].control_id.as_str(), m.pairs[0].treatment_id.as_str()), ("c0", "t1"));
        assert_eq!((m.pairs[1].control_id.as_str(), m.pairs[1].treatment_id.as_str()), ("c10", "t11"));
        assert_eq!((m.pairs[0].score, m.pairs[1].score), (1.0, 1.0));

        let gated = greedy_match(&beta, &c, &t, Some(0.5), None);
        assert!(gated.is_empty());
        assert_eq!(gated.unmatched_control.len(), 2);
        assert_eq!(gated.unmatched_treatment.len(), 2);
    }

    #[test]
    fn ties_break_on_lowest_indices() {
        let table = [1.0, 1.0, 1.0, 1.0];
        let got = greedy_on_table(&table, 2, 2, &GreedyOptions::default());
        assert_eq!(got, vec![(0, 0, 1.0), (1, 1, 1.0)]);
    }

    #[test]
    fn infeasible_pairs_are_never_taken() {
        let table = [f64::INFINITY, 2.0, f64::INFINITY, f64::INFINITY];
        for strategy in [GreedyStrategy::Rescan, GreedyStrategy::Sorted] {
            let opts = GreedyOptions {
                strategy,
                ..GreedyOptions::default()
            };
            assert_eq!(greedy_on_table(&table, 2, 2, &opts), vec![(0, 1, 2.0)]);
        }
    }

    #[test]
    fn max_pairs_caps_output() {
        let table = [0.1, 0.5, 0.7, 0.2];
        let opts = GreedyOptions {
            max_pairs: Some(1),
            ..GreedyOptions::default()
        };
        assert_eq!(greedy_on_table(&table, 2, 2, &opts), vec![(0, 0, 0.1)]);
        assert!(greedy_on_table(&[], 0, 3, &GreedyOptions::default()).is_empty());
    }

    fn truth(pairs: &[(&str, &str)]) -> ExpertPairing {
        ExpertPairing::new(pairs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect())
    }

    fn predicted(pairs: &[(&str, &str)]) -> Matching {
        Matching {
            pairs: pairs
                .iter()
                .enumerate()
                .map(|(k, (c, t))| MatchedPair {
                    control_id: c.to_string(),
                    treatment_id: t.to_string(),
                    score: 0.0,
                    rank: k + 1,
                })
                .collect(),
            ..Matching::default()
        }
    }

    #[test]
    fn accuracy_cases() {
        let t = truth(&[("a", "A"), ("b", "B"), ("c", "C"), ("d", "D"), ("e", "E")]);
        let exact = predicted(&[("a", "A"), ("b", "B"), ("c", "C"), ("d", "D"), ("e", "E")]);
        assert_eq!(matching_accuracy(&exact, &t).unwrap(), 1.0);
        let none = predicted(&[("a", "B"), ("b", "A")]);
        assert_eq!(matching_accuracy(&none, &t).unwrap(), 0.0);
        let two = predicted(&[("a", "A"), ("b", "B"), ("c", "D")]);
        assert_eq!(matching_accuracy(&two, &t).unwrap(), 0.4);
        let stray = predicted(&[("z", "A")]);
        assert!(matching_accuracy(&stray, &t).is_err());
    }

    #[test]
    fn random_single_pair() {
        let s = random_matching_stats(1, 100, 3).unwrap();
        assert_eq!(s.mean_accuracy, 1.0);
        assert_eq!(s.prob_no_correct, 0.0);
        assert!(random_matching_stats(0, 10, 1).is_err());
    }

    #[test]
    fn matching_csv_round_trip() {
        let m = predicted(&[("a", "A"), ("b", "B")]);
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("control_id,treatment_id,score,rank\n"));
        assert_eq!(Matching::read_csv(buf.as_slice()).unwrap().pairs, m.pairs);
    }
}
