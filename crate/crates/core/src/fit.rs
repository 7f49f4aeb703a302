//! Training loops: the initial fit on expert pairs, the canonical loop that absorbs
//! confidently matched pairs from the unpaired pools, the self-taught variant that also
//! absorbs pairs from the object set, and the leave-one-out exclusion filter.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::dataset::{Observation, SemiDataset};
use crate::eigen::{top_generalized_eigvec, top_pencil_eigvec, GeneralizedEigen};
use crate::error::{Result, ScotomaError};
use crate::matcher::{greedy_indices, greedy_match_with, GreedyOptions, Matching, MatchedPair, PairScorer};
use crate::params::{Epsilon, HyperParams};
use crate::score::{build_scatter, WeightVector};

/// Where a training pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Expert,
    Unpaired,
    Object,
}

/// One pair of the (augmented) training set. Indices point into the dataset block named
/// by `source`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingPair {
    pub source: PairSource,
    pub control: usize,
    pub treatment: usize,
    /// Iteration that absorbed the pair; 0 for expert pairs.
    pub iteration: usize,
    /// Score under the weights that selected the pair; 0 for expert pairs.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrajectoryRow {
    pub iteration: usize,
    pub delta_inf: f64,
    pub added: usize,
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Sup-norm weight change fell to `delta0` or below.
    Converged,
    /// No candidate pairs left to absorb.
    PoolsExhausted,
    /// The exclusion filter rejected every candidate of an iteration.
    AllExcluded,
    MaxIters,
}

#[derive(Debug, Clone, Serialize)]
pub struct FitState {
    pub iteration: usize,
    pub beta: WeightVector,
    /// Ridge used by the last weight update.
    pub lambda: f64,
    pub training: Vec<TrainingPair>,
    pub remaining_unpaired_control: Vec<usize>,
    pub remaining_unpaired_treatment: Vec<usize>,
    pub remaining_object_control: Vec<usize>,
    pub remaining_object_treatment: Vec<usize>,
    pub trajectory: Vec<TrajectoryRow>,
    pub stop_reason: StopReason,
    /// Number of weight updates whose top eigenvalue was degenerate.
    pub degenerate_updates: usize,
    pub warnings: Vec<String>,
}

impl FitState {
    pub fn ell_dot(&self) -> usize {
        self.training.len()
    }

    /// Writes `iteration,delta_inf,added,excluded`.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        wtr.write_record(["iteration", "delta_inf", "added", "excluded"])?;
        for row in &self.trajectory {
            wtr.write_record([
                row.iteration.to_string(),
                row.delta_inf.to_string(),
                row.added.to_string(),
                row.excluded.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    fn training_rows<'d>(&self, d: &'d SemiDataset) -> (Vec<&'d [f64]>, Vec<&'d [f64]>) {
        self.training
            .iter()
            .map(|tp| {
                let (c, t) = resolve(d, tp);
                (c.x.as_slice(), t.x.as_slice())
            })
            .unzip()
    }

    /// Ids of every training pair, expert pairs first.
    pub fn training_ids(&self, d: &SemiDataset) -> Vec<(String, String)> {
        self.training
            .iter()
            .map(|tp| {
                let (c, t) = resolve(d, tp);
                (c.id.clone(), t.id.clone())
            })
            .collect()
    }
}

fn resolve<'d>(d: &'d SemiDataset, tp: &TrainingPair) -> (&'d Observation, &'d Observation) {
    match tp.source {
        PairSource::Expert => {
            let pr = &d.paired()[tp.control];
            (&pr.control, &pr.treatment)
        }
        PairSource::Unpaired => (&d.unpaired_control()[tp.control], &d.unpaired_treatment()[tp.treatment]),
        PairSource::Object => (&d.object_control()[tp.control], &d.object_treatment()[tp.treatment]),
    }
}

fn update_weights(controls: &[&[f64]], treatments: &[&[f64]], hp: &HyperParams) -> Result<(GeneralizedEigen, f64)> {
    if controls.len() < 2 {
        return Err(ScotomaError::InsufficientPairs(format!(
            "{} training pair(s): the between-pair scatter vanishes, at least 2 are needed",
            controls.len()
        )));
    }
    let sp = build_scatter(controls, treatments, hp.lambda)?;
    let eig = top_generalized_eigvec(&sp)?;
    Ok((eig, sp.lambda()))
}

/// Weights learned from the expert pairs alone.
pub fn fit_initial(d: &SemiDataset, hp: &HyperParams) -> Result<GeneralizedEigen> {
    hp.validate()?;
    let (c, t): (Vec<&[f64]>, Vec<&[f64]>) = d
        .paired()
        .iter()
        .map(|pr| (pr.control.x.as_slice(), pr.treatment.x.as_slice()))
        .unzip();
    update_weights(&c, &t, hp).map(|(eig, _)| eig)
}

/// Canonical loop: absorbs up to `tau1` greedy pairs from the unpaired pools per iteration.
pub fn fit_canonical(d: &SemiDataset, hp: &HyperParams) -> Result<(WeightVector, FitState)> {
    if hp.tau2 > 0 {
        return Err(ScotomaError::Config("tau2 requires self_taught mode".into()));
    }
    run_loop(d, hp, false)
}

/// Self-taught loop: each iteration additionally absorbs up to `tau2` greedy pairs from
/// the object set, chosen separately from the unpaired-pool batch.
pub fn fit_self_taught(d: &SemiDataset, hp: &HyperParams) -> Result<(WeightVector, FitState)> {
    run_loop(d, hp, true)
}

fn run_loop(d: &SemiDataset, hp: &HyperParams, self_taught: bool) -> Result<(WeightVector, FitState)> {
    hp.validate()?;
    let ell0 = d.paired().len();
    let tau1 = hp.tau1_for(ell0);
    let tau2 = if self_taught { hp.tau2 } else { 0 };
    if hp.exclusion && tau1 < 2 {
        return Err(ScotomaError::Config("exclusion requires tau1 >= 2".into()));
    }

    let mut state = FitState {
        iteration: 0,
        beta: WeightVector::new(vec![1.0; d.p()])?,
        lambda: 0.0,
        training: (0..ell0)
            .map(|k| TrainingPair {
                source: PairSource::Expert,
                control: k,
                treatment: k,
                iteration: 0,
                score: 0.0,
            })
            .collect(),
        remaining_unpaired_control: (0..d.unpaired_control().len()).collect(),
        remaining_unpaired_treatment: (0..d.unpaired_treatment().len()).collect(),
        remaining_object_control: (0..d.object_control().len()).collect(),
        remaining_object_treatment: (0..d.object_treatment().len()).collect(),
        trajectory: Vec::new(),
        stop_reason: StopReason::PoolsExhausted,
        degenerate_updates: 0,
        warnings: Vec::new(),
    };

    let (c, t) = state.training_rows(d);
    let (eig, lambda) = update_weights(&c, &t, hp)?;
    state.beta = eig.beta;
    state.lambda = lambda;
    state.degenerate_updates += usize::from(eig.degenerate);

    loop {
        if state.iteration >= hp.max_iters {
            state.stop_reason = StopReason::MaxIters;
            state.warnings.push(format!(
                "no convergence after {} iterations (delta0 = {})",
                hp.max_iters, hp.delta0
            ));
            break;
        }
        let k = state.iteration;

        let pool_uc = rows(d.unpaired_control(), &state.remaining_unpaired_control);
        let pool_ut = rows(d.unpaired_treatment(), &state.remaining_unpaired_treatment);
        let opts = GreedyOptions {
            max_pairs: Some(tau1),
            ..GreedyOptions::default()
        };
        let cand_u = greedy_indices(&state.beta, &pool_uc, &pool_ut, &opts);

        let cand_o = if tau2 > 0 {
            let pool_oc = rows(d.object_control(), &state.remaining_object_control);
            let pool_ot = rows(d.object_treatment(), &state.remaining_object_treatment);
            let opts = GreedyOptions {
                max_pairs: Some(tau2),
                ..GreedyOptions::default()
            };
            greedy_indices(&state.beta, &pool_oc, &pool_ot, &opts)
        } else {
            Vec::new()
        };

        if cand_u.is_empty() && cand_o.is_empty() {
            state.stop_reason = StopReason::PoolsExhausted;
            break;
        }

        let keep: Vec<bool> = if hp.exclusion && !cand_u.is_empty() {
            if cand_u.len() < 2 {
                vec![false]
            } else {
                let idx: Vec<(usize, usize)> = cand_u.iter().map(|&(i, j, _)| (i, j)).collect();
                exclusion_step(&idx, &pool_uc, &pool_ut, state.lambda)?
            }
        } else {
            vec![true; cand_u.len()]
        };
        let excluded = keep.iter().filter(|k| !**k).count();
        let accepted_u: Vec<_> = cand_u.iter().zip(&keep).filter(|(_, k)| **k).map(|(c, _)| *c).collect();

        if accepted_u.is_empty() && cand_o.is_empty() {
            state.trajectory.push(TrajectoryRow {
                iteration: k + 1,
                delta_inf: 0.0,
                added: 0,
                excluded,
            });
            state.stop_reason = StopReason::AllExcluded;
            break;
        }

        let added = accepted_u.len() + cand_o.len();
        absorb(
            &mut state.training,
            &mut state.remaining_unpaired_control,
            &mut state.remaining_unpaired_treatment,
            &accepted_u,
            PairSource::Unpaired,
            k + 1,
        );
        absorb(
            &mut state.training,
            &mut state.remaining_object_control,
            &mut state.remaining_object_treatment,
            &cand_o,
            PairSource::Object,
            k + 1,
        );

        let (c, t) = state.training_rows(d);
        let (eig, lambda) = update_weights(&c, &t, hp)?;
        let delta = eig.beta.aligned_sup_distance(&state.beta);
        state.beta = eig.beta;
        state.lambda = lambda;
        state.degenerate_updates += usize::from(eig.degenerate);
        state.iteration = k + 1;
        state.trajectory.push(TrajectoryRow {
            iteration: k + 1,
            delta_inf: delta,
            added,
            excluded,
        });
        if delta <= hp.delta0 {
            state.stop_reason = StopReason::Converged;
            break;
        }
    }

    Ok((state.beta.clone(), state))
}

fn rows<'d>(block: &'d [Observation], idx: &[usize]) -> Vec<&'d [f64]> {
    idx.iter().map(|&i| block[i].x.as_slice()).collect()
}

/// Moves the selected pool positions into the training set, in selection order.
fn absorb(
    training: &mut Vec<TrainingPair>,
    pool_c: &mut Vec<usize>,
    pool_t: &mut Vec<usize>,
    picked: &[(usize, usize, f64)],
    source: PairSource,
    iteration: usize,
) {
    for &(i, j, s) in picked {
        training.push(TrainingPair {
            source,
            control: pool_c[i],
            treatment: pool_t[j],
            iteration,
            score: s,
        });
    }
    let drop_c: Vec<usize> = picked.iter().map(|p| p.0).collect();
    let drop_t: Vec<usize> = picked.iter().map(|p| p.1).collect();
    retain_positions(pool_c, &drop_c);
    retain_positions(pool_t, &drop_t);
}

fn retain_positions(pool: &mut Vec<usize>, drop: &[usize]) {
    let mut pos = 0;
    pool.retain(|_| {
        let keep = !drop.contains(&pos);
        pos += 1;
        keep
    });
}

/// Leave-one-out reciprocal-nearest-neighbour filter.
///
/// `candidates` are (control, treatment) positions in the pools. For each candidate `s`
/// the weights are refitted on the other candidates: the objective puts the within-pair
/// scores of the remaining candidate pairs in the numerator and `λβᵀβ` plus their cross
/// non-pair scores in the denominator. Under those weights the candidate's control must
/// have its own partner as nearest pool treatment and vice versa; ties count in the
/// candidate's favour. Returns one keep flag per candidate.
pub fn exclusion_step(
    candidates: &[(usize, usize)],
    pool_control: &[&[f64]],
    pool_treatment: &[&[f64]],
    lambda: f64,
) -> Result<Vec<bool>> {
    if candidates.len() < 2 {
        return Err(ScotomaError::Config("exclusion requires tau1 >= 2".into()));
    }
    let p = pool_control
        .first()
        .map(|x| x.len())
        .ok_or_else(|| ScotomaError::Data("empty control pool".into()))?;
    let diff = |a: &[f64], b: &[f64]| DVector::from_fn(p, |k, _| a[k] - b[k]);

    let mut keep = Vec::with_capacity(candidates.len());
    for (s, &(cs, ts)) in candidates.iter().enumerate() {
        let mut within = DMatrix::zeros(p, p);
        let mut cross = DMatrix::identity(p, p) * lambda;
        for (s1, &(c1, t1)) in candidates.iter().enumerate() {
            if s1 == s {
                continue;
            }
            let d = diff(pool_control[c1], pool_treatment[t1]);
            within += &d * d.transpose();
            for (s2, &(_, t2)) in candidates.iter().enumerate() {
                if s2 == s || s2 == s1 {
                    continue;
                }
                let e = diff(pool_control[c1], pool_treatment[t2]);
                cross += &e * e.transpose();
            }
        }
        let beta = top_pencil_eigvec(&within, &cross)?.beta;

        let own = beta.pair_score(pool_control[cs], pool_treatment[ts]);
        let control_ok = pool_treatment
            .iter()
            .enumerate()
            .all(|(j, t)| j == ts || beta.pair_score(pool_control[cs], t) >= own);
        let treatment_ok = pool_control
            .iter()
            .enumerate()
            .all(|(i, c)| i == cs || beta.pair_score(c, pool_treatment[ts]) >= own);
        keep.push(control_ok && treatment_ok);
    }
    Ok(keep)
}

/// Resolves an [`Epsilon`] against the final training pairs.
pub fn resolve_epsilon(eps: Epsilon, d: &SemiDataset, state: &FitState) -> Option<f64> {
    match eps {
        Epsilon::Value(v) => Some(v),
        Epsilon::Unbounded => None,
        Epsilon::Auto => {
            let (c, t) = state.training_rows(d);
            c.iter()
                .zip(&t)
                .map(|(c, t)| state.beta.pair_score(c, t))
                .fold(None, |m: Option<f64>, s| Some(m.map_or(s, |m| m.max(s))))
        }
    }
}

/// Final matching of the object set.
///
/// Object pairs absorbed during self-taught training come first, in absorption order;
/// the remaining object units are then matched greedily under `beta` and the threshold.
pub fn match_object_set(d: &SemiDataset, state: &FitState, epsilon: Epsilon) -> Matching {
    let eps = resolve_epsilon(epsilon, d, state);
    let oc: Vec<&Observation> = state.remaining_object_control.iter().map(|&i| &d.object_control()[i]).collect();
    let ot: Vec<&Observation> = state.remaining_object_treatment.iter().map(|&j| &d.object_treatment()[j]).collect();
    let rest = greedy_match_with(
        &state.beta,
        &oc,
        &ot,
        &GreedyOptions {
            epsilon: eps,
            ..GreedyOptions::default()
        },
    );
    let mut pairs: Vec<MatchedPair> = state
        .training
        .iter()
        .filter(|tp| tp.source == PairSource::Object)
        .map(|tp| {
            let (c, t) = resolve(d, tp);
            MatchedPair {
                control_id: c.id.clone(),
                treatment_id: t.id.clone(),
                score: tp.score,
                rank: 0,
            }
        })
        .collect();
    pairs.extend(rest.pairs);
    for (k, p) in pairs.iter_mut().enumerate() {
        p.rank = k + 1;
    }
    Matching {
        pairs,
        unmatched_control: rest.unmatched_control,
        unmatched_treatment: rest.unmatched_treatment,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ExpertPair;

    fn obs_c(id: &str, x: &[f64]) -> Observation {
        Observation::control(id, x.to_vec())
    }

    fn obs_t(id: &str, x: &[f64]) -> Observation {
        Observation::treatment(id, x.to_vec())
    }

    fn pair(k: usize, c: &[f64], t: &[f64]) -> ExpertPair {
        ExpertPair {
            pair_id: format!("P{k}"),
            control: obs_c(&format!("pc{k}"), c),
            treatment: obs_t(&format!("pt{k}"), t),
        }
    }

    fn toy(n_unpaired: usize) -> SemiDataset {
        // expert pairs agree on coordinate 0 and disagree on coordinate 1
        let paired = (0..6)
            .map(|k| {
                let a = k as f64;
                let b = ((k * 7) % 5) as f64;
                pair(k, &[a, b], &[a + 0.01 * (k as f64 - 2.5), 4.0 - b])
            })
            .collect();
        let uc = (0..n_unpaired).map(|k| obs_c(&format!("uc{k}"), &[10.0 + 2.0 * k as f64, k as f64])).collect();
        let ut = (0..n_unpaired).map(|k| obs_t(&format!("ut{k}"), &[10.1 + 2.0 * k as f64, -(k as f64)])).collect();
        SemiDataset::new(paired, uc, ut, vec![], vec![]).unwrap()
    }

    #[test]
    fn single_pair_is_insufficient() {
        let d = SemiDataset::new(vec![pair(0, &[0.0, 1.0], &[1.0, 0.0])], vec![], vec![], vec![], vec![]).unwrap();
        let err = fit_initial(&d, &HyperParams::default()).unwrap_err().to_string();
        assert!(err.contains("insufficient pairs"), "{err}");
    }

    #[test]
    fn initial_fit_finds_agreeing_coordinate() {
        let e = fit_initial(&toy(0), &HyperParams::default()).unwrap();
        assert!(e.beta.as_slice()[0].abs() > 0.99, "{:?}", e.beta);
    }

    #[test]
    fn empty_pools_return_initial_fit() {
        let d = toy(0);
        let hp = HyperParams::default();
        let init = fit_initial(&d, &hp).unwrap();
        let (beta, st) = fit_canonical(&d, &hp).unwrap();
        assert_eq!(beta, init.beta);
        assert_eq!(st.stop_reason, StopReason::PoolsExhausted);
        assert_eq!(st.iteration, 0);
    }

    #[test]
    fn infinite_threshold_stops_after_one_iteration() {
        let d = toy(5);
        let hp = HyperParams {
            tau1: Some(2),
            delta0: f64::INFINITY,
            ..HyperParams::default()
        };
        let (_, st) = fit_canonical(&d, &hp).unwrap();
        assert_eq!(st.iteration, 1);
        assert_eq!(st.ell_dot(), 6 + 2);
        assert_eq!(st.stop_reason, StopReason::Converged);
        assert_eq!(st.remaining_unpaired_control.len(), 3);
    }

    #[test]
    fn exhausts_pools_with_zero_threshold() {
        let d = toy(5);
        let hp = HyperParams {
            tau1: Some(2),
            delta0: 0.0,
            max_iters: usize::MAX,
            ..HyperParams::default()
        };
        let (_, st) = fit_canonical(&d, &hp).unwrap();
        assert!(st.remaining_unpaired_control.is_empty());
        assert!(st.iteration <= 3);
        assert_eq!(st.ell_dot(), 11);
        let sizes: Vec<usize> = st.trajectory.iter().map(|r| r.added).collect();
        assert_eq!(sizes.iter().sum::<usize>(), 5);
    }

    #[test]
    fn tau2_rejected_in_canonical_mode() {
        let hp = HyperParams {
            tau2: 1,
            ..HyperParams::default()
        };
        assert!(fit_canonical(&toy(2), &hp).is_err());
    }

    #[test]
    fn exclusion_needs_two_candidates() {
        let hp = HyperParams {
            tau1: Some(1),
            exclusion: true,
            ..HyperParams::default()
        };
        let err = fit_canonical(&toy(2), &hp).unwrap_err().to_string();
        assert!(err.contains("tau1 >= 2"), "{err}");
    }

    #[test]
    fn exclusion_accepts_orthogonal_pairs() {
        let c: Vec<&[f64]> = vec![&[0.0, 0.0], &[10.0, 10.0]];
        let t: Vec<&[f64]> = vec![&[1.0, 0.0], &[10.0, 11.0]];
        let keep = exclusion_step(&[(0, 0), (1, 1)], &c, &t, 1e-3).unwrap();
        assert_eq!(keep, vec![true, true]);
    }

    #[test]
    fn exclusion_rejects_dominated_candidate() {
        // 1-D: every unit beta is ±1, and control 0 sits closer to treatment 1 than to
        // its proposed partner treatment 0.
        let c: Vec<&[f64]> = vec![&[0.0], &[5.0]];
        let t: Vec<&[f64]> = vec![&[2.0], &[0.5], &[9.0]];
        let keep = exclusion_step(&[(0, 0), (1, 2)], &c, &t, 1e-3).unwrap();
        assert!(!keep[0]);
    }
}
