//! Semisupervised score-based one-to-one matching.
//!
//! From a handful of expert-matched (control, treatment) pairs the crate learns a unit
//! weight vector `beta` whose quadratic score `(betaᵀ(x_i − x_j))²` separates expert pairs
//! from non-pairs, grows the training set from unpaired pools, and matches a held-out
//! object set greedily under a score threshold. A simulation lab reproduces the
//! synthetic experiment designs used to benchmark the method against classical matchers.

pub mod baselines;
pub mod dataset;
pub mod eigen;
pub mod error;
pub mod fit;
pub mod matcher;
pub mod params;
pub mod rng;
pub mod score;
pub mod simlab;

pub use dataset::{Group, Observation, SemiDataset};
pub use eigen::{subspace_dist, top_generalized_eigvec};
pub use error::{Result, ScotomaError};
pub use fit::{fit_canonical, fit_initial, fit_self_taught, FitState};
pub use matcher::{greedy_match, matching_accuracy, ExpertPairing, Matching, PairScorer};
pub use params::{Epsilon, HyperParams};
pub use score::{build_scatter, objective_g, ScatterPair, WeightVector};
