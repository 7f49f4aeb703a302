use serde::{Deserialize, Serialize};

use crate::error::{Result, ScotomaError};
pub use crate::score::Ridge;

/// Acceptance threshold for the final matching.
///
/// Serialized as a positive number, `"auto"`, or `"none"` / `null` for no threshold.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Epsilon {
    Value(f64),
    /// Largest within-pair score of the final training pairs under the fitted weights.
    Auto,
    #[default]
    Unbounded,
}

impl Serialize for Epsilon {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Epsilon::Value(v) => s.serialize_f64(*v),
            Epsilon::Auto => s.serialize_str("auto"),
            Epsilon::Unbounded => s.serialize_str("none"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
            Null(()),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Epsilon::Value(v)),
            Raw::Text(t) => Epsilon::parse(&t).map_err(serde::de::Error::custom),
            Raw::Null(()) => Ok(Epsilon::Unbounded),
        }
    }
}

impl Epsilon {
    /// Parses `auto`, `none`, `inf` or a number.
    pub fn parse(s: &str) -> std::result::Result<Epsilon, String> {
        match s.trim() {
            "auto" => Ok(Epsilon::Auto),
            "none" | "inf" | "infinity" => Ok(Epsilon::Unbounded),
            other => other
                .parse::<f64>()
                .map(|v| if v.is_infinite() && v > 0.0 { Epsilon::Unbounded } else { Epsilon::Value(v) })
                .map_err(|_| format!("epsilon must be a number, \"auto\" or \"none\", got {other:?}")),
        }
    }
}

/// Tuning parameters of the fitting loops.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    /// Ridge added to the within-pair scatter.
    pub lambda: Ridge,
    /// Pairs absorbed from the unpaired pools per iteration; `None` means `max(1, ℓ/5)`.
    pub tau1: Option<usize>,
    /// Pairs absorbed from the object set per iteration (self-taught mode only).
    pub tau2: usize,
    /// Convergence threshold on the sup-norm change of the weights.
    pub delta0: f64,
    pub epsilon: Epsilon,
    pub max_iters: usize,
    /// Run the leave-one-out exclusion filter on each inclusion batch.
    pub exclusion: bool,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            lambda: Ridge::Auto,
            tau1: None,
            tau2: 0,
            delta0: 1e-4,
            epsilon: Epsilon::Unbounded,
            max_iters: 100,
            exclusion: false,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if let Ridge::Fixed(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(ScotomaError::Config(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if self.tau1 == Some(0) {
            return Err(ScotomaError::Config("tau1 must be at least 1".into()));
        }
        if !(self.delta0 >= 0.0) {
            return Err(ScotomaError::Config(format!("delta0 must be >= 0, got {}", self.delta0)));
        }
        if self.max_iters == 0 {
            return Err(ScotomaError::Config("max_iters must be at least 1".into()));
        }
        if let Epsilon::Value(e) = self.epsilon {
            if !(e > 0.0) {
                return Err(ScotomaError::Config(format!("epsilon must be > 0, got {e}")));
            }
        }
        Ok(())
    }

    pub fn tau1_for(&self, ell_dot: usize) -> usize {
        self.tau1.unwrap_or((ell_dot / 5).max(1))
    }
}
