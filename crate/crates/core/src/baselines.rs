//! Competing matchers: Euclidean, Mahalanobis, propensity score and RCA-whitened distance.
//! Each one implements [`PairScorer`] and feeds the shared greedy matcher.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::dataset::SemiDataset;
use crate::error::{check_dims, Result, ScotomaError};
use crate::matcher::PairScorer;

/// Relative size of the stabilizing ridge, as a fraction of `trace/p`.
pub const METRIC_RIDGE: f64 = 1e-8;
/// L2 penalty on the logistic coefficients (intercept excluded).
pub const PROPENSITY_RIDGE: f64 = 1e-4;
const PROPENSITY_TOL: f64 = 1e-8;
const PROPENSITY_MAX_PASSES: usize = 100;

/// Squared Euclidean distance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl PairScorer for Euclidean {
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64 {
        control.iter().zip(treatment).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

pub fn euclidean_scorer() -> Euclidean {
    Euclidean
}

/// `dᵀM⁻¹d` for a fixed positive-definite `M`, evaluated as `‖L⁻¹d‖²` with `M = LLᵀ`.
#[derive(Debug, Clone, Serialize)]
pub struct MetricScorer {
    #[serde(skip)]
    whitener: DMatrix<f64>,
    /// Ridge added to `M` because it was singular, if any.
    pub ridge_added: Option<f64>,
}

impl MetricScorer {
    /// Builds the scorer for the metric `m`. When `m` is singular and `allow_ridge` is set,
    /// `METRIC_RIDGE·trace/p` is added to the diagonal.
    pub fn from_matrix(mut m: DMatrix<f64>, allow_ridge: bool, what: &str) -> Result<MetricScorer> {
        let p = m.nrows();
        check_dims(p, m.ncols())?;
        if p == 0 {
            return Err(ScotomaError::Data(format!("{what}: empty covariance")));
        }
        let spec = SymmetricEigen::new(m.clone()).eigenvalues;
        let (lo, hi) = (spec.min(), spec.max());
        let mut ridge_added = None;
        if !(lo > 1e-12 * hi.abs()) {
            if !allow_ridge {
                return Err(ScotomaError::Numerical(format!(
                    "{what} is singular; enable the ridge or supply more observations than covariates"
                )));
            }
            let r = METRIC_RIDGE * m.trace() / p as f64;
            if !(r > 0.0) {
                return Err(ScotomaError::Numerical(format!("{what} is zero")));
            }
            for k in 0..p {
                m[(k, k)] += r;
            }
            ridge_added = Some(r);
        }
        let chol =
            Cholesky::new(m).ok_or_else(|| ScotomaError::Numerical(format!("{what} is not positive definite")))?;
        let whitener = chol
            .l()
            .solve_lower_triangular(&DMatrix::identity(p, p))
            .ok_or_else(|| ScotomaError::Numerical(format!("{what}: triangular solve failed")))?;
        Ok(MetricScorer { whitener, ridge_added })
    }

    fn whiten(&self, x: &[f64]) -> DVector<f64> {
        &self.whitener * DVector::from_column_slice(x)
    }
}

impl PairScorer for MetricScorer {
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64 {
        let d: Vec<f64> = control.iter().zip(treatment).map(|(a, b)| a - b).collect();
        self.whiten(&d).norm_squared()
    }

    fn score_table(&self, controls: &[&[f64]], treatments: &[&[f64]]) -> Vec<f64> {
        let wt: Vec<DVector<f64>> = treatments.iter().map(|t| self.whiten(t)).collect();
        let mut out = Vec::with_capacity(controls.len() * treatments.len());
        for c in controls {
            let wc = self.whiten(c);
            out.extend(wt.iter().map(|t| (&wc - t).norm_squared()));
        }
        out
    }
}

/// Mahalanobis distance under the sample covariance (divisor `n − 1`) of `sample`.
pub fn mahalanobis_scorer(sample: &[&[f64]], allow_ridge: bool) -> Result<MetricScorer> {
    let n = sample.len();
    if n < 2 {
        return Err(ScotomaError::InsufficientPairs(format!(
            "sample covariance needs at least 2 observations, got {n}"
        )));
    }
    let p = sample[0].len();
    let mut mean = DVector::zeros(p);
    for x in sample {
        check_dims(p, x.len())?;
        mean += DVector::from_column_slice(x);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(p, p);
    for x in sample {
        let d = DVector::from_column_slice(x) - &mean;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    MetricScorer::from_matrix(cov, allow_ridge, "sample covariance")
}

/// Relevant component analysis: whitening by the mean outer product of the paired
/// differences, `Ĉ = (1/ℓ)Σ d dᵀ`.
pub fn rca_scorer(controls: &[&[f64]], treatments: &[&[f64]], allow_ridge: bool) -> Result<MetricScorer> {
    check_dims(controls.len(), treatments.len())?;
    let ell = controls.len();
    if ell == 0 {
        return Err(ScotomaError::InsufficientPairs("RCA needs at least one training pair".into()));
    }
    let p = controls[0].len();
    let mut c = DMatrix::zeros(p, p);
    for (x, y) in controls.iter().zip(treatments) {
        check_dims(p, x.len())?;
        check_dims(p, y.len())?;
        let d = DVector::from_fn(p, |k, _| x[k] - y[k]);
        c += &d * d.transpose();
    }
    c /= ell as f64;
    MetricScorer::from_matrix(c, allow_ridge, "paired-difference covariance")
}

/// Ridge-penalized logistic regression of treatment membership on the covariates.
#[derive(Debug, Clone, Serialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coef: Vec<f64>,
    pub passes: usize,
    pub converged: bool,
    /// The fitted linear predictor separates the groups perfectly; the estimate exists
    /// only because of the ridge.
    pub separated: bool,
}

impl PropensityModel {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.intercept + self.coef.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    pub fn probability(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-self.logit(x)).exp())
    }
}

impl PairScorer for PropensityModel {
    /// `|logit(p̂_i) − logit(p̂_j)|`; the intercept cancels.
    fn pair_score(&self, control: &[f64], treatment: &[f64]) -> f64 {
        self.coef
            .iter()
            .zip(control.iter().zip(treatment))
            .map(|(b, (c, t))| b * (c - t))
            .sum::<f64>()
            .abs()
    }

    fn score_table(&self, controls: &[&[f64]], treatments: &[&[f64]]) -> Vec<f64> {
        let lt: Vec<f64> = treatments.iter().map(|t| self.logit(t)).collect();
        let mut out = Vec::with_capacity(controls.len() * treatments.len());
        for c in controls {
            let lc = self.logit(c);
            out.extend(lt.iter().map(|t| (lc - t).abs()));
        }
        out
    }
}

/// Penalized log-likelihood maximized by [`fit_logistic`].
pub fn penalized_loglik(x: &[&[f64]], y: &[bool], intercept: f64, coef: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let eta = intercept + coef.iter().zip(*xi).map(|(b, v)| b * v).sum::<f64>();
        // log σ(η) = −log(1 + e^{−η}), written stably
        let s = if yi { eta } else { -eta };
        ll -= if s > 0.0 { (-s).exp().ln_1p() } else { -s + s.exp().ln_1p() };
    }
    ll - 0.5 * PROPENSITY_RIDGE * coef.iter().map(|b| b * b).sum::<f64>()
}

/// Newton iterations with step halving on the penalized log-likelihood.
pub fn fit_logistic(x: &[&[f64]], y: &[bool]) -> Result<PropensityModel> {
    check_dims(x.len(), y.len())?;
    let n_t = y.iter().filter(|v| **v).count();
    if n_t == 0 || n_t == y.len() {
        return Err(ScotomaError::Data("propensity model needs both groups".into()));
    }
    let p = x[0].len();
    let q = p + 1;
    let mut theta = DVector::zeros(q);
    let row = |i: usize| DVector::from_fn(q, |k, _| if k == 0 { 1.0 } else { x[i][k - 1] });
    let rows: Vec<DVector<f64>> = (0..x.len()).map(row).collect();
    let objective = |t: &DVector<f64>| penalized_loglik(x, y, t[0], &t.as_slice()[1..]);

    let mut passes = 0;
    let mut converged = false;
    let mut current = objective(&theta);
    while passes < PROPENSITY_MAX_PASSES {
        passes += 1;
        let mut grad = DVector::zeros(q);
        let mut hess = DMatrix::zeros(q, q);
        for (r, &yi) in rows.iter().zip(y) {
            let eta = r.dot(&theta);
            let pr = 1.0 / (1.0 + (-eta).exp());
            grad += r * (f64::from(u8::from(yi)) - pr);
            hess += (r * r.transpose()) * (pr * (1.0 - pr));
        }
        for k in 1..q {
            grad[k] -= PROPENSITY_RIDGE * theta[k];
            hess[(k, k)] += PROPENSITY_RIDGE;
        }
        // the intercept is unpenalized; keep the system solvable when all weights vanish
        hess[(0, 0)] += 1e-12;
        let step = Cholesky::new(hess)
            .map(|c| c.solve(&grad))
            .ok_or_else(|| ScotomaError::Numerical("propensity Hessian is not positive definite".into()))?;

        let mut scale = 1.0;
        let mut next = &theta + &step;
        let mut value = objective(&next);
        while !(value >= current) && scale > 1e-10 {
            scale *= 0.5;
            next = &theta + &step * scale;
            value = objective(&next);
        }
        let change = (&next - &theta).amax();
        theta = next;
        current = value.max(current);
        if change < PROPENSITY_TOL {
            converged = true;
            break;
        }
    }

    let mut model = PropensityModel {
        intercept: theta[0],
        coef: theta.as_slice()[1..].to_vec(),
        passes,
        converged,
        separated: false,
    };
    let mut min_t = f64::INFINITY;
    let mut max_c = f64::NEG_INFINITY;
    for (xi, &yi) in x.iter().zip(y) {
        let l = model.logit(xi);
        if yi {
            min_t = min_t.min(l);
        } else {
            max_c = max_c.max(l);
        }
    }
    model.separated = min_t > max_c;
    Ok(model)
}

/// Propensity model fitted on every observation of `d`, treatment as the positive class.
pub fn propensity_scorer(d: &SemiDataset) -> Result<PropensityModel> {
    let (x, y): (Vec<&[f64]>, Vec<bool>) = d
        .observations()
        .map(|o| (o.x.as_slice(), o.group == crate::dataset::Group::Treatment))
        .unzip();
    fit_logistic(&x, &y)
}
