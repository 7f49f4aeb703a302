//! Quadratic score, pair-graph adjacency, scatter matrices and the ratio objective.
//!
//! For a weight vector `beta` the score between two observations is
//! `S(x_i, x_j) = (betaᵀ(x_i − x_j))²`. Training pairs define two graphs on the
//! `2ℓ` training rows (controls first, then treatments): the within-pair graph joins
//! each control to its partner, the between-pair graph joins every control to every
//! treatment that is not its partner. Summing scores over the edges of each graph gives
//! the quadratic forms `betaᵀ(Σ_w − λI)beta` and `betaᵀ Σ_b beta`.
//!
//! Edges are counted once (unordered). Summing over ordered index pairs would double
//! both forms and only rescale the effective ridge.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Result, ScotomaError};

/// Unit-norm variable-importance vector.
///
/// The sign is fixed so that the entry of largest magnitude is nonnegative, ties going
/// to the lowest index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector {
    beta: Vec<f64>,
}

impl WeightVector {
    /// Normalizes `v` to unit length and applies the sign convention.
    pub fn new(mut v: Vec<f64>) -> Result<Self> {
        if v.is_empty() {
            return Err(ScotomaError::Data("weight vector is empty".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(ScotomaError::Numerical("weight vector is not finite".into()));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(ScotomaError::Numerical("weight vector is zero".into()));
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (k, x)| if x.abs() > v[best].abs() { k } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(WeightVector { beta: v })
    }

    /// Like [`WeightVector::new`], but keeps the magnitudes of `v` bit for bit when it
    /// is already unit length (within 1e-12). Used when reloading saved weights.
    pub fn from_saved(mut v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.is_empty() || !v.iter().all(|x| x.is_finite()) || (norm - 1.0).abs() > 1e-12 {
            return Self::new(v);
        }
        let lead = v
            .iter()
            .enumerate()
            .fold(0, |best, (k, x)| if x.abs() > v[best].abs() { k } else { best });
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        Ok(WeightVector { beta: v })
    }

    pub fn from_dvector(v: &DVector<f64>) -> Result<Self> {
        Self::new(v.iter().copied().collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.beta
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn len(&self) -> usize {
        self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta.is_empty()
    }

    /// `betaᵀx`
    pub fn project(&self, x: &[f64]) -> f64 {
        self.beta.iter().zip(x).map(|(b, v)| b * v).sum()
    }

    pub fn score(&self, xi: &[f64], xj: &[f64]) -> Result<f64> {
        quadratic_score(&self.beta, xi, xj)
    }

    /// Sup-norm distance to `other` after flipping `other` to the closer sign.
    pub fn aligned_sup_distance(&self, other: &WeightVector) -> f64 {
        let sup = |s: f64| {
            self.beta
                .iter()
                .zip(&other.beta)
                .map(|(a, b)| (a - s * b).abs())
                .fold(0.0, f64::max)
        };
        sup(1.0).min(sup(-1.0))
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = ScotomaError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        WeightVector::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.beta
    }
}

/// `(betaᵀ(x_i − x_j))²` for an arbitrary (not necessarily unit) `beta`.
pub fn quadratic_score(beta: &[f64], xi: &[f64], xj: &[f64]) -> Result<f64> {
    check_dims(beta.len(), xi.len())?;
    check_dims(beta.len(), xj.len())?;
    let proj: f64 = beta
        .iter()
        .zip(xi.iter().zip(xj))
        .map(|(b, (u, v))| b * (u - v))
        .sum();
    Ok(proj * proj)
}

/// Within-pair and between-pair adjacency matrices for `ell` training pairs.
///
/// Rows are ordered controls `0..ell` then treatments `ell..2ell`.
pub fn build_adjacency(ell: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = 2 * ell;
    let within = DMatrix::from_fn(n, n, |i, j| {
        if i.abs_diff(j) == ell {
            1.0
        } else {
            0.0
        }
    });
    let between = DMatrix::from_fn(n, n, |i, j| {
        let cross = (i < ell && j >= ell) || (i >= ell && j < ell);
        if cross && i.abs_diff(j) != ell {
            1.0
        } else {
            0.0
        }
    });
    (within, between)
}

/// Ridge selection for `Σ_w`. Serialized as a number or the string `"auto"`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Ridge {
    Fixed(f64),
    /// `1e-3 · trace(Σ_w − λI) / p`
    #[default]
    Auto,
}

impl Serialize for Ridge {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Ridge::Fixed(v) => s.serialize_f64(*v),
            Ridge::Auto => s.serialize_str("auto"),
        }
    }
}

impl<'de> Deserialize<'de> for Ridge {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Ridge::Fixed(v)),
            Raw::Text(t) if t == "auto" => Ok(Ridge::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "ridge must be a number or \"auto\", got {t:?}"
            ))),
        }
    }
}

pub const AUTO_RIDGE_FACTOR: f64 = 1e-3;

/// Within-pair and between-pair scatter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    sigma_w: DMatrix<f64>,
    sigma_b: DMatrix<f64>,
    ell_dot: usize,
    lambda: f64,
}

impl ScatterPair {
    /// Wraps precomputed matrices, checking shape and symmetry.
    pub fn new(
        sigma_w: DMatrix<f64>,
        sigma_b: DMatrix<f64>,
        ell_dot: usize,
        lambda: f64,
    ) -> Result<Self> {
        let p = sigma_w.nrows();
        if sigma_w.ncols() != p || sigma_b.nrows() != p || sigma_b.ncols() != p {
            return Err(ScotomaError::Data("scatter matrices must be square and equal-sized".into()));
        }
        for m in [&sigma_w, &sigma_b] {
            let scale = m.amax().max(1.0);
            if (m - m.transpose()).amax() > 1e-12 * scale {
                return Err(ScotomaError::Numerical("scatter matrix is not symmetric".into()));
            }
        }
        if !(lambda >= 0.0) {
            return Err(ScotomaError::Config(format!("ridge must be nonnegative, got {lambda}")));
        }
        Ok(ScatterPair {
            sigma_w,
            sigma_b,
            ell_dot,
            lambda,
        })
    }

    pub fn sigma_w(&self) -> &DMatrix<f64> {
        &self.sigma_w
    }

    pub fn sigma_b(&self) -> &DMatrix<f64> {
        &self.sigma_b
    }

    pub fn ell_dot(&self) -> usize {
        self.ell_dot
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn p(&self) -> usize {
        self.sigma_w.nrows()
    }
}

fn rows_to_matrix(rows: &[&[f64]], p: usize) -> Result<DMatrix<f64>> {
    for r in rows {
        check_dims(p, r.len())?;
    }
    Ok(DMatrix::from_fn(rows.len(), p, |i, j| rows[i][j]))
}

/// Builds `Σ_w = λI + (1/ℓ)Σ d_i d_iᵀ` and `Σ_b = Σ_{i≠j} (c_i − t_j)(c_i − t_j)ᵀ`
/// from `ℓ` training pairs `(controls[i], treatments[i])`.
///
/// `Σ_b` is assembled from per-group second moments of the centred rows rather than
/// the explicit double loop, which keeps the cost linear in `ℓ`.
pub fn build_scatter(controls: &[&[f64]], treatments: &[&[f64]], ridge: Ridge) -> Result<ScatterPair> {
    let ell = controls.len();
    if ell == 0 {
        return Err(ScotomaError::InsufficientPairs("at least one training pair is required".into()));
    }
    if treatments.len() != ell {
        return Err(ScotomaError::Data(format!(
            "{ell} controls but {} treatments",
            treatments.len()
        )));
    }
    let p = controls[0].len();
    let mut c = rows_to_matrix(controls, p)?;
    let mut t = rows_to_matrix(treatments, p)?;

    // Both forms are translation invariant; centring keeps the moment identity well
    // conditioned when the data sit far from the origin.
    let mean = (c.row_sum() + t.row_sum()) / (2 * ell) as f64;
    for mut row in c.row_iter_mut().chain(t.row_iter_mut()) {
        row -= &mean;
    }

    let d = &c - &t;
    let within = d.transpose() * &d;
    let lambda = match ridge {
        Ridge::Fixed(l) => {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(ScotomaError::Config(format!("ridge must be finite and nonnegative, got {l}")));
            }
            l
        }
        Ridge::Auto => AUTO_RIDGE_FACTOR * within.trace() / (ell as f64 * p as f64),
    };

    let ellf = ell as f64;
    let sc = c.row_sum().transpose();
    let st = t.row_sum().transpose();
    let cross = &sc * st.transpose();
    let mut sigma_b =
        (c.transpose() * &c + t.transpose() * &t) * ellf - &cross - cross.transpose() - &within;
    let mut sigma_w = within / ellf + DMatrix::identity(p, p) * lambda;
    symmetrize(&mut sigma_b);
    symmetrize(&mut sigma_w);

    Ok(ScatterPair {
        sigma_w,
        sigma_b,
        ell_dot: ell,
        lambda,
    })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Ratio objective `g(beta) = betaᵀΣ_b beta / betaᵀΣ_w beta`.
pub fn objective_g(beta: &[f64], sp: &ScatterPair) -> Result<f64> {
    check_dims(sp.p(), beta.len())?;
    if beta.iter().all(|b| *b == 0.0) {
        return Err(ScotomaError::Numerical("objective undefined at beta = 0".into()));
    }
    let b = DVector::from_column_slice(beta);
    let num = b.dot(&(&sp.sigma_b * &b));
    let den = b.dot(&(&sp.sigma_w * &b));
    if !(den > 0.0) {
        return Err(ScotomaError::Numerical("within-pair form is not positive".into()));
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn saved_unit_vector_keeps_its_bits() {
        let w = WeightVector::new(vec![0.3, -1.2, 0.5, 0.01]).unwrap();
        let back = WeightVector::from_saved(w.as_slice().to_vec()).unwrap();
        assert_eq!(back.as_slice(), w.as_slice());
        // wrong sign is flipped exactly, non-unit input is normalized
        let flipped = WeightVector::from_saved(w.as_slice().iter().map(|x| -x).collect()).unwrap();
        assert_eq!(flipped.as_slice(), w.as_slice());
        let scaled = WeightVector::from_saved(vec![0.0, 2.0]).unwrap();
        assert_eq!(scaled.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn score_basics() {
        let e1 = [1.0, 0.0, 0.0];
        assert_eq!(quadratic_score(&e1, &[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert_eq!(quadratic_score(&e1, &[2.0, 7.0, -3.0], &[0.0, 0.0, 0.0]).unwrap(), 4.0);
        let b = [0.3, -1.2, 0.5];
        let b2: Vec<f64> = b.iter().map(|v| 2.0 * v).collect();
        let (x, y) = ([1.0, 0.5, -2.0], [0.1, 0.2, 0.3]);
        let s1 = quadratic_score(&b, &x, &y).unwrap();
        let s2 = quadratic_score(&b2, &x, &y).unwrap();
        assert_relative_eq!(s2, 4.0 * s1, max_relative = 1e-14);
        assert!(quadratic_score(&b, &x, &[1.0]).is_err());
    }

    #[test]
    fn weight_vector_sign_and_norm() {
        let w = WeightVector::new(vec![0.5, -3.0, 1.0]).unwrap();
        let n: f64 = w.as_slice().iter().map(|v| v * v).sum();
        assert_relative_eq!(n, 1.0, epsilon = 1e-12);
        assert!(w.as_slice()[1] > 0.0);
        // tie on magnitude goes to the lowest index
        let t = WeightVector::new(vec![-1.0, 1.0]).unwrap();
        assert!(t.as_slice()[0] > 0.0);
        assert!(WeightVector::new(vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn adjacency_small_cases() {
        let (w, b) = build_adjacency(1);
        assert_eq!(w, DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
        assert_eq!(b, DMatrix::zeros(2, 2));
        for ell in [2usize, 3, 5] {
            let (w, b) = build_adjacency(ell);
            for i in 0..2 * ell {
                assert_eq!(w.row(i).sum(), 1.0);
                assert_eq!(b.row(i).sum(), (ell - 1) as f64);
                assert_eq!(w[(i, i)], 0.0);
                assert_eq!(b[(i, i)], 0.0);
            }
            assert_eq!(w, w.transpose());
            assert_eq!(b, b.transpose());
        }
    }

    #[test]
    fn scatter_single_pair() {
        let c: [&[f64]; 1] = [&[1.0, 0.0]];
        let t: [&[f64]; 1] = [&[0.0, 0.0]];
        let sp = build_scatter(&c, &t, Ridge::Fixed(0.5)).unwrap();
        assert_relative_eq!(sp.sigma_w()[(0, 0)], 1.5, epsilon = 1e-15);
        assert_relative_eq!(sp.sigma_w()[(1, 1)], 0.5, epsilon = 1e-15);
        assert_relative_eq!(sp.sigma_w()[(0, 1)], 0.0, epsilon = 1e-15);
        assert!(sp.sigma_b().amax() < 1e-15);
        assert!(build_scatter(&[], &[], Ridge::Auto).is_err());
    }

    #[test]
    fn scatter_two_pairs_matches_explicit_cross_terms() {
        let c: [&[f64]; 2] = [&[1.0, 2.0], &[-0.5, 0.3]];
        let t: [&[f64]; 2] = [&[0.2, 1.0], &[0.7, -1.1]];
        let sp = build_scatter(&c, &t, Ridge::Fixed(0.0)).unwrap();
        let mut expect = DMatrix::zeros(2, 2);
        for (ci, tj) in [(0usize, 1usize), (1, 0)] {
            let e = DVector::from_fn(2, |k, _| c[ci][k] - t[tj][k]);
            expect += &e * e.transpose();
        }
        assert!((sp.sigma_b() - expect).amax() < 1e-12);
    }

    #[test]
    fn collinear_diffs_without_ridge_are_singular() {
        let c: [&[f64]; 2] = [&[1.0, 1.0], &[2.0, 2.0]];
        let t: [&[f64]; 2] = [&[0.0, 0.0], &[0.0, 0.0]];
        let sp = build_scatter(&c, &t, Ridge::Fixed(0.0)).unwrap();
        assert!(sp.sigma_w().determinant().abs() < 1e-12);
    }

    #[test]
    fn objective_cases() {
        let sp = ScatterPair::new(
            DMatrix::identity(2, 2),
            DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 1.0])),
            2,
            0.0,
        )
        .unwrap();
        assert_relative_eq!(objective_g(&[1.0, 0.0], &sp).unwrap(), 3.0);
        assert_relative_eq!(objective_g(&[0.0, 1.0], &sp).unwrap(), 1.0);
        let b = [0.3, -0.8];
        let b5 = [1.5, -4.0];
        assert_relative_eq!(
            objective_g(&b, &sp).unwrap(),
            objective_g(&b5, &sp).unwrap(),
            max_relative = 1e-12
        );
        assert!(objective_g(&[0.0, 0.0], &sp).is_err());

        let c: [&[f64]; 1] = [&[1.0, 4.0]];
        let t: [&[f64]; 1] = [&[0.0, 2.0]];
        let single = build_scatter(&c, &t, Ridge::Fixed(0.1)).unwrap();
        assert_eq!(objective_g(&[0.6, 0.8], &single).unwrap(), 0.0);
    }

    #[test]
    fn ridge_deserializes_from_number_or_auto() {
        let r: Ridge = serde_json::from_str("0.25").unwrap();
        assert_eq!(r, Ridge::Fixed(0.25));
        let r: Ridge = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(r, Ridge::Auto);
        assert!(serde_json::from_str::<Ridge>("\"nope\"").is_err());
    }
}
