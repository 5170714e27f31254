//! Gaussian and Student-t mixtures.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{self, chol_log_det, log_sum_exp, robust_cholesky};

/// Tolerance on the weight simplex.
pub const WEIGHT_TOL: f64 = 1e-9;

fn validate_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::InvalidWeights("empty mixture".into()));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidWeights(format!("negative or non-finite weight in {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOL {
        return Err(Error::InvalidWeights(format!("weights sum to {total}")));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Gaussian mixture model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmRepr", into = "GmmRepr")]
pub struct Gmm {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GmmRepr {
    pub weights: Vec<f64>,
    pub components: Vec<Gaussian>,
}

impl TryFrom<GmmRepr> for Gmm {
    type Error = Error;
    fn try_from(r: GmmRepr) -> Result<Self> {
        Gmm::new(r.weights, r.components)
    }
}

impl From<Gmm> for GmmRepr {
    fn from(g: Gmm) -> Self {
        GmmRepr { weights: g.weights, components: g.components }
    }
}

impl Gmm {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self> {
        if weights.len() != components.len() {
            return Err(Error::dim(components.len(), weights.len()));
        }
        let weights = validate_weights(&weights)?;
        let d = components[0].dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::dim(d, bad.dim()));
        }
        Ok(Gmm { weights, components })
    }

    /// Builds a mixture from unnormalised log weights.
    pub fn from_log_weights(log_weights: &[f64], components: Vec<Gaussian>) -> Result<Self> {
        let lse = log_sum_exp(log_weights);
        if !lse.is_finite() {
            return Err(Error::InvalidWeights("all log weights are -inf".into()));
        }
        Gmm::new(log_weights.iter().map(|l| (l - lse).exp()).collect(), components)
    }

    pub fn single(g: Gaussian) -> Self {
        Gmm { weights: vec![1.0], components: vec![g] }
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    pub fn mean(&self) -> DVector<f64> {
        self.weights
            .iter()
            .zip(&self.components)
            .fold(DVector::zeros(self.dim()), |acc, (w, c)| acc + c.mean() * *w)
    }

    /// Mixture covariance (law of total variance).
    pub fn covariance(&self) -> DMatrix<f64> {
        let mu = self.mean();
        let d = self.dim();
        self.weights.iter().zip(&self.components).fold(DMatrix::zeros(d, d), |acc, (w, c)| {
            let diff = c.mean() - &mu;
            acc + (c.covariance() + &diff * diff.transpose()) * *w
        })
    }
}

/// `log Σ_k π_k N(x | μ_k, Σ_k)` with log-sum-exp stabilisation.
pub fn gmm_log_density(g: &Gmm, x: &DVector<f64>) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(Error::dim(g.dim(), x.len()));
    }
    let terms: Vec<f64> = g
        .weights
        .iter()
        .zip(&g.components)
        .map(|(w, c)| w.ln() + c.log_density_unchecked(x))
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Index drawn from a categorical distribution given a uniform variate.
pub(crate) fn categorical(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return k;
        }
    }
    // Round-off at the top of the simplex: last component with positive weight.
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Draws `n` samples. Deterministic in `seed`.
pub fn gmm_sample(g: &Gmm, seed: u64, n: usize) -> Result<Vec<DVector<f64>>> {
    if n == 0 {
        return Err(Error::arg("sample count must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| gmm_sample_one(g, &mut rng)).collect())
}

pub fn gmm_sample_one<R: Rng + ?Sized>(g: &Gmm, rng: &mut R) -> DVector<f64> {
    let k = categorical(&g.weights, rng.random::<f64>());
    g.components[k].sample(rng)
}

/// One multivariate Student-t component, with the scale in covariance form.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "StudentTRepr", into = "StudentTRepr")]
pub struct StudentTComponent {
    mean: DVector<f64>,
    scale: DMatrix<f64>,
    dof: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentTRepr {
    pub mean: Vec<f64>,
    pub scale: Vec<Vec<f64>>,
    pub dof: f64,
}

impl TryFrom<StudentTRepr> for StudentTComponent {
    type Error = Error;
    fn try_from(r: StudentTRepr) -> Result<Self> {
        StudentTComponent::new(DVector::from_vec(r.mean), linalg::from_rows(&r.scale)?, r.dof)
    }
}

impl From<StudentTComponent> for StudentTRepr {
    fn from(t: StudentTComponent) -> Self {
        StudentTRepr { mean: t.mean.iter().copied().collect(), scale: linalg::to_rows(&t.scale), dof: t.dof }
    }
}

impl StudentTComponent {
    pub fn new(mean: DVector<f64>, scale: DMatrix<f64>, dof: f64) -> Result<Self> {
        if scale.nrows() != mean.len() {
            return Err(Error::dim(mean.len(), scale.nrows()));
        }
        if !(dof > 0.0) || !dof.is_finite() {
            return Err(Error::DofTooSmall { component: 0, dof, min: 0.0 });
        }
        let sym = linalg::symmetrize(&scale)?;
        let (chol, scale) = robust_cholesky(&sym, "Student-t scale")?;
        let log_det = chol_log_det(&chol);
        Ok(StudentTComponent { mean, scale, dof, chol, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn scale(&self) -> &DMatrix<f64> {
        &self.scale
    }

    pub fn dof(&self) -> f64 {
        self.dof
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim(self.dim(), x.len()));
        }
        let maha = linalg::chol_quad_form(&self.chol, &(x - &self.mean));
        Ok(student_t_log_density_from_parts(self.dim(), self.dof, self.log_det, maha))
    }
}

/// Multivariate t log density given `log|scale|` and the squared Mahalanobis
/// distance under the scale.
pub fn student_t_log_density_from_parts(d: usize, dof: f64, log_det: f64, maha: f64) -> f64 {
    let d = d as f64;
    ln_gamma(0.5 * (dof + d)) - ln_gamma(0.5 * dof) - 0.5 * d * (dof * PI).ln() - 0.5 * log_det
        - 0.5 * (dof + d) * (maha / dof).ln_1p()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "StudentTMixtureRepr", into = "StudentTMixtureRepr")]
pub struct StudentTMixture {
    weights: Vec<f64>,
    components: Vec<StudentTComponent>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StudentTMixtureRepr {
    pub weights: Vec<f64>,
    pub components: Vec<StudentTComponent>,
}

impl TryFrom<StudentTMixtureRepr> for StudentTMixture {
    type Error = Error;
    fn try_from(r: StudentTMixtureRepr) -> Result<Self> {
        StudentTMixture::new(r.weights, r.components)
    }
}

impl From<StudentTMixture> for StudentTMixtureRepr {
    fn from(t: StudentTMixture) -> Self {
        StudentTMixtureRepr { weights: t.weights, components: t.components }
    }
}

impl StudentTMixture {
    pub fn new(weights: Vec<f64>, components: Vec<StudentTComponent>) -> Result<Self> {
        if weights.len() != components.len() {
            return Err(Error::dim(components.len(), weights.len()));
        }
        let weights = validate_weights(&weights)?;
        let d = components[0].dim();
        if let Some(bad) = components.iter().find(|c| c.dim() != d) {
            return Err(Error::dim(d, bad.dim()));
        }
        Ok(StudentTMixture { weights, components })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[StudentTComponent] {
        &self.components
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.components.len());
        for (w, c) in self.weights.iter().zip(&self.components) {
            terms.push(w.ln() + c.log_density(x)?);
        }
        Ok(log_sum_exp(&terms))
    }
}

/// Moment-matched Gaussian mixture: means kept, scales multiplied by
/// `ν / (ν − 2)`, weights copied.
pub fn moment_match_t(t: &StudentTMixture) -> Result<Gmm> {
    let mut comps = Vec::with_capacity(t.components.len());
    for (k, c) in t.components.iter().enumerate() {
        if c.dof <= 2.0 {
            return Err(Error::DofTooSmall { component: k, dof: c.dof, min: 2.0 });
        }
        let factor = c.dof / (c.dof - 2.0);
        comps.push(Gaussian::new(c.mean.clone(), &c.scale * factor)?);
    }
    Ok(Gmm { weights: t.weights.clone(), components: comps })
}
