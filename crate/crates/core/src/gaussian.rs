//! Multivariate normal distributions.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, chol_log_det, robust_cholesky};

/// A multivariate normal in covariance form. The Cholesky factor is cached,
/// and the covariance is the (possibly jittered) matrix it factors.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "GaussianRepr", into = "GaussianRepr")]
pub struct Gaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

/// Wire form: mean vector plus row-major covariance rows.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussianRepr {
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
}

impl TryFrom<GaussianRepr> for Gaussian {
    type Error = Error;

    fn try_from(r: GaussianRepr) -> Result<Self> {
        Gaussian::new(DVector::from_vec(r.mean), linalg::from_rows(&r.covariance)?)
    }
}

impl From<Gaussian> for GaussianRepr {
    fn from(g: Gaussian) -> Self {
        GaussianRepr { mean: g.mean.iter().copied().collect(), covariance: linalg::to_rows(&g.cov) }
    }
}

impl PartialEq for Gaussian {
    fn eq(&self, other: &Self) -> bool {
        self.mean == other.mean && self.cov == other.cov
    }
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::dim(mean.len(), cov.nrows()));
        }
        if mean.len() == 0 {
            return Err(Error::arg("zero-dimensional Gaussian"));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean".into()));
        }
        let sym = linalg::symmetrize(&cov)?;
        let (chol, cov) = robust_cholesky(&sym, "Gaussian covariance")?;
        let log_det = chol_log_det(&chol);
        Ok(Gaussian { mean, cov, chol, log_det })
    }

    pub fn from_slices(mean: &[f64], cov_row_major: &[f64]) -> Result<Self> {
        let d = mean.len();
        if cov_row_major.len() != d * d {
            return Err(Error::dim(d * d, cov_row_major.len()));
        }
        Gaussian::new(DVector::from_column_slice(mean), DMatrix::from_row_slice(d, d, cov_row_major))
    }

    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Gaussian::new(DVector::from_column_slice(mean), DMatrix::identity(d, d) * variance)
    }

    /// Standard normal in `d` dimensions.
    pub fn standard(d: usize) -> Self {
        Gaussian::new(DVector::zeros(d), DMatrix::identity(d, d)).expect("identity is SPD")
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn cholesky(&self) -> &Cholesky<f64, Dyn> {
        &self.chol
    }

    /// `log |Σ|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn precision(&self) -> DMatrix<f64> {
        let inv = self.chol.inverse();
        (&inv + inv.transpose()) * 0.5
    }

    pub fn mahalanobis_sq(&self, x: &DVector<f64>) -> f64 {
        linalg::chol_quad_form(&self.chol, &(x - &self.mean))
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::dim(self.dim(), x.len()));
        }
        Ok(self.log_density_unchecked(x))
    }

    pub(crate) fn log_density_unchecked(&self, x: &DVector<f64>) -> f64 {
        let d = self.dim() as f64;
        -0.5 * (d * (2.0 * PI).ln() + self.log_det + self.mahalanobis_sq(x))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.mean + self.chol.l_dirty().lower_triangle() * z
    }

    /// Affine image `A x + b`.
    pub fn affine(&self, a: &DMatrix<f64>, b: &DVector<f64>) -> Result<Gaussian> {
        if a.ncols() != self.dim() {
            return Err(Error::dim(self.dim(), a.ncols()));
        }
        if b.len() != a.nrows() {
            return Err(Error::dim(a.nrows(), b.len()));
        }
        Gaussian::new(a * &self.mean + b, a * &self.cov * a.transpose())
    }

    /// Marginal over the listed dimensions, in the listed order.
    pub fn marginal(&self, dims: &[usize]) -> Result<Gaussian> {
        check_dims(dims, self.dim())?;
        let mean = DVector::from_fn(dims.len(), |i, _| self.mean[dims[i]]);
        let cov = DMatrix::from_fn(dims.len(), dims.len(), |i, j| self.cov[(dims[i], dims[j])]);
        Gaussian::new(mean, cov)
    }
}

fn check_dims(dims: &[usize], d: usize) -> Result<()> {
    for (i, &k) in dims.iter().enumerate() {
        if k >= d {
            return Err(Error::arg(format!("dimension index {k} out of range for d={d}")));
        }
        if dims[..i].contains(&k) {
            return Err(Error::arg(format!("dimension index {k} repeated")));
        }
    }
    Ok(())
}

/// Product of two Gaussian densities. Returns the normalised product and the
/// log of the scale such that `N_a(x) N_b(x) = exp(log_scale) N_result(x)`,
/// which equals `log N(μ_a; μ_b, Σ_a + Σ_b)`.
pub fn gaussian_product(a: &Gaussian, b: &Gaussian) -> Result<(Gaussian, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::dim(a.dim(), b.dim()));
    }
    let pa = a.precision();
    let pb = b.precision();
    let prec = &pa + &pb;
    let cov = linalg::spd_inverse(&prec, "product precision")?;
    let info = &pa * &a.mean + &pb * &b.mean;
    let mean = &cov * info;
    let log_scale = log_normal_overlap(&a.mean, &a.cov, &b.mean, &b.cov)?;
    Ok((Gaussian::new(mean, cov)?, log_scale))
}

/// `log ∫ N(x; μ_a, Σ_a) N(x; μ_b, Σ_b) dx = log N(μ_a; μ_b, Σ_a + Σ_b)`.
pub fn log_normal_overlap(
    mean_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mean_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64> {
    let s = cov_a + cov_b;
    let (c, _) = robust_cholesky(&s, "overlap covariance")?;
    let diff = mean_a - mean_b;
    let d = diff.len() as f64;
    Ok(-0.5 * (d * (2.0 * PI).ln() + chol_log_det(&c) + linalg::chol_quad_form(&c, &diff)))
}

/// Conditions a joint Gaussian on the listed input dimensions taking value
/// `x_in`. The result lives on the remaining dimensions in ascending order.
pub fn gaussian_condition(joint: &Gaussian, input_dims: &[usize], x_in: &DVector<f64>) -> Result<Gaussian> {
    let d = joint.dim();
    check_dims(input_dims, d)?;
    if input_dims.is_empty() || input_dims.len() >= d {
        return Err(Error::arg("input dimensions must be a non-empty strict subset"));
    }
    if x_in.len() != input_dims.len() {
        return Err(Error::dim(input_dims.len(), x_in.len()));
    }
    let out: Vec<usize> = (0..d).filter(|k| !input_dims.contains(k)).collect();
    let (ni, no) = (input_dims.len(), out.len());
    let s = joint.covariance();
    let mu = joint.mean();
    let s_ii = DMatrix::from_fn(ni, ni, |a, b| s[(input_dims[a], input_dims[b])]);
    let s_oi = DMatrix::from_fn(no, ni, |a, b| s[(out[a], input_dims[b])]);
    let s_oo = DMatrix::from_fn(no, no, |a, b| s[(out[a], out[b])]);
    let mu_i = DVector::from_fn(ni, |a, _| mu[input_dims[a]]);
    let mu_o = DVector::from_fn(no, |a, _| mu[out[a]]);

    let (c_ii, _) = robust_cholesky(&s_ii, "conditioning input block")?;
    // gain = Σ_oi Σ_ii^{-1}
    let gain = c_ii.solve(&s_oi.transpose()).transpose();
    let mean = mu_o + &gain * (x_in - mu_i);
    let cov = s_oo - &gain * s_oi.transpose();
    Gaussian::new(mean, cov)
}
