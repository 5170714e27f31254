//! Variational Bayesian Gaussian mixtures over joint input/output data.
//!
//! The model is the conjugate Dirichlet / Normal–Wishart mixture. Fitting
//! alternates the usual variational E and M steps and tracks the evidence
//! lower bound, which must not decrease. The fitted posterior yields a
//! Student-t predictive mixture, a conditional output policy given an input,
//! and the split of each conditional scale into an input-independent
//! (aleatoric) and an input-dependent (epistemic) part.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{self, serde_matrix, serde_vector, spd_inverse};
use crate::mixture::{student_t_log_density_from_parts, Gmm, StudentTComponent, StudentTMixture};

/// Joint observations `x = [x_in, x_out]`, stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DatasetRepr", into = "DatasetRepr")]
pub struct Dataset {
    d_in: usize,
    d_out: usize,
    data: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRepr {
    pub d_in: usize,
    pub d_out: usize,
    pub points: Vec<Vec<f64>>,
}

impl TryFrom<DatasetRepr> for Dataset {
    type Error = Error;
    fn try_from(r: DatasetRepr) -> Result<Self> {
        let mut ds = Dataset::empty(r.d_in, r.d_out)?;
        for p in &r.points {
            ds.push(p)?;
        }
        Ok(ds)
    }
}

impl From<Dataset> for DatasetRepr {
    fn from(d: Dataset) -> Self {
        DatasetRepr { d_in: d.d_in, d_out: d.d_out, points: d.rows().map(<[f64]>::to_vec).collect() }
    }
}

impl Dataset {
    pub fn empty(d_in: usize, d_out: usize) -> Result<Self> {
        if d_in == 0 || d_out == 0 {
            return Err(Error::arg("input and output dimensions must be positive"));
        }
        Ok(Dataset { d_in, d_out, data: Vec::new() })
    }

    pub fn from_rows(rows: &[Vec<f64>], d_in: usize, d_out: usize) -> Result<Self> {
        let mut ds = Dataset::empty(d_in, d_out)?;
        for r in rows {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim() {
            return Err(Error::dim(self.dim(), row.len()));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset row".into()));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.d_in != self.d_in || other.d_out != self.d_out {
            return Err(Error::dim(self.dim(), other.dim()));
        }
        self.data.extend_from_slice(&other.data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d_in + self.d_out
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    pub fn d_out(&self) -> usize {
        self.d_out
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim())
    }

    pub fn mean(&self) -> DVector<f64> {
        let d = self.dim();
        let mut m = DVector::zeros(d);
        for r in self.rows() {
            for j in 0..d {
                m[j] += r[j];
            }
        }
        m / self.len().max(1) as f64
    }

    /// Per-dimension population variance.
    pub fn variance(&self) -> DVector<f64> {
        let mu = self.mean();
        let d = self.dim();
        let mut v = DVector::zeros(d);
        for r in self.rows() {
            for j in 0..d {
                v[j] += (r[j] - mu[j]).powi(2);
            }
        }
        v / self.len().max(1) as f64
    }

    /// Copy with rows reordered by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Dataset> {
        let mut out = Dataset::empty(self.d_in, self.d_out)?;
        for &i in perm {
            out.push(self.row(i))?;
        }
        Ok(out)
    }
}

/// Normal–Wishart–Dirichlet prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgmmPrior {
    pub alpha0: f64,
    pub beta0: f64,
    #[serde(with = "serde_vector")]
    pub m0: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub w0: DMatrix<f64>,
    pub nu0: f64,
}

impl BgmmPrior {
    pub fn new(alpha0: f64, beta0: f64, m0: DVector<f64>, w0: DMatrix<f64>, nu0: f64) -> Result<Self> {
        let d = m0.len();
        if !(alpha0 > 0.0) || !(beta0 > 0.0) {
            return Err(Error::arg("alpha0 and beta0 must be positive"));
        }
        if w0.nrows() != d || w0.ncols() != d {
            return Err(Error::dim(d, w0.nrows()));
        }
        if !(nu0 > d as f64 - 1.0) {
            return Err(Error::arg(format!("nu0 = {nu0} must exceed D - 1 = {}", d as f64 - 1.0)));
        }
        let w0 = linalg::symmetrize(&w0)?;
        if !linalg::is_positive_definite(&w0) {
            return Err(Error::NotPositiveDefinite { context: "Wishart scale W0".into() });
        }
        Ok(BgmmPrior { alpha0, beta0, m0, w0, nu0 })
    }

    /// Weak, scale-aware default: α₀ = 1e-3, β₀ = 1, m₀ = data mean,
    /// ν₀ = D + 2, W₀ = (diag(var) ν₀)⁻¹.
    pub fn from_data(data: &Dataset) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::arg("default prior needs at least one data point"));
        }
        Self::from_moments(data.mean(), data.variance())
    }

    /// Default prior from a mean and per-dimension variance.
    pub fn from_moments(mean: DVector<f64>, variance: DVector<f64>) -> Result<Self> {
        let d = mean.len();
        let nu0 = d as f64 + 2.0;
        let floor = variance.iter().cloned().fold(0.0f64, f64::max).max(1.0) * 1e-6;
        let w0 = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 / (variance[i].max(floor) * nu0) } else { 0.0 });
        BgmmPrior::new(1e-3, 1.0, mean, w0, nu0)
    }

    pub fn dim(&self) -> usize {
        self.m0.len()
    }
}

/// Variational parameters of one mixture component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorComponent {
    pub alpha: f64,
    pub beta: f64,
    #[serde(with = "serde_vector")]
    pub m: DVector<f64>,
    #[serde(with = "serde_matrix")]
    pub w: DMatrix<f64>,
    pub nu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BgmmPosterior {
    pub prior: BgmmPrior,
    pub d_in: usize,
    pub d_out: usize,
    pub n_points: usize,
    pub components: Vec<PosteriorComponent>,
    pub elbo_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iter: usize,
    /// Convergence threshold on |ΔELBO| per data point.
    pub tol_per_point: f64,
    pub restarts: usize,
    /// Lloyd iterations after k-means++ seeding.
    pub kmeans_iters: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { max_iter: 500, tol_per_point: 1e-6, restarts: 3, kmeans_iters: 10 }
    }
}

impl BgmmPosterior {
    /// Posterior with no data: every component equals the prior.
    pub fn prior_only(prior: BgmmPrior, k: usize, d_in: usize, d_out: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("K must be >= 1"));
        }
        if prior.dim() != d_in + d_out {
            return Err(Error::dim(d_in + d_out, prior.dim()));
        }
        let comp = PosteriorComponent {
            alpha: prior.alpha0,
            beta: prior.beta0,
            m: prior.m0.clone(),
            w: prior.w0.clone(),
            nu: prior.nu0,
        };
        Ok(BgmmPosterior { d_in, d_out, n_points: 0, components: vec![comp; k], elbo_trace: Vec::new(), prior })
    }

    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.d_in + self.d_out
    }

    /// Expected mixing weights `α_k / Σ α`.
    pub fn mixing_weights(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.alpha).sum();
        self.components.iter().map(|c| c.alpha / total).collect()
    }

    /// Number of components whose expected weight exceeds `threshold`.
    pub fn effective_components(&self, threshold: f64) -> usize {
        self.mixing_weights().iter().filter(|w| **w > threshold).count()
    }
}

// ---------------------------------------------------------------------------
// Fitting

struct SuffStats {
    nk: Vec<f64>,
    /// K x D weighted means (prior mean where N_k vanishes).
    xbar: Vec<DVector<f64>>,
    /// K scatter matrices `N_k S_k` about `xbar`.
    scatter: Vec<DMatrix<f64>>,
}

fn suff_stats(data: &Dataset, resp: &[f64], k: usize, m0: &DVector<f64>) -> SuffStats {
    let d = data.dim();
    let n = data.len();
    let mut nk = vec![0.0; k];
    let mut sums = vec![DVector::<f64>::zeros(d); k];
    for i in 0..n {
        let row = data.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            nk[c] += r;
            for j in 0..d {
                sums[c][j] += r * row[j];
            }
        }
    }
    let xbar: Vec<DVector<f64>> = (0..k)
        .map(|c| if nk[c] > 1e-300 { &sums[c] / nk[c] } else { m0.clone() })
        .collect();
    let mut scatter = vec![DMatrix::<f64>::zeros(d, d); k];
    let mut diff = vec![0.0; d];
    for i in 0..n {
        let row = data.row(i);
        for c in 0..k {
            let r = resp[i * k + c];
            if r == 0.0 {
                continue;
            }
            for j in 0..d {
                diff[j] = row[j] - xbar[c][j];
            }
            let s = &mut scatter[c];
            for a in 0..d {
                let ra = r * diff[a];
                for b in a..d {
                    s[(a, b)] += ra * diff[b];
                }
            }
        }
    }
    for s in &mut scatter {
        for a in 0..d {
            for b in 0..a {
                s[(a, b)] = s[(b, a)];
            }
        }
    }
    SuffStats { nk, xbar, scatter }
}

fn m_step(prior: &BgmmPrior, stats: &SuffStats, w0_inv: &DMatrix<f64>) -> Result<Vec<PosteriorComponent>> {
    let k = stats.nk.len();
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let nk = stats.nk[c];
        let beta = prior.beta0 + nk;
        let m = (&prior.m0 * prior.beta0 + &stats.xbar[c] * nk) / beta;
        let dm = &stats.xbar[c] - &prior.m0;
        let w_inv = w0_inv + &stats.scatter[c] + (&dm * dm.transpose()) * (prior.beta0 * nk / beta);
        let w = spd_inverse(&linalg::symmetrize(&w_inv)?, "posterior Wishart scale")?;
        out.push(PosteriorComponent { alpha: prior.alpha0 + nk, beta, m, w, nu: prior.nu0 + nk });
    }
    Ok(out)
}

/// Per-component quantities needed by the E-step and the bound.
struct Expectations {
    log_pi: Vec<f64>,
    log_lambda: Vec<f64>,
    /// Upper factors `U` with `W = Uᵀ U`, row-major.
    upper: Vec<Vec<f64>>,
    log_det_w: Vec<f64>,
}

fn expectations(comps: &[PosteriorComponent]) -> Result<Expectations> {
    let d = comps[0].m.len();
    let alpha_sum: f64 = comps.iter().map(|c| c.alpha).sum();
    let psi_sum = digamma(alpha_sum);
    let mut e = Expectations { log_pi: vec![], log_lambda: vec![], upper: vec![], log_det_w: vec![] };
    for c in comps {
        let (chol, _) = linalg::robust_cholesky(&c.w, "Wishart scale")?;
        let l = chol.l();
        let log_det = linalg::chol_log_det(&chol);
        let mut upper = vec![0.0; d * d];
        for a in 0..d {
            for b in a..d {
                upper[a * d + b] = l[(b, a)];
            }
        }
        let psi: f64 = (1..=d).map(|i| digamma(0.5 * (c.nu + 1.0 - i as f64))).sum();
        e.log_pi.push(digamma(c.alpha) - psi_sum);
        e.log_lambda.push(psi + d as f64 * std::f64::consts::LN_2 + log_det);
        e.upper.push(upper);
        e.log_det_w.push(log_det);
    }
    Ok(e)
}

/// Fills `resp` (N x K row-major) with normalised responsibilities.
fn e_step(data: &Dataset, comps: &[PosteriorComponent], e: &Expectations, resp: &mut [f64]) {
    let d = data.dim();
    let k = comps.len();
    let half_log_2pi = 0.5 * d as f64 * (2.0 * PI).ln();
    let mut diff = vec![0.0; d];
    let mut logr = vec![0.0; k];
    for i in 0..data.len() {
        let row = data.row(i);
        for c in 0..k {
            let comp = &comps[c];
            for j in 0..d {
                diff[j] = row[j] - comp.m[j];
            }
            let u = &e.upper[c];
            let mut q = 0.0;
            for a in 0..d {
                let mut s = 0.0;
                for b in a..d {
                    s += u[a * d + b] * diff[b];
                }
                q += s * s;
            }
            let e_maha = d as f64 / comp.beta + comp.nu * q;
            logr[c] = e.log_pi[c] + 0.5 * e.log_lambda[c] - half_log_2pi - 0.5 * e_maha;
        }
        let lse = linalg::log_sum_exp(&logr);
        for c in 0..k {
            resp[i * k + c] = (logr[c] - lse).exp();
        }
    }
}

fn ln_wishart_norm(log_det_w: f64, nu: f64, d: usize) -> f64 {
    let df = d as f64;
    let mut v = -0.5 * nu * log_det_w - 0.5 * nu * df * std::f64::consts::LN_2 - 0.25 * df * (df - 1.0) * PI.ln();
    for i in 1..=d {
        v -= ln_gamma(0.5 * (nu + 1.0 - i as f64));
    }
    v
}

fn ln_dirichlet_norm(alphas: &[f64]) -> f64 {
    ln_gamma(alphas.iter().sum()) - alphas.iter().map(|a| ln_gamma(*a)).sum::<f64>()
}

/// Evidence lower bound for the current responsibilities and parameters.
fn elbo(
    data: &Dataset,
    prior: &BgmmPrior,
    comps: &[PosteriorComponent],
    resp: &[f64],
    w0_inv: &DMatrix<f64>,
    log_det_w0: f64,
) -> Result<f64> {
    let k = comps.len();
    let d = data.dim();
    let df = d as f64;
    let e = expectations(comps)?;
    let stats = suff_stats(data, resp, k, &prior.m0);

    let mut lik = 0.0;
    let mut z_term = 0.0;
    let mut pi_prior = ln_dirichlet_norm(&vec![prior.alpha0; k]);
    let mut mu_lambda_prior = k as f64 * ln_wishart_norm(log_det_w0, prior.nu0, d);
    let mut q_pi = ln_dirichlet_norm(&comps.iter().map(|c| c.alpha).collect::<Vec<_>>());
    let mut q_mu_lambda = 0.0;

    for c in 0..k {
        let comp = &comps[c];
        let nk = stats.nk[c];
        // Σ_n r_nk (x_n − m_k)(x_n − m_k)ᵀ = N_k S_k + N_k (x̄ − m)(x̄ − m)ᵀ
        let dx = &stats.xbar[c] - &comp.m;
        let scatter_m = &stats.scatter[c] + (&dx * dx.transpose()) * nk;
        let tr_sw = (&scatter_m * &comp.w).trace();
        lik += 0.5
            * (nk * (e.log_lambda[c] - df / comp.beta - df * (2.0 * PI).ln()) - comp.nu * tr_sw);

        z_term += nk * e.log_pi[c];
        pi_prior += (prior.alpha0 - 1.0) * e.log_pi[c];

        let dm = &comp.m - &prior.m0;
        let quad = (dm.transpose() * &comp.w * &dm)[(0, 0)];
        mu_lambda_prior += 0.5
            * (df * (prior.beta0 / (2.0 * PI)).ln() + e.log_lambda[c]
                - df * prior.beta0 / comp.beta
                - prior.beta0 * comp.nu * quad)
            + 0.5 * (prior.nu0 - df - 1.0) * e.log_lambda[c]
            - 0.5 * comp.nu * (w0_inv * &comp.w).trace();

        q_pi += (comp.alpha - 1.0) * e.log_pi[c];
        let entropy_lambda = -ln_wishart_norm(e.log_det_w[c], comp.nu, d)
            - 0.5 * (comp.nu - df - 1.0) * e.log_lambda[c]
            + 0.5 * comp.nu * df;
        q_mu_lambda += 0.5 * e.log_lambda[c] + 0.5 * df * (comp.beta / (2.0 * PI)).ln() - 0.5 * df - entropy_lambda;
    }
    let q_z: f64 = resp.iter().filter(|r| **r > 0.0).map(|r| r * r.ln()).sum();
    let v = lik + z_term + pi_prior + mu_lambda_prior - q_z - q_pi - q_mu_lambda;
    if !v.is_finite() {
        return Err(Error::NonFinite("ELBO".into()));
    }
    Ok(v)
}

fn validate_fit_inputs(data: &Dataset, k: usize, prior: &BgmmPrior) -> Result<()> {
    if k == 0 {
        return Err(Error::arg("K must be >= 1"));
    }
    if prior.dim() != data.dim() {
        return Err(Error::dim(data.dim(), prior.dim()));
    }
    if data.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dataset".into()));
    }
    Ok(())
}

/// Hard responsibilities from k-means++ seeding plus a few Lloyd sweeps on
/// standardised data.
fn kmeans_responsibilities(data: &Dataset, k: usize, iters: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = data.len();
    let d = data.dim();
    let sd: Vec<f64> = data.variance().iter().map(|v| if *v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    let z: Vec<f64> = data.rows().flat_map(|r| r.iter().zip(&sd).map(|(x, s)| x / s).collect::<Vec<_>>()).collect();
    let dist2 = |i: usize, c: &[f64]| -> f64 { (0..d).map(|j| (z[i * d + j] - c[j]).powi(2)).sum() };

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.random_range(0..n);
    centers.push(z[first * d..(first + 1) * d].to_vec());
    let mut best: Vec<f64> = (0..n).map(|i| dist2(i, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, b) in best.iter().enumerate() {
                if u < *b {
                    idx = i;
                    break;
                }
                u -= b;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        let c = z[pick * d..(pick + 1) * d].to_vec();
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(i, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![0usize; n];
    for it in 0..=iters {
        for (i, a) in assign.iter_mut().enumerate() {
            let mut bd = f64::INFINITY;
            for (c, centre) in centers.iter().enumerate() {
                let dd = dist2(i, centre);
                if dd < bd {
                    bd = dd;
                    *a = c;
                }
            }
        }
        if it == iters {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums[a][j] += z[i * d + j];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    let mut resp = vec![0.0; n * k];
    for (i, a) in assign.iter().enumerate() {
        resp[i * k + a] = 1.0;
    }
    resp
}

fn run_vb(
    data: &Dataset,
    prior: &BgmmPrior,
    mut resp: Vec<f64>,
    k: usize,
    config: &FitConfig,
) -> Result<BgmmPosterior> {
    let w0_inv = spd_inverse(&prior.w0, "prior Wishart scale")?;
    let log_det_w0 = linalg::chol_log_det(&linalg::robust_cholesky(&prior.w0, "prior Wishart scale")?.0);
    let tol = config.tol_per_point * data.len().max(1) as f64;

    let mut comps = m_step(prior, &suff_stats(data, &resp, k, &prior.m0), &w0_inv)?;
    let mut trace = Vec::new();
    for _ in 0..config.max_iter.max(1) {
        let e = expectations(&comps)?;
        e_step(data, &comps, &e, &mut resp);
        comps = m_step(prior, &suff_stats(data, &resp, k, &prior.m0), &w0_inv)?;
        let bound = elbo(data, prior, &comps, &resp, &w0_inv, log_det_w0)?;
        let done = trace.last().is_some_and(|prev: &f64| (bound - prev).abs() < tol);
        trace.push(bound);
        if done {
            break;
        }
    }
    Ok(BgmmPosterior {
        prior: prior.clone(),
        d_in: data.d_in(),
        d_out: data.d_out(),
        n_points: data.len(),
        components: comps,
        elbo_trace: trace,
    })
}

/// Fits a `k`-component posterior with k-means++ initialisation and
/// `config.restarts` restarts, keeping the best final bound. Deterministic in
/// `seed`. An empty dataset yields the prior-only posterior.
pub fn fit_vb(data: &Dataset, k: usize, prior: &BgmmPrior, config: &FitConfig, seed: u64) -> Result<BgmmPosterior> {
    validate_fit_inputs(data, k, prior)?;
    if data.is_empty() {
        return BgmmPosterior::prior_only(prior.clone(), k, data.d_in(), data.d_out());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<BgmmPosterior> = None;
    for _ in 0..config.restarts.max(1) {
        let resp = kmeans_responsibilities(data, k, config.kmeans_iters, &mut rng);
        let post = run_vb(data, prior, resp, k, config)?;
        let better = match &best {
            None => true,
            Some(b) => post.final_elbo() > b.final_elbo(),
        };
        if better {
            best = Some(post);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Refits on `data` starting from the responsibilities predicted by
/// `previous` (same K and prior). Single run, no restarts.
pub fn fit_vb_warm(data: &Dataset, previous: &BgmmPosterior, config: &FitConfig) -> Result<BgmmPosterior> {
    validate_fit_inputs(data, previous.k(), &previous.prior)?;
    if data.is_empty() {
        return BgmmPosterior::prior_only(previous.prior.clone(), previous.k(), data.d_in(), data.d_out());
    }
    let k = previous.k();
    let mut resp = vec![0.0; data.len() * k];
    let e = expectations(&previous.components)?;
    e_step(data, &previous.components, &e, &mut resp);
    run_vb(data, &previous.prior, resp, k, config)
}

impl BgmmPosterior {
    pub fn final_elbo(&self) -> f64 {
        self.elbo_trace.last().copied().unwrap_or(f64::NEG_INFINITY)
    }
}

// ---------------------------------------------------------------------------
// Predictive and conditional distributions

/// Posterior predictive Student-t mixture. Component scales are in covariance
/// form: `((1 + β) / ((ν + 1 − D) β)) W⁻¹` with dof `ν + 1 − D`.
pub fn posterior_predictive(post: &BgmmPosterior) -> Result<StudentTMixture> {
    let d = post.dim() as f64;
    let weights = post.mixing_weights();
    let mut comps = Vec::with_capacity(post.k());
    for (k, c) in post.components.iter().enumerate() {
        let dof = c.nu + 1.0 - d;
        if dof <= 0.0 {
            return Err(Error::DofTooSmall { component: k, dof, min: 0.0 });
        }
        let w_inv = spd_inverse(&c.w, "predictive scale")?;
        let scale = w_inv * ((1.0 + c.beta) / (dof * c.beta));
        comps.push(StudentTComponent::new(c.m.clone(), scale, dof)?);
    }
    StudentTMixture::new(weights, comps)
}

/// Which part of the conditional scale feeds an uncertainty mixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UncertaintyMode {
    Total,
    Aleatoric,
    Epistemic,
}

impl std::str::FromStr for UncertaintyMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(UncertaintyMode::Total),
            "aleatoric" => Ok(UncertaintyMode::Aleatoric),
            "epistemic" => Ok(UncertaintyMode::Epistemic),
            other => Err(Error::arg(format!("unknown uncertainty mode '{other}'"))),
        }
    }
}

/// Relative size of the diagonal floor added to epistemic covariances.
pub const EPISTEMIC_FLOOR_FACTOR: f64 = 1e-6;

/// Precomputed block quantities of every predictive component, so that
/// conditioning on many inputs is cheap.
#[derive(Clone, Debug)]
pub struct ConditionalModel {
    pub d_in: usize,
    pub d_out: usize,
    pub components: Vec<ConditionalComponent>,
    /// Diagonal floor for epistemic covariances.
    pub epistemic_floor: f64,
}

#[derive(Clone, Debug)]
pub struct ConditionalComponent {
    pub log_weight: f64,
    /// Predictive dof `ν_k + 1 − D`.
    pub dof: f64,
    /// Conditional dof `ν_k + D_in`.
    pub dof_cond: f64,
    pub mean_in: DVector<f64>,
    pub mean_out: DVector<f64>,
    /// `(L^ii)⁻¹`.
    pub prec_in: DMatrix<f64>,
    pub log_det_in: f64,
    /// `L^oi (L^ii)⁻¹`.
    pub gain: DMatrix<f64>,
    /// Schur complement `L^oo − L^oi (L^ii)⁻¹ L^io`.
    pub schur: DMatrix<f64>,
    /// `log π_k + log Γ((ν+D_in)/2) − log Γ(ν/2) − (D_in/2) log νπ − ½ log|L^ii|`.
    pub log_norm_in: f64,
}

/// Per-component aleatoric/epistemic split of the conditional scale.
#[derive(Clone, Debug)]
pub struct UncertaintySplit {
    pub weights: Vec<f64>,
    pub dofs: Vec<f64>,
    pub means: Vec<DVector<f64>>,
    pub aleatoric: Vec<DMatrix<f64>>,
    pub epistemic: Vec<DMatrix<f64>>,
    /// `aleatoric + epistemic`, the full conditional scale.
    pub total: Vec<DMatrix<f64>>,
}

impl ConditionalModel {
    pub fn new(post: &BgmmPosterior) -> Result<Self> {
        let pred = posterior_predictive(post)?;
        let (di, d_o) = (post.d_in, post.d_out);
        let mut comps = Vec::with_capacity(post.k());
        for (w, t) in pred.weights().iter().zip(pred.components()) {
            let s = t.scale();
            let l_ii = s.view((0, 0), (di, di)).into_owned();
            let l_oi = s.view((di, 0), (d_o, di)).into_owned();
            let l_oo = s.view((di, di), (d_o, d_o)).into_owned();
            let (c_ii, _) = linalg::robust_cholesky(&l_ii, "input block")?;
            let prec_in = {
                let inv = c_ii.inverse();
                (&inv + inv.transpose()) * 0.5
            };
            let log_det_in = linalg::chol_log_det(&c_ii);
            let gain = &l_oi * &prec_in;
            let schur = {
                let raw = &l_oo - &gain * l_oi.transpose();
                (&raw + raw.transpose()) * 0.5
            };
            let dof = t.dof();
            let di_f = di as f64;
            let log_norm_in = w.ln() + ln_gamma(0.5 * (dof + di_f)) - ln_gamma(0.5 * dof)
                - 0.5 * di_f * (dof * PI).ln()
                - 0.5 * log_det_in;
            comps.push(ConditionalComponent {
                log_weight: w.ln(),
                dof,
                dof_cond: dof + di_f,
                mean_in: t.mean().rows(0, di).into_owned(),
                mean_out: t.mean().rows(di, d_o).into_owned(),
                prec_in,
                log_det_in,
                gain,
                schur,
                log_norm_in,
            });
        }
        let mut al_traces: Vec<f64> =
            comps.iter().map(|c| c.schur.trace() * c.dof / c.dof_cond / d_o as f64).collect();
        al_traces.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = al_traces[al_traces.len() / 2];
        Ok(ConditionalModel { d_in: di, d_out: d_o, components: comps, epistemic_floor: EPISTEMIC_FLOOR_FACTOR * median })
    }

    fn check_input(&self, x_in: &DVector<f64>) -> Result<()> {
        if x_in.len() != self.d_in {
            return Err(Error::dim(self.d_in, x_in.len()));
        }
        if x_in.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("policy input".into()));
        }
        Ok(())
    }

    /// Normalised conditional weights and Mahalanobis distances of `x_in`
    /// under each component's input marginal.
    pub fn weights_and_mahalanobis(&self, x_in: &DVector<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x_in)?;
        let mut logw = Vec::with_capacity(self.components.len());
        let mut maha = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let delta = x_in - &c.mean_in;
            let m = (delta.transpose() * &c.prec_in * &delta)[(0, 0)];
            logw.push(c.log_norm_in - 0.5 * (c.dof + self.d_in as f64) * (m / c.dof).ln_1p());
            maha.push(m);
        }
        let lse = linalg::log_sum_exp(&logw);
        Ok((logw.iter().map(|l| (l - lse).exp()).collect(), maha))
    }

    pub fn decompose(&self, x_in: &DVector<f64>) -> Result<UncertaintySplit> {
        let (weights, maha) = self.weights_and_mahalanobis(x_in)?;
        let mut split = UncertaintySplit {
            weights,
            dofs: Vec::new(),
            means: Vec::new(),
            aleatoric: Vec::new(),
            epistemic: Vec::new(),
            total: Vec::new(),
        };
        for (c, m) in self.components.iter().zip(maha) {
            let al = &c.schur * (c.dof / c.dof_cond);
            let ep = &c.schur * (m / c.dof_cond);
            split.total.push(&al + &ep);
            split.aleatoric.push(al);
            split.epistemic.push(ep);
            split.means.push(&c.mean_out + &c.gain * (x_in - &c.mean_in));
            split.dofs.push(c.dof_cond);
        }
        Ok(split)
    }

    pub fn conditional_policy(&self, x_in: &DVector<f64>) -> Result<StudentTMixture> {
        let split = self.decompose(x_in)?;
        let comps = split
            .means
            .into_iter()
            .zip(split.total)
            .zip(split.dofs)
            .map(|((m, s), dof)| StudentTComponent::new(m, s, dof))
            .collect::<Result<Vec<_>>>()?;
        StudentTMixture::new(split.weights, comps)
    }

    /// Moment-matched Gaussian mixture whose covariances are the selected
    /// part of each conditional scale, scaled by `ν/(ν−2)`.
    pub fn uncertainty_gmm(&self, x_in: &DVector<f64>, mode: UncertaintyMode) -> Result<Gmm> {
        let split = self.decompose(x_in)?;
        let mut comps = Vec::with_capacity(split.weights.len());
        for k in 0..split.weights.len() {
            let dof = split.dofs[k];
            if dof <= 2.0 {
                return Err(Error::DofTooSmall { component: k, dof, min: 2.0 });
            }
            let factor = dof / (dof - 2.0);
            let cov = match mode {
                UncertaintyMode::Total => &split.total[k] * factor,
                UncertaintyMode::Aleatoric => &split.aleatoric[k] * factor,
                UncertaintyMode::Epistemic => {
                    &split.epistemic[k] * factor + DMatrix::identity(self.d_out, self.d_out) * self.epistemic_floor
                }
            };
            comps.push(Gaussian::new(split.means[k].clone(), cov)?);
        }
        Gmm::new(split.weights, comps)
    }

    /// Log density of the conditional policy, `log p(x_out | x_in)`.
    pub fn conditional_log_density(&self, x_in: &DVector<f64>, x_out: &DVector<f64>) -> Result<f64> {
        let split = self.decompose(x_in)?;
        let mut terms = Vec::with_capacity(split.weights.len());
        for k in 0..split.weights.len() {
            let (c, _) = linalg::robust_cholesky(&split.total[k], "conditional scale")?;
            let maha = linalg::chol_quad_form(&c, &(x_out - &split.means[k]));
            terms.push(
                split.weights[k].ln()
                    + student_t_log_density_from_parts(self.d_out, split.dofs[k], linalg::chol_log_det(&c), maha),
            );
        }
        Ok(linalg::log_sum_exp(&terms))
    }
}

/// Conditional policy `p(x_out | x_in)` as a Student-t mixture.
pub fn conditional_policy(post: &BgmmPosterior, x_in: &DVector<f64>) -> Result<StudentTMixture> {
    ConditionalModel::new(post)?.conditional_policy(x_in)
}

pub fn decompose_uncertainty(post: &BgmmPosterior, x_in: &DVector<f64>) -> Result<UncertaintySplit> {
    ConditionalModel::new(post)?.decompose(x_in)
}

pub fn epistemic_conditional_gmm(post: &BgmmPosterior, x_in: &DVector<f64>, mode: UncertaintyMode) -> Result<Gmm> {
    ConditionalModel::new(post)?.uncertainty_gmm(x_in, mode)
}
