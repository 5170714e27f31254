//! Gaussian-mixture approximation of an unnormalised log-density by reverse
//! KL, fitted with reparameterised stochastic gradients and Adam.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::cost::LogTarget;
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg;
use crate::mixture::Gmm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariationalConfig {
    pub steps: usize,
    /// Steps when warm-started from a previous fit.
    pub warm_steps: usize,
    pub samples_per_component: usize,
    pub learning_rate: f64,
    /// The target density is `exp(c(x) / T)`.
    pub temperature: f64,
}

impl Default for VariationalConfig {
    fn default() -> Self {
        VariationalConfig { steps: 2000, warm_steps: 1000, samples_per_component: 64, learning_rate: 0.01, temperature: 0.25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    /// Monte-Carlo estimate of `E_q[log q − c/T]` at the last step.
    pub final_objective: Option<f64>,
    pub iterations: usize,
}

/// Mixture in its unconstrained parameterisation: weight logits, means and
/// lower Cholesky factors stored row-packed with the diagonal in log form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VariationalGmmRepr", into = "VariationalGmmRepr")]
pub struct VariationalGmm {
    dim: usize,
    logits: Vec<f64>,
    means: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    gmm: Gmm,
    pub diagnostics: FitDiagnostics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariationalGmmRepr {
    pub dim: usize,
    pub logits: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub factors: Vec<Vec<f64>>,
    pub gmm: Gmm,
    pub diagnostics: FitDiagnostics,
}

impl TryFrom<VariationalGmmRepr> for VariationalGmm {
    type Error = Error;
    fn try_from(r: VariationalGmmRepr) -> Result<Self> {
        let mut q = VariationalGmm::from_params(r.dim, r.logits, r.means, r.factors)?;
        q.diagnostics = r.diagnostics;
        Ok(q)
    }
}

impl From<VariationalGmm> for VariationalGmmRepr {
    fn from(q: VariationalGmm) -> Self {
        VariationalGmmRepr { dim: q.dim, logits: q.logits, means: q.means, factors: q.factors, gmm: q.gmm, diagnostics: q.diagnostics }
    }
}

fn packed_len(d: usize) -> usize {
    d * (d + 1) / 2
}

/// Row-major dense lower factor from packed parameters.
fn unpack(d: usize, p: &[f64]) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    let mut idx = 0;
    for i in 0..d {
        for j in 0..=i {
            l[i * d + j] = if i == j { p[idx].exp() } else { p[idx] };
            idx += 1;
        }
    }
    l
}

fn pack(d: usize, l: &DMatrix<f64>) -> Vec<f64> {
    let mut p = Vec::with_capacity(packed_len(d));
    for i in 0..d {
        for j in 0..=i {
            p.push(if i == j { l[(i, j)].ln() } else { l[(i, j)] });
        }
    }
    p
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = linalg::log_sum_exp(logits);
    logits.iter().map(|l| (l - lse).exp()).collect()
}

impl VariationalGmm {
    pub fn from_params(dim: usize, logits: Vec<f64>, means: Vec<Vec<f64>>, factors: Vec<Vec<f64>>) -> Result<Self> {
        let k = logits.len();
        if k == 0 || means.len() != k || factors.len() != k {
            return Err(Error::arg("variational GMM needs matching, non-empty parameter lists"));
        }
        let mut comps = Vec::with_capacity(k);
        for (m, f) in means.iter().zip(&factors) {
            if m.len() != dim || f.len() != packed_len(dim) {
                return Err(Error::dim(dim, m.len()));
            }
            let l = DMatrix::from_row_slice(dim, dim, &unpack(dim, f));
            comps.push(Gaussian::new(DVector::from_row_slice(m), &l * l.transpose())?);
        }
        let gmm = Gmm::new(softmax(&logits), comps)?;
        Ok(VariationalGmm { dim, logits, means, factors, gmm, diagnostics: FitDiagnostics { final_objective: None, iterations: 0 } })
    }

    /// Initial mixture: means drawn from `reference`, covariances
    /// `reference.cov / k`, uniform weights.
    pub fn cold_start(reference: &Gaussian, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::arg("K_q must be >= 1"));
        }
        let d = reference.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (chol, _) = linalg::robust_cholesky(&(reference.covariance() / k as f64), "initial q covariance")?;
        let f = pack(d, &chol.l());
        let means = (0..k).map(|_| reference.sample(&mut rng).iter().cloned().collect()).collect();
        VariationalGmm::from_params(d, vec![0.0; k], means, vec![f; k])
    }

    pub fn gmm(&self) -> &Gmm {
        &self.gmm
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, lr }
    }

    /// Descent step on `params`.
    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Per-component data for evaluating `log q` and `∇_x log q`.
struct QEval {
    d: usize,
    log_w: Vec<f64>,
    means: Vec<f64>,
    /// Lower factors `L_k`, row-major.
    l: Vec<f64>,
    log_norm: Vec<f64>,
}

impl QEval {
    fn new(d: usize, logits: &[f64], flat: &[f64]) -> Self {
        let k = logits.len();
        let lse = linalg::log_sum_exp(logits);
        let (np, nf) = (d, packed_len(d));
        let mut q = QEval { d, log_w: vec![], means: vec![], l: vec![], log_norm: vec![] };
        for c in 0..k {
            let base = c * (np + nf);
            q.log_w.push(logits[c] - lse);
            q.means.extend_from_slice(&flat[base..base + np]);
            let packed = &flat[base + np..base + np + nf];
            q.l.extend(unpack(d, packed));
            let log_det_half: f64 = {
                let mut idx = 0;
                let mut s = 0.0;
                for i in 0..d {
                    idx += i;
                    s += packed[idx];
                    idx += 1;
                }
                s
            };
            q.log_norm.push(-0.5 * d as f64 * (2.0 * PI).ln() - log_det_half);
        }
        q
    }

    fn log_q_grad(&self, x: &[f64], grad: &mut [f64], scratch: &mut Vec<f64>) -> f64 {
        let d = self.d;
        let k = self.log_w.len();
        scratch.clear();
        scratch.resize(k * (d + 1), 0.0);
        let (logs, grads) = scratch.split_at_mut(k);
        let mut y = [0.0f64; 16];
        let mut yv;
        let yb: &mut [f64] = if d <= 16 {
            &mut y[..d]
        } else {
            yv = vec![0.0; d];
            &mut yv
        };
        for c in 0..k {
            let l = &self.l[c * d * d..(c + 1) * d * d];
            for i in 0..d {
                yb[i] = x[i] - self.means[c * d + i];
            }
            linalg::small_forward(d, l, yb);
            logs[c] = self.log_w[c] + self.log_norm[c] - 0.5 * yb.iter().map(|v| v * v).sum::<f64>();
            linalg::small_backward(d, l, yb);
            for i in 0..d {
                grads[c * d + i] = -yb[i];
            }
        }
        let lse = linalg::log_sum_exp(logs);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for c in 0..k {
            let r = (logs[c] - lse).exp();
            for i in 0..d {
                grad[i] += r * grads[c * d + i];
            }
        }
        lse
    }
}

/// Fits `q` to the unnormalised density `exp(c(x)/T)` by minimising
/// `E_q[log q(x) − c(x)/T]`.
///
/// Means and factors get reparameterised pathwise gradients from
/// `samples_per_component` draws per component; the weight logits get
/// `w_j (F_j − Σ_k w_k F_k)` with `F_k` the component-wise objective. Terms
/// of the form `E_q[∇_θ log q]` vanish in expectation and are dropped.
pub fn fit_variational_gmm(
    target: &dyn LogTarget,
    k_q: usize,
    init: Option<&VariationalGmm>,
    config: &VariationalConfig,
    seed: u64,
) -> Result<VariationalGmm> {
    if k_q == 0 {
        return Err(Error::arg("K_q must be >= 1"));
    }
    if !target.integrable() {
        return Err(Error::arg("target is not integrable: no weighted decaying term"));
    }
    if !(config.temperature > 0.0 && config.learning_rate > 0.0) || config.samples_per_component == 0 {
        return Err(Error::arg("temperature, learning rate and sample count must be positive"));
    }
    let d = target.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (start, steps) = match init {
        Some(q) => {
            if q.len() != k_q || q.dim() != d {
                return Err(Error::arg("warm start has a different shape"));
            }
            (q.clone(), config.warm_steps)
        }
        None => {
            let reference = target.reference().unwrap_or_else(|| Gaussian::standard(d));
            (VariationalGmm::cold_start(&reference, k_q, rand::Rng::random(&mut rng))?, config.steps)
        }
    };

    let np = d;
    let nf = packed_len(d);
    let stride = np + nf;
    let mut flat = Vec::with_capacity(k_q * stride);
    for c in 0..k_q {
        flat.extend_from_slice(&start.means[c]);
        flat.extend_from_slice(&start.factors[c]);
    }
    let mut logits = start.logits.clone();
    let mut adam_flat = Adam::new(flat.len(), config.learning_rate);
    let mut adam_logits = Adam::new(k_q, config.learning_rate);

    let s = config.samples_per_component;
    let inv_t = 1.0 / config.temperature;
    let mut g_flat = vec![0.0; flat.len()];
    let mut g_logits = vec![0.0; k_q];
    let mut eps = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut gc = vec![0.0; d];
    let mut gq = vec![0.0; d];
    let mut scratch = Vec::new();
    let mut objective = f64::NAN;

    for step in 0..steps {
        let q = QEval::new(d, &logits, &flat);
        let w: Vec<f64> = q.log_w.iter().map(|l| l.exp()).collect();
        g_flat.iter_mut().for_each(|g| *g = 0.0);
        let mut f_comp = vec![0.0; k_q];
        for c in 0..k_q {
            let l = &q.l[c * d * d..(c + 1) * d * d];
            let base = c * stride;
            for _ in 0..s {
                for e in eps.iter_mut() {
                    *e = StandardNormal.sample(&mut rng);
                }
                for i in 0..d {
                    let mut v = q.means[c * d + i];
                    for j in 0..=i {
                        v += l[i * d + j] * eps[j];
                    }
                    x[i] = v;
                }
                let cval = target.value_grad(&x, &mut gc);
                let lq = q.log_q_grad(&x, &mut gq, &mut scratch);
                let f = lq - cval * inv_t;
                if !f.is_finite() {
                    return Err(Error::Diverged { iteration: step });
                }
                f_comp[c] += f / s as f64;
                let scale = w[c] / s as f64;
                let mut idx = base + np;
                for i in 0..d {
                    let gf = gq[i] - gc[i] * inv_t;
                    g_flat[base + i] += scale * gf;
                    for j in 0..=i {
                        let mut g = scale * gf * eps[j];
                        if i == j {
                            g *= l[i * d + i];
                        }
                        g_flat[idx] += g;
                        idx += 1;
                    }
                }
            }
        }
        let mean_f: f64 = w.iter().zip(&f_comp).map(|(a, b)| a * b).sum();
        for c in 0..k_q {
            g_logits[c] = w[c] * (f_comp[c] - mean_f);
        }
        objective = mean_f;
        if !objective.is_finite() || g_flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged { iteration: step });
        }
        adam_flat.step(&mut flat, &g_flat);
        adam_logits.step(&mut logits, &g_logits);
    }

    let means = (0..k_q).map(|c| flat[c * stride..c * stride + np].to_vec()).collect();
    let factors = (0..k_q).map(|c| flat[c * stride + np..(c + 1) * stride].to_vec()).collect();
    let mut out = VariationalGmm::from_params(d, logits, means, factors)?;
    out.diagnostics = FitDiagnostics { final_objective: objective.is_finite().then_some(objective), iterations: steps };
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::{mvn_from_box, CostTerm, CostTermKind, InfoDensityCost};
    use crate::renyi::{renyi2_entropy, renyi2_gaussian};

    fn mvn_target() -> Gaussian {
        Gaussian::from_slices(&[1.0, -2.0], &[0.8, 0.3, 0.3, 0.5]).unwrap()
    }

    fn fast() -> VariationalConfig {
        VariationalConfig { steps: 1500, warm_steps: 1500, temperature: 1.0, ..VariationalConfig::default() }
    }

    #[test]
    fn recovers_single_gaussian() {
        let target = Gmm::single(mvn_target());
        for seed in 0..3 {
            let q = fit_variational_gmm(&target, 1, None, &fast(), seed).unwrap();
            let c = &q.gmm().components()[0];
            assert!((c.mean() - mvn_target().mean()).amax() < 0.05, "seed {seed}: mean {}", c.mean());
            let rel = (c.covariance() - mvn_target().covariance()).norm() / mvn_target().covariance().norm();
            assert!(rel < 0.1, "seed {seed}: cov rel err {rel}");
        }
    }

    #[test]
    fn temperature_scales_the_target_covariance() {
        // exp(log N(x; m, S) / T) is proportional to N(x; m, T S).
        let target = Gmm::single(mvn_target());
        let cfg = VariationalConfig { temperature: 0.25, ..fast() };
        let q = fit_variational_gmm(&target, 1, None, &cfg, 4).unwrap();
        let c = &q.gmm().components()[0];
        let want = mvn_target().covariance() * 0.25;
        assert!((c.mean() - mvn_target().mean()).amax() < 0.05);
        assert!((c.covariance() - &want).norm() / want.norm() < 0.1);
    }

    #[test]
    fn recovers_bimodal_target() {
        let target = Gmm::new(
            vec![0.35, 0.65],
            vec![Gaussian::isotropic(&[-3.0, 0.0], 0.3).unwrap(), Gaussian::isotropic(&[3.0, 1.0], 0.3).unwrap()],
        )
        .unwrap();
        let init = VariationalGmm::from_params(
            2,
            vec![0.0, 0.0],
            vec![vec![-1.0, 0.0], vec![1.0, 0.5]],
            vec![vec![0.0, 0.0, 0.0]; 2],
        )
        .unwrap();
        let q = fit_variational_gmm(&target, 2, Some(&init), &fast(), 1).unwrap();
        let mut matched = 0;
        for (tw, tc) in target.weights().iter().zip(target.components()) {
            for (qw, qc) in q.gmm().weights().iter().zip(q.gmm().components()) {
                if (qc.mean() - tc.mean()).amax() < 0.1 && (qw - tw).abs() < 0.1 {
                    matched += 1;
                }
            }
        }
        assert_eq!(matched, 2, "{:?}", q.gmm());
    }

    #[test]
    fn deterministic_and_shift_invariant() {
        let base = Gmm::single(mvn_target());
        let cfg = VariationalConfig { steps: 200, temperature: 1.0, ..VariationalConfig::default() };
        let a = fit_variational_gmm(&base, 2, None, &cfg, 7).unwrap();
        let b = fit_variational_gmm(&base, 2, None, &cfg, 7).unwrap();
        assert_eq!(a, b);

        struct Shifted(Gmm);
        impl LogTarget for Shifted {
            fn dim(&self) -> usize {
                2
            }
            fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
                self.0.value_grad(x, grad) + 1234.5
            }
            fn reference(&self) -> Option<Gaussian> {
                self.0.reference()
            }
        }
        let c = fit_variational_gmm(&Shifted(base), 2, None, &cfg, 7).unwrap();
        for (m, n) in a.means.iter().zip(&c.means) {
            for (u, v) in m.iter().zip(n) {
                assert!((u - v).abs() < 0.05);
            }
        }
    }

    #[test]
    fn similarity_only_collapses_to_mvn() {
        let sim = mvn_from_box(&[0.0, 0.0], &[10.0, 10.0]).unwrap();
        let cost = InfoDensityCost::new(2, vec![CostTerm::new(1.0, CostTermKind::SimilarityLogDensity { similarity: sim.clone() }).unwrap()]).unwrap();
        let q = fit_variational_gmm(&cost, 3, None, &fast(), 2).unwrap();
        let h = renyi2_entropy(q.gmm()).unwrap();
        let expected = renyi2_gaussian(2, sim.log_det());
        assert!((h - expected).abs() < 0.5, "{h} vs {expected}");
    }

    #[test]
    fn rejects_non_integrable_and_bad_shapes() {
        let sim = mvn_from_box(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        let cost = InfoDensityCost::new(2, vec![CostTerm::new(0.0, CostTermKind::SimilarityLogDensity { similarity: sim }).unwrap()]).unwrap();
        assert!(fit_variational_gmm(&cost, 2, None, &fast(), 0).is_err());
        let t = Gmm::single(mvn_target());
        assert!(fit_variational_gmm(&t, 0, None, &fast(), 0).is_err());
        let q = VariationalGmm::cold_start(&mvn_target(), 3, 0).unwrap();
        assert!(fit_variational_gmm(&t, 2, Some(&q), &fast(), 0).is_err());
    }

    #[test]
    fn divergence_is_reported_with_iteration() {
        struct Exploding;
        impl LogTarget for Exploding {
            fn dim(&self) -> usize {
                1
            }
            fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
                grad[0] = f64::NAN;
                if x[0] > 0.0 { f64::INFINITY } else { -x[0] * x[0] }
            }
        }
        let err = fit_variational_gmm(&Exploding, 1, None, &fast(), 0).unwrap_err();
        assert!(matches!(err, Error::Diverged { iteration: 0 }));
    }

    #[test]
    fn json_round_trip() {
        let q = VariationalGmm::cold_start(&mvn_target(), 3, 4).unwrap();
        let text = serde_json::to_string(&q).unwrap();
        let back: VariationalGmm = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
