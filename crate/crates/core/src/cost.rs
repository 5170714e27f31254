//! Information-density cost over the policy input space.
//!
//! `c(x) = w_H H₂(p(u|x)) + β log p_sim(x) + Σ extra terms` is the quantity
//! to maximise; it is the unnormalised log-density targeted by the
//! variational query distribution. Every term returns its analytic gradient.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::bgmm::{BgmmPosterior, ConditionalModel, UncertaintyMode};
use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::linalg::{self, small_chol_inverse, small_cholesky, small_backward, small_forward};
use crate::mixture::Gmm;

/// Unnormalised log-density with gradient.
pub trait LogTarget: Sync {
    fn dim(&self) -> usize;

    /// Value at `x`; `grad` receives `∇` of the value.
    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn value(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.value_grad(x, &mut g)
    }

    /// Gaussian describing where the target's mass is expected, used for
    /// cold starts.
    fn reference(&self) -> Option<Gaussian> {
        None
    }

    /// Whether `exp(value)` has finite mass.
    fn integrable(&self) -> bool {
        true
    }
}

/// Moment-matched Gaussian of the uniform distribution on a box.
pub fn mvn_from_box(lower: &[f64], upper: &[f64]) -> Result<Gaussian> {
    if lower.len() != upper.len() {
        return Err(Error::dim(lower.len(), upper.len()));
    }
    if lower.iter().zip(upper).any(|(l, u)| !(l < u)) {
        return Err(Error::arg("box has a degenerate axis"));
    }
    let mean: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| 0.5 * (l + u)).collect();
    let var: Vec<f64> = lower.iter().zip(upper).map(|(l, u)| (u - l).powi(2) / 12.0).collect();
    let d = lower.len();
    let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| if i == j { var[i] } else { 0.0 });
    Gaussian::new(DVector::from_vec(mean), cov)
}

/// `log Φ(z)` for the standard normal CDF, accurate in the far left tail.
pub fn log_ndtr(z: f64) -> f64 {
    if z > -20.0 {
        (0.5 * erfc(-z / SQRT_2)).ln()
    } else {
        // Asymptotic series of the Mills ratio.
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * PI).ln() + series.ln()
    }
}

/// `d/dz log Φ(z) = φ(z) / Φ(z)`.
pub fn d_log_ndtr(z: f64) -> f64 {
    if z > -20.0 {
        (-0.5 * z * z - 0.5 * (2.0 * PI).ln() - log_ndtr(z)).exp()
    } else {
        let z2 = z * z;
        // φ/Φ ≈ −z / (1 − 1/z² + 3/z⁴ − 15/z⁶)
        -z / (1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2))
    }
}

/// Sum over axes of `log step(x − l) + log step(u − x)` with the smooth step
/// `step(d) = ½ erfc(−s d) = Φ(√2 s d)`.
pub fn soft_limit_logcost(x: &[f64], lower: &[f64], upper: &[f64], sharpness: f64) -> f64 {
    let mut g = vec![0.0; x.len()];
    soft_limit_value_grad(x, lower, upper, sharpness, &mut g)
}

fn soft_limit_value_grad(x: &[f64], lower: &[f64], upper: &[f64], sharpness: f64, grad: &mut [f64]) -> f64 {
    let k = SQRT_2 * sharpness;
    let mut v = 0.0;
    for i in 0..x.len() {
        let zl = k * (x[i] - lower[i]);
        let zu = k * (upper[i] - x[i]);
        v += log_ndtr(zl) + log_ndtr(zu);
        grad[i] = k * (d_log_ndtr(zl) - d_log_ndtr(zu));
    }
    v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CostTermKind {
    /// Quadratic Rényi entropy of the conditional policy's uncertainty GMM.
    EpistemicEntropy { mode: UncertaintyMode, posterior: Box<BgmmPosterior> },
    SimilarityLogDensity { similarity: Gaussian },
    SoftLimit { lower: Vec<f64>, upper: Vec<f64>, sharpness: f64 },
    /// Log-density of an arbitrary GMM.
    Custom { gmm: Gmm },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    pub weight: f64,
    #[serde(flatten)]
    pub kind: CostTermKind,
}

impl CostTerm {
    pub fn new(weight: f64, kind: CostTermKind) -> Result<Self> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(Error::arg(format!("cost weight {weight} must be finite and >= 0")));
        }
        Ok(CostTerm { weight, kind })
    }

    fn decays(&self) -> bool {
        !matches!(self.kind, CostTermKind::EpistemicEntropy { .. })
    }
}

/// Allocation-light log-density of a GMM with gradient.
#[derive(Clone, Debug)]
struct CompiledGmm {
    d: usize,
    log_w: Vec<f64>,
    means: Vec<f64>,
    /// Row-major precisions.
    precs: Vec<f64>,
    log_norms: Vec<f64>,
}

impl CompiledGmm {
    fn new(g: &Gmm) -> Self {
        let d = g.dim();
        let mut c = CompiledGmm { d, log_w: vec![], means: vec![], precs: vec![], log_norms: vec![] };
        for (w, comp) in g.weights().iter().zip(g.components()) {
            c.log_w.push(w.ln());
            c.means.extend(comp.mean().iter());
            c.precs.extend(linalg::to_flat(&comp.precision()));
            c.log_norms.push(-0.5 * (d as f64 * (2.0 * PI).ln() + comp.log_det()));
        }
        c
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.d;
        let k = self.log_w.len();
        let mut logs = Vec::with_capacity(k);
        let mut grads = vec![0.0; k * d];
        for c in 0..k {
            let mu = &self.means[c * d..(c + 1) * d];
            let p = &self.precs[c * d * d..(c + 1) * d * d];
            let mut q = 0.0;
            for a in 0..d {
                let mut s = 0.0;
                for b in 0..d {
                    s += p[a * d + b] * (x[b] - mu[b]);
                }
                grads[c * d + a] = -s;
                q += (x[a] - mu[a]) * s;
            }
            logs.push(self.log_w[c] + self.log_norms[c] - 0.5 * q);
        }
        let lse = linalg::log_sum_exp(&logs);
        grad.iter_mut().for_each(|g| *g = 0.0);
        for c in 0..k {
            let r = (logs[c] - lse).exp();
            for a in 0..d {
                grad[a] += r * grads[c * d + a];
            }
        }
        lse
    }
}

/// Components whose conditional log weight trails the maximum by more than
/// this are skipped; their contribution is below `e^-80` relative.
pub const PRUNE_LOG_WEIGHT: f64 = 80.0;

/// Flat per-component data for fast evaluation of the conditional-entropy
/// term and its gradient.
///
/// Component covariances have the form `(c0 + c1 a_k(x)) M_k + e I` where
/// `a_k` is the Mahalanobis distance of `x` under the component's input
/// marginal and `M_k = L_s ν_c / ((ν_c − 2) ν_c)`.
#[derive(Clone, Debug)]
pub struct CompiledEntropy {
    di: usize,
    dout: usize,
    k: usize,
    log_norm: Vec<f64>,
    nu: Vec<f64>,
    mean_in: Vec<f64>,
    mean_out: Vec<f64>,
    prec_in: Vec<f64>,
    gain: Vec<f64>,
    m: Vec<f64>,
    /// Per-component constant term `c0`, which is the dof `ν` for modes that
    /// include the aleatoric part.
    c0: Vec<f64>,
    c1: f64,
    floor: f64,
}

impl CompiledEntropy {
    pub fn new(model: &ConditionalModel, mode: UncertaintyMode) -> Result<Self> {
        let (di, dout) = (model.d_in, model.d_out);
        let mut c = CompiledEntropy {
            di,
            dout,
            k: model.components.len(),
            log_norm: vec![],
            nu: vec![],
            mean_in: vec![],
            mean_out: vec![],
            prec_in: vec![],
            gain: vec![],
            m: vec![],
            c0: vec![],
            c1: match mode {
                UncertaintyMode::Aleatoric => 0.0,
                _ => 1.0,
            },
            floor: match mode {
                UncertaintyMode::Epistemic => model.epistemic_floor,
                _ => 0.0,
            },
        };
        for (idx, comp) in model.components.iter().enumerate() {
            if comp.dof_cond <= 2.0 {
                return Err(Error::DofTooSmall { component: idx, dof: comp.dof_cond, min: 2.0 });
            }
            c.log_norm.push(comp.log_norm_in);
            c.nu.push(comp.dof);
            c.mean_in.extend(comp.mean_in.iter());
            c.mean_out.extend(comp.mean_out.iter());
            c.prec_in.extend(linalg::to_flat(&comp.prec_in));
            c.gain.extend(linalg::to_flat(&comp.gain));
            let f = 1.0 / (comp.dof_cond - 2.0);
            c.m.extend(linalg::to_flat(&comp.schur).iter().map(|v| v * f));
            c.c0.push(match mode {
                UncertaintyMode::Epistemic => 0.0,
                _ => comp.dof,
            });
        }
        Ok(c)
    }

    pub fn input_dim(&self) -> usize {
        self.di
    }

    /// `H₂` at `x`; fills `grad` with its gradient when given.
    pub fn eval(&self, x: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
        let (di, dout, k) = (self.di, self.dout, self.k);
        let want = grad.is_some();

        let mut pd = vec![0.0; k * di];
        let mut a = vec![0.0; k];
        let mut l = vec![0.0; k];
        for c in 0..k {
            let mu = &self.mean_in[c * di..(c + 1) * di];
            let p = &self.prec_in[c * di * di..(c + 1) * di * di];
            let mut q = 0.0;
            for r in 0..di {
                let mut s = 0.0;
                for t in 0..di {
                    s += p[r * di + t] * (x[t] - mu[t]);
                }
                pd[c * di + r] = s;
                q += (x[r] - mu[r]) * s;
            }
            a[c] = q;
            l[c] = self.log_norm[c] - 0.5 * (self.nu[c] + di as f64) * (q / self.nu[c]).ln_1p();
        }
        let lse = linalg::log_sum_exp(&l);
        let lmax = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let active: Vec<usize> = (0..k).filter(|&c| l[c] - lmax > -PRUNE_LOG_WEIGHT).collect();
        let na = active.len();

        // Per active component: log weight, output mean, covariance.
        let mut logw = vec![0.0; na];
        let mut mu = vec![0.0; na * dout];
        let mut cov = vec![0.0; na * dout * dout];
        for (ai, &c) in active.iter().enumerate() {
            logw[ai] = l[c] - lse;
            for r in 0..dout {
                let mut s = self.mean_out[c * dout + r];
                for t in 0..di {
                    s += self.gain[(c * dout + r) * di + t] * (x[t] - self.mean_in[c * di + t]);
                }
                mu[ai * dout + r] = s;
            }
            let scale = self.c0[c] + self.c1 * a[c];
            for r in 0..dout * dout {
                cov[ai * dout * dout + r] = scale * self.m[c * dout * dout + r];
            }
            for r in 0..dout {
                cov[ai * dout * dout + r * dout + r] += self.floor;
            }
        }

        // Gradients of a_k and of the normalised log weights.
        let mut ga = vec![0.0; na * di];
        let mut glw = vec![0.0; na * di];
        if want {
            let mut mean_gl = vec![0.0; di];
            for (ai, &c) in active.iter().enumerate() {
                let coef = -(self.nu[c] + di as f64) / (self.nu[c] + a[c]);
                let w = logw[ai].exp();
                for r in 0..di {
                    ga[ai * di + r] = 2.0 * pd[c * di + r];
                    glw[ai * di + r] = coef * pd[c * di + r];
                    mean_gl[r] += w * glw[ai * di + r];
                }
            }
            for ai in 0..na {
                for r in 0..di {
                    glw[ai * di + r] -= mean_gl[r];
                }
            }
        }

        if dout == 2 {
            let lw_max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut gacc = vec![0.0; if want { di } else { 0 }];
            let mut total = 0.0;
            let ms: Vec<[f64; 3]> = active.iter().map(|&c| [self.m[c * 4], self.m[c * 4 + 1], self.m[c * 4 + 3]]).collect();
            for i in 0..na {
                let ci = &cov[i * 4..i * 4 + 4];
                for j in i..na {
                    let cj = &cov[j * 4..j * 4 + 4];
                    let (s0, s1, s3) = (ci[0] + cj[0], ci[1] + cj[1], ci[3] + cj[3]);
                    let det = s0 * s3 - s1 * s1;
                    if !(s0 > 0.0 && det > 0.0) {
                        return f64::NAN;
                    }
                    let inv = 1.0 / det;
                    let (i0, i1, i3) = (s3 * inv, -s1 * inv, s0 * inv);
                    let e0 = mu[i * 2] - mu[j * 2];
                    let e1 = mu[i * 2 + 1] - mu[j * 2 + 1];
                    let b0 = i0 * e0 + i1 * e1;
                    let b1 = i1 * e0 + i3 * e1;
                    let quad = e0 * b0 + e1 * b1;
                    let mult = if i == j { 1.0 } else { 2.0 };
                    let v = mult * inv.sqrt() * (logw[i] + logw[j] - 2.0 * lw_max - 0.5 * quad).exp();
                    total += v;
                    if want && v > 0.0 {
                        let t_of = |m: &[f64; 3]| {
                            b0 * b0 * m[0] + 2.0 * b0 * b1 * m[1] + b1 * b1 * m[2] - (i0 * m[0] + 2.0 * i1 * m[1] + i3 * m[2])
                        };
                        let (ti, tj) = if self.c1 != 0.0 { (0.5 * self.c1 * t_of(&ms[i]), 0.5 * self.c1 * t_of(&ms[j])) } else { (0.0, 0.0) };
                        let gi = &self.gain[active[i] * 2 * di..(active[i] + 1) * 2 * di];
                        let gj = &self.gain[active[j] * 2 * di..(active[j] + 1) * 2 * di];
                        for m in 0..di {
                            let dg = b0 * (gi[m] - gj[m]) + b1 * (gi[di + m] - gj[di + m]);
                            let g = glw[i * di + m] + glw[j * di + m] - dg + ti * ga[i * di + m] + tj * ga[j * di + m];
                            gacc[m] += v * g;
                        }
                    }
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                for m in 0..di {
                    g[m] = -gacc[m] / total;
                }
            }
            return -(total.ln() + 2.0 * lw_max - (2.0 * PI).ln());
        }

        let npairs = na * (na + 1) / 2;
        let mut terms = Vec::with_capacity(npairs);
        let mut tgrad = if want { vec![0.0; npairs * di] } else { Vec::new() };
        let mut s = vec![0.0; dout * dout];
        let mut sinv = vec![0.0; dout * dout];
        let mut col = vec![0.0; dout];
        let mut e = vec![0.0; dout];
        let mut b = vec![0.0; dout];
        let half_log_2pi = 0.5 * dout as f64 * (2.0 * PI).ln();
        let lw_max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut p = 0;
        for i in 0..na {
            for j in i..na {
                for r in 0..dout * dout {
                    s[r] = cov[i * dout * dout + r] + cov[j * dout * dout + r];
                }
                for r in 0..dout {
                    e[r] = mu[i * dout + r] - mu[j * dout + r];
                }
                let log_det = match small_cholesky(dout, &mut s) {
                    Some(v) => v,
                    None => return f64::NAN,
                };
                b.copy_from_slice(&e);
                small_forward(dout, &s, &mut b);
                let quad: f64 = b.iter().map(|v| v * v).sum();
                let inv_sqrt_det = (-0.5 * log_det).exp();
                // Scaled by exp(-2 max log w) so the dominant diagonal pair is O(1).
                let mult = if i == j { 1.0 } else { 2.0 };
                let v = mult * inv_sqrt_det * (logw[i] + logw[j] - 2.0 * lw_max - 0.5 * quad).exp();
                total += v;
                terms.push(v);

                if want {
                    small_backward(dout, &s, &mut b);
                    small_chol_inverse(dout, &s, &mut sinv, &mut col);
                    let ci = active[i];
                    let cj = active[j];
                    let t_of = |c: usize| -> f64 {
                        let mm = &self.m[c * dout * dout..(c + 1) * dout * dout];
                        let mut bmb = 0.0;
                        let mut tr = 0.0;
                        for r in 0..dout {
                            for t in 0..dout {
                                bmb += b[r] * mm[r * dout + t] * b[t];
                                tr += sinv[r * dout + t] * mm[t * dout + r];
                            }
                        }
                        bmb - tr
                    };
                    let (ti, tj) = if self.c1 != 0.0 { (t_of(ci), t_of(cj)) } else { (0.0, 0.0) };
                    let g = &mut tgrad[p * di..(p + 1) * di];
                    for m in 0..di {
                        let mut v = glw[i * di + m] + glw[j * di + m];
                        for r in 0..dout {
                            let dg = self.gain[(ci * dout + r) * di + m] - self.gain[(cj * dout + r) * di + m];
                            v -= b[r] * dg;
                        }
                        v += 0.5 * self.c1 * (ti * ga[i * di + m] + tj * ga[j * di + m]);
                        g[m] = v;
                    }
                }
                p += 1;
            }
        }
        let lip = total.ln() + 2.0 * lw_max - half_log_2pi;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
            for (q, t) in terms.iter().enumerate() {
                let w = t / total;
                for m in 0..di {
                    g[m] -= w * tgrad[q * di + m];
                }
            }
        }
        -lip
    }
}

#[derive(Clone, Debug)]
enum CompiledTerm {
    Entropy(CompiledEntropy),
    Gmm(CompiledGmm),
    SoftLimit { lower: Vec<f64>, upper: Vec<f64>, sharpness: f64 },
}

/// Weighted sum of cost terms over the policy input space.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "InfoDensityCostRepr", into = "InfoDensityCostRepr")]
pub struct InfoDensityCost {
    dim: usize,
    terms: Vec<CostTerm>,
    compiled: Vec<CompiledTerm>,
    reference: Option<Gaussian>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InfoDensityCostRepr {
    pub dim: usize,
    pub terms: Vec<CostTerm>,
}

impl TryFrom<InfoDensityCostRepr> for InfoDensityCost {
    type Error = Error;
    fn try_from(r: InfoDensityCostRepr) -> Result<Self> {
        InfoDensityCost::new(r.dim, r.terms)
    }
}

impl From<InfoDensityCost> for InfoDensityCostRepr {
    fn from(c: InfoDensityCost) -> Self {
        InfoDensityCostRepr { dim: c.dim, terms: c.terms }
    }
}

impl PartialEq for InfoDensityCost {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.terms == other.terms
    }
}

impl InfoDensityCost {
    /// Validates and compiles the terms. At most one entropy term is
    /// allowed, and at least one decaying term (similarity, soft limit or
    /// custom density) must be present; it keeps `exp(c)` integrable once
    /// its weight is positive.
    pub fn new(dim: usize, terms: Vec<CostTerm>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::arg("cost dimension must be positive"));
        }
        let n_entropy = terms.iter().filter(|t| matches!(t.kind, CostTermKind::EpistemicEntropy { .. })).count();
        if n_entropy > 1 {
            return Err(Error::arg("at most one entropy term"));
        }
        if !terms.iter().any(CostTerm::decays) {
            return Err(Error::arg("cost needs a similarity, soft-limit or density term"));
        }
        let mut compiled = Vec::with_capacity(terms.len());
        let mut reference = None;
        for t in &terms {
            if !t.weight.is_finite() || t.weight < 0.0 {
                return Err(Error::arg("cost weights must be finite and >= 0"));
            }
            compiled.push(match &t.kind {
                CostTermKind::EpistemicEntropy { mode, posterior } => {
                    if posterior.d_in != dim {
                        return Err(Error::dim(dim, posterior.d_in));
                    }
                    CompiledTerm::Entropy(CompiledEntropy::new(&ConditionalModel::new(posterior)?, *mode)?)
                }
                CostTermKind::SimilarityLogDensity { similarity } => {
                    if similarity.dim() != dim {
                        return Err(Error::dim(dim, similarity.dim()));
                    }
                    if reference.is_none() {
                        reference = Some(similarity.clone());
                    }
                    CompiledTerm::Gmm(CompiledGmm::new(&Gmm::single(similarity.clone())))
                }
                CostTermKind::SoftLimit { lower, upper, sharpness } => {
                    if lower.len() != dim || upper.len() != dim {
                        return Err(Error::dim(dim, lower.len()));
                    }
                    if !(*sharpness > 0.0) {
                        return Err(Error::arg("soft-limit sharpness must be positive"));
                    }
                    CompiledTerm::SoftLimit { lower: lower.clone(), upper: upper.clone(), sharpness: *sharpness }
                }
                CostTermKind::Custom { gmm } => {
                    if gmm.dim() != dim {
                        return Err(Error::dim(dim, gmm.dim()));
                    }
                    CompiledTerm::Gmm(CompiledGmm::new(gmm))
                }
            });
        }
        if reference.is_none() {
            for t in &terms {
                match &t.kind {
                    CostTermKind::SoftLimit { lower, upper, .. } => reference = mvn_from_box(lower, upper).ok(),
                    CostTermKind::Custom { gmm } => {
                        reference = Gaussian::new(gmm.mean(), gmm.covariance()).ok();
                    }
                    _ => {}
                }
                if reference.is_some() {
                    break;
                }
            }
        }
        Ok(InfoDensityCost { dim, terms, compiled, reference })
    }

    pub fn terms(&self) -> &[CostTerm] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `H₂` of the entropy term alone, if present.
    pub fn entropy(&self, x: &[f64]) -> Option<f64> {
        self.compiled.iter().find_map(|c| match c {
            CompiledTerm::Entropy(e) => Some(e.eval(x, None)),
            _ => None,
        })
    }

    /// Cost value without gradient.
    pub fn eval(&self, x: &[f64]) -> f64 {
        let mut v = 0.0;
        let mut scratch = vec![0.0; self.dim];
        for (t, c) in self.terms.iter().zip(&self.compiled) {
            if t.weight == 0.0 {
                continue;
            }
            v += t.weight
                * match c {
                    CompiledTerm::Entropy(e) => e.eval(x, None),
                    CompiledTerm::Gmm(g) => g.value_grad(x, &mut scratch),
                    CompiledTerm::SoftLimit { lower, upper, sharpness } => {
                        soft_limit_value_grad(x, lower, upper, *sharpness, &mut scratch)
                    }
                };
        }
        v
    }
}

/// Cost value at `x` (to be maximised).
pub fn info_density_logcost(cost: &InfoDensityCost, x: &[f64]) -> Result<f64> {
    if x.len() != cost.dim {
        return Err(Error::dim(cost.dim, x.len()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost input".into()));
    }
    let v = cost.eval(x);
    if !v.is_finite() {
        return Err(Error::NonFinite("cost value".into()));
    }
    Ok(v)
}

impl LogTarget for InfoDensityCost {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut tmp = vec![0.0; self.dim];
        let mut v = 0.0;
        for (t, c) in self.terms.iter().zip(&self.compiled) {
            if t.weight == 0.0 {
                continue;
            }
            let tv = match c {
                CompiledTerm::Entropy(e) => e.eval(x, Some(&mut tmp)),
                CompiledTerm::Gmm(g) => g.value_grad(x, &mut tmp),
                CompiledTerm::SoftLimit { lower, upper, sharpness } => {
                    soft_limit_value_grad(x, lower, upper, *sharpness, &mut tmp)
                }
            };
            v += t.weight * tv;
            for (g, d) in grad.iter_mut().zip(&tmp) {
                *g += t.weight * d;
            }
        }
        v
    }

    fn reference(&self) -> Option<Gaussian> {
        self.reference.clone()
    }

    fn integrable(&self) -> bool {
        self.terms.iter().any(|t| t.decays() && t.weight > 0.0)
    }
}

/// Plain GMM log-density as a target.
impl LogTarget for Gmm {
    fn dim(&self) -> usize {
        Gmm::dim(self)
    }

    fn value_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        CompiledGmm::new(self).value_grad(x, grad)
    }

    fn reference(&self) -> Option<Gaussian> {
        Gaussian::new(self.mean(), self.covariance()).ok()
    }
}
