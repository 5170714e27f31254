//! Linear dynamics, an LQR-based stabilizing expert, product-of-experts
//! fusion and closed-loop rollouts.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{gaussian_product, Gaussian};
use crate::linalg::{self, spd_inverse};
use crate::mixture::{gmm_sample_one, Gmm};

/// Riccati fixed-point tolerance on the max-abs change of `P`.
pub const RICCATI_TOL: f64 = 1e-10;
pub const RICCATI_MAX_ITER: usize = 100_000;

/// `x_{t+1} = A x_t + B u_t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSystem {
    #[serde(with = "linalg::serde_matrix")]
    pub a: DMatrix<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub b: DMatrix<f64>,
    pub dt: f64,
}

impl LinearSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, dt: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::dim(a.nrows(), a.ncols()));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dim(a.nrows(), b.nrows()));
        }
        if !(dt > 0.0) {
            return Err(Error::arg("dt must be positive"));
        }
        Ok(LinearSystem { a, b, dt })
    }

    /// Velocity-commanded point: `x_{t+1} = x_t + dt u_t`.
    pub fn single_integrator(d: usize, dt: f64) -> Result<Self> {
        LinearSystem::new(DMatrix::identity(d, d), DMatrix::identity(d, d) * dt, dt)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn command_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.clone().complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Infinite-horizon discrete LQR gain `K` (command `u = −K x`) by Riccati
/// iteration from `P = Q`.
pub fn lqr_gain(sys: &LinearSystem, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = sys.state_dim();
    let m = sys.command_dim();
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::dim(n, q.nrows()));
    }
    if r.nrows() != m || r.ncols() != m {
        return Err(Error::dim(m, r.nrows()));
    }
    if !linalg::is_positive_definite(r) {
        return Err(Error::NotPositiveDefinite { context: "LQR command cost R".into() });
    }
    let (a, b) = (&sys.a, &sys.b);
    let at = a.transpose();
    let bt = b.transpose();
    let mut p = q.clone();
    for _ in 0..RICCATI_MAX_ITER {
        let btp = &bt * &p;
        let s = r + &btp * b;
        let gain = spd_inverse(&linalg::symmetrize(&s)?, "Riccati R + BᵀPB")? * (&btp * a);
        let next = q + &at * &p * a - &at * &p * b * &gain;
        let next = (&next + next.transpose()) * 0.5;
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("Riccati iterate".into()));
        }
        let delta = (&next - &p).amax();
        p = next;
        if delta < RICCATI_TOL {
            let btp = &bt * &p;
            let s = r + &btp * b;
            let gain = spd_inverse(&linalg::symmetrize(&s)?, "Riccati R + BᵀPB")? * (&btp * a);
            let closed = a - b * &gain;
            if spectral_radius(&closed) >= 1.0 {
                return Err(Error::arg("LQR closed loop is not stable"));
            }
            return Ok(gain);
        }
    }
    Err(Error::NoConvergence { iterations: RICCATI_MAX_ITER })
}

/// Probabilistic tracker: `u ~ N(K (target − x), Σ_u)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LqtExpert {
    #[serde(with = "linalg::serde_matrix")]
    pub gain: DMatrix<f64>,
    #[serde(with = "linalg::serde_vector")]
    pub target: DVector<f64>,
    #[serde(with = "linalg::serde_matrix")]
    pub command_covariance: DMatrix<f64>,
}

impl LqtExpert {
    /// Expert for `sys` with `Q = I`, `R = r_scale I` and isotropic command
    /// variance.
    pub fn for_goal(sys: &LinearSystem, target: DVector<f64>, r_scale: f64, variance: f64) -> Result<Self> {
        let n = sys.state_dim();
        let m = sys.command_dim();
        if target.len() != n {
            return Err(Error::dim(n, target.len()));
        }
        if !(variance > 0.0) {
            return Err(Error::arg("expert command variance must be positive"));
        }
        let gain = lqr_gain(sys, &DMatrix::identity(n, n), &(DMatrix::identity(m, m) * r_scale))?;
        Ok(LqtExpert { gain, target, command_covariance: DMatrix::identity(m, m) * variance })
    }

    pub fn command_distribution(&self, x: &DVector<f64>) -> Result<Gaussian> {
        Gaussian::new(&self.gain * (&self.target - x), self.command_covariance.clone())
    }
}

/// Product of a GMM policy with a Gaussian expert, renormalised in the log
/// domain.
pub fn poe_fuse(policy: &Gmm, expert: &Gaussian) -> Result<Gmm> {
    if policy.dim() != expert.dim() {
        return Err(Error::dim(policy.dim(), expert.dim()));
    }
    let mut log_w = Vec::with_capacity(policy.len());
    let mut comps = Vec::with_capacity(policy.len());
    for (w, c) in policy.weights().iter().zip(policy.components()) {
        let (g, log_scale) = gaussian_product(c, expert)?;
        log_w.push(w.ln() + log_scale);
        comps.push(g);
    }
    Gmm::from_log_weights(&log_w, comps)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RolloutMode {
    Sample,
    Mean,
}

impl std::str::FromStr for RolloutMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sample" => Ok(RolloutMode::Sample),
            "mean" => Ok(RolloutMode::Mean),
            other => Err(Error::arg(format!("unknown rollout mode '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GoalReached,
    MaxSteps,
    Diverged,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::GoalReached => "goal_reached",
            Termination::MaxSteps => "max_steps",
            Termination::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub mode: RolloutMode,
    pub goal: Vec<f64>,
    pub goal_eps: f64,
    /// Centre of the divergence ball.
    pub center: Vec<f64>,
    pub divergence_bound: f64,
}

/// States hold `x_0 .. x_T`; `commands[t]` moved `states[t]` to `states[t+1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub commands: Vec<Vec<f64>>,
    pub termination: Termination,
    /// Policy failure that ended the rollout, if any.
    pub error: Option<String>,
}

fn distance(a: &DVector<f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Runs the closed loop. `policy` maps a state to a command mixture.
pub fn rollout<F>(mut policy: F, sys: &LinearSystem, x0: &[f64], config: &RolloutConfig, seed: u64) -> Result<Rollout>
where
    F: FnMut(&DVector<f64>) -> Result<Gmm>,
{
    if config.horizon == 0 {
        return Err(Error::arg("horizon must be >= 1"));
    }
    let n = sys.state_dim();
    if x0.len() != n {
        return Err(Error::dim(n, x0.len()));
    }
    if config.goal.len() != n || config.center.len() != n {
        return Err(Error::dim(n, config.goal.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_row_slice(x0);
    let mut out = Rollout { states: vec![x0.to_vec()], commands: Vec::new(), termination: Termination::MaxSteps, error: None };
    if distance(&x, &config.goal) <= config.goal_eps {
        out.termination = Termination::GoalReached;
        return Ok(out);
    }
    for _ in 0..config.horizon {
        let g = match policy(&x) {
            Ok(g) => g,
            Err(e) => {
                out.termination = Termination::Diverged;
                out.error = Some(e.to_string());
                return Ok(out);
            }
        };
        let u = match config.mode {
            RolloutMode::Sample => gmm_sample_one(&g, &mut rng),
            RolloutMode::Mean => g.mean(),
        };
        x = sys.step(&x, &u);
        out.commands.push(u.iter().cloned().collect());
        out.states.push(x.iter().cloned().collect());
        if !x.iter().all(|v| v.is_finite()) || distance(&x, &config.center) > config.divergence_bound {
            out.termination = Termination::Diverged;
            return Ok(out);
        }
        if distance(&x, &config.goal) <= config.goal_eps {
            out.termination = Termination::GoalReached;
            return Ok(out);
        }
    }
    Ok(out)
}

/// CSV with header `t,x0..,u0..,termination`. The final state row has empty
/// command fields.
pub fn write_rollout_csv<W: Write>(r: &Rollout, dt: f64, mut w: W) -> Result<()> {
    let n = r.states.first().map_or(0, Vec::len);
    let m = r.commands.first().map_or(n, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.push("termination".into());
    writeln!(w, "{}", header.join(","))?;
    for (t, s) in r.states.iter().enumerate() {
        let mut row = vec![format!("{}", t as f64 * dt)];
        row.extend(s.iter().map(|v| v.to_string()));
        match r.commands.get(t) {
            Some(u) => row.extend(u.iter().map(|v| v.to_string())),
            None => row.extend((0..m).map(|_| String::new())),
        }
        row.push(r.termination.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_riccati_is_golden_ratio() {
        let sys = LinearSystem::new(scalar(1.0), scalar(1.0), 1.0).unwrap();
        let k = lqr_gain(&sys, &scalar(1.0), &scalar(1.0)).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((k[(0, 0)] - phi / (1.0 + phi)).abs() < 1e-9);
    }

    #[test]
    fn vanishing_state_cost_gives_vanishing_gain() {
        let sys = LinearSystem::new(scalar(0.5), scalar(1.0), 1.0).unwrap();
        let k = lqr_gain(&sys, &scalar(1e-12), &scalar(1.0)).unwrap();
        assert!(k[(0, 0)].abs() < 1e-9);
    }

    #[test]
    fn random_four_state_system_is_stabilised() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0)) * 0.9;
        let b = DMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let sys = LinearSystem::new(a.clone(), b.clone(), 1.0).unwrap();
        let k = lqr_gain(&sys, &DMatrix::identity(4, 4), &DMatrix::identity(2, 2)).unwrap();
        let rho = spectral_radius(&(&a - &b * &k));
        assert!(rho < 1.0);
        let mut x = DVector::from_element(4, 0.5);
        x /= x.norm();
        let steps = (10.0 / (1.0 - rho)).ceil() as usize;
        for _ in 0..steps {
            x = (&a - &b * &k) * x;
        }
        assert!(x.norm() < 1e-3);
    }

    #[test]
    fn toy_expert_gain() {
        let sys = LinearSystem::single_integrator(2, 0.05).unwrap();
        let e = LqtExpert::for_goal(&sys, DVector::from_vec(vec![1.0, 2.0]), 10.0, 0.1).unwrap();
        // Scalar Riccati: P = 1 + P − (0.05 P)² / (10 + 0.0025 P).
        let p = {
            let (a, b, c): (f64, f64, f64) = (0.0025, -0.0025, -10.0);
            (-b + (b * b - 4.0 * a * c).sqrt()) / (2.0 * a)
        };
        let k = 0.05 * p / (10.0 + 0.0025 * p);
        assert!((e.gain[(0, 0)] - k).abs() < 1e-8);
        assert!(e.gain[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn uninformative_expert_leaves_policy_unchanged() {
        let policy = Gmm::new(
            vec![0.3, 0.7],
            vec![Gaussian::isotropic(&[0.0, 1.0], 0.5).unwrap(), Gaussian::isotropic(&[2.0, -1.0], 0.2).unwrap()],
        )
        .unwrap();
        let expert = Gaussian::isotropic(&[0.0, 0.0], 1e12).unwrap();
        let fused = poe_fuse(&policy, &expert).unwrap();
        for k in 0..2 {
            assert!((fused.weights()[k] - policy.weights()[k]).abs() < 1e-3);
            assert!((fused.components()[k].mean() - policy.components()[k].mean()).amax() < 1e-3);
        }
    }

    #[test]
    fn single_component_fusion_is_gaussian_product() {
        let a = Gaussian::from_slices(&[1.0, 2.0], &[1.0, 0.2, 0.2, 0.5]).unwrap();
        let b = Gaussian::isotropic(&[0.0, 0.0], 0.3).unwrap();
        let fused = poe_fuse(&Gmm::single(a.clone()), &b).unwrap();
        let (prod, _) = gaussian_product(&a, &b).unwrap();
        assert!((fused.components()[0].mean() - prod.mean()).amax() < 1e-15);
        assert_eq!(fused.weights(), &[1.0]);
    }

    fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(d, d) * 0.1
    }

    #[test]
    fn fused_density_is_pointwise_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let comps: Vec<Gaussian> = (0..3)
            .map(|_| Gaussian::new(DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0)), random_spd(&mut rng, 2)).unwrap())
            .collect();
        let policy = Gmm::new(vec![0.2, 0.5, 0.3], comps).unwrap();
        let expert = Gaussian::new(DVector::from_vec(vec![0.5, -0.5]), random_spd(&mut rng, 2)).unwrap();
        let fused = poe_fuse(&policy, &expert).unwrap();
        let mut ratios = Vec::new();
        for _ in 0..20 {
            let x = DVector::from_fn(2, |_, _| rng.random_range(-3.0..3.0));
            let lhs = crate::mixture::gmm_log_density(&policy, &x).unwrap() + expert.log_density(&x).unwrap();
            ratios.push(lhs - crate::mixture::gmm_log_density(&fused, &x).unwrap());
        }
        for r in &ratios {
            assert!((r - ratios[0]).abs() < 1e-6);
        }
        for (f, p) in fused.components().iter().zip(policy.components()) {
            assert!(linalg::is_positive_definite(&(p.covariance() - f.covariance() + DMatrix::identity(2, 2) * 1e-12)));
        }
    }

    fn cfg(goal: Vec<f64>, mode: RolloutMode) -> RolloutConfig {
        RolloutConfig { horizon: 2000, mode, center: vec![0.0, 0.0], divergence_bound: 100.0, goal, goal_eps: 0.05 }
    }

    #[test]
    fn lqr_policy_reaches_goal() {
        let sys = LinearSystem::single_integrator(2, 0.05).unwrap();
        let goal = DVector::from_vec(vec![3.0, -2.0]);
        let e = LqtExpert::for_goal(&sys, goal.clone(), 0.01, 1e-4).unwrap();
        let r = rollout(|x| Ok(Gmm::single(e.command_distribution(x)?)), &sys, &[0.0, 0.0], &cfg(vec![3.0, -2.0], RolloutMode::Sample), 1)
            .unwrap();
        assert_eq!(r.termination, Termination::GoalReached);
        assert_eq!(r.states.len(), r.commands.len() + 1);
    }

    #[test]
    fn zero_policy_holds_state() {
        let sys = LinearSystem::single_integrator(2, 0.05).unwrap();
        let zero = Gmm::single(Gaussian::isotropic(&[0.0, 0.0], 1e-30).unwrap());
        let mut c = cfg(vec![5.0, 5.0], RolloutMode::Mean);
        c.horizon = 50;
        let r = rollout(|_| Ok(zero.clone()), &sys, &[1.0, 1.0], &c, 0).unwrap();
        assert_eq!(r.termination, Termination::MaxSteps);
        assert!(r.states.iter().all(|s| s == &vec![1.0, 1.0]));
    }

    #[test]
    fn policy_failure_marks_divergence() {
        let sys = LinearSystem::single_integrator(1, 0.05).unwrap();
        let c = RolloutConfig { horizon: 5, mode: RolloutMode::Mean, goal: vec![9.0], goal_eps: 0.1, center: vec![0.0], divergence_bound: 10.0 };
        let r = rollout(|_| Err(Error::arg("boom")), &sys, &[0.0], &c, 0).unwrap();
        assert_eq!(r.termination, Termination::Diverged);
        assert!(r.error.is_some());
    }

    #[test]
    fn rollout_csv_shape() {
        let r = Rollout {
            states: vec![vec![0.0, 0.0], vec![0.1, 0.0]],
            commands: vec![vec![2.0, 0.0]],
            termination: Termination::MaxSteps,
            error: None,
        };
        let mut buf = Vec::new();
        write_rollout_csv(&r, 0.05, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,x0,x1,u0,u1,termination");
        assert_eq!(lines[1], "0,0,0,2,0,max_steps");
        assert_eq!(lines[2], "0.05,0.1,0,,,max_steps");
    }

    proptest! {
        #[test]
        fn mean_rollouts_are_bit_identical(x in -5.0f64..5.0, y in -5.0f64..5.0, seed in 0u64..1000) {
            let sys = LinearSystem::single_integrator(2, 0.05).unwrap();
            let e = LqtExpert::for_goal(&sys, DVector::from_vec(vec![1.0, 1.0]), 1.0, 0.5).unwrap();
            let policy = |s: &DVector<f64>| Ok(Gmm::single(e.command_distribution(s)?));
            let c = cfg(vec![1.0, 1.0], RolloutMode::Mean);
            let a = rollout(policy, &sys, &[x, y], &c, seed).unwrap();
            let b = rollout(policy, &sys, &[x, y], &c, seed + 1).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn fusion_preserves_normalisation(w in 0.01f64..0.99, m in -3.0f64..3.0, v in 0.01f64..10.0) {
            let policy = Gmm::new(
                vec![w, 1.0 - w],
                vec![Gaussian::isotropic(&[m], 1.0).unwrap(), Gaussian::isotropic(&[-m], 0.5).unwrap()],
            ).unwrap();
            let fused = poe_fuse(&policy, &Gaussian::isotropic(&[0.3], v).unwrap()).unwrap();
            let s: f64 = fused.weights().iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
