//! Batch campaigns on the toy world: active learning, random exploration,
//! uncertainty grids and policy rollouts.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::active::{al_step, derive_seed, AlConfig, AlSession, GridProjector, HistoryEntry, QuerySource};
use crate::bgmm::{BgmmPosterior, ConditionalModel, Dataset, UncertaintyMode};
use crate::control::{poe_fuse, rollout, LinearSystem, LqtExpert, Rollout, RolloutConfig, RolloutMode, Termination};
use crate::cost::{CompiledEntropy, InfoDensityCost};
use crate::error::{Error, Result};
use crate::sim::{evaluate_rollout, Demonstration, Point, RolloutScore, TeacherOracle, World2D};
use crate::variational::VariationalGmm;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

const INITIAL_DEMO_STREAM: u64 = 11;
const ROLLOUT_STREAM: u64 = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub speed: f64,
    pub noise_std: f64,
    pub inflation: f64,
    /// Final arc length over which demonstrations decelerate.
    pub approach_distance: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { speed: 1.0, noise_std: 0.1, inflation: 0.6, approach_distance: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpertConfig {
    /// `R = r_scale I` with `Q = I`.
    pub r_scale: f64,
    /// Command variance as a multiple of the median aleatoric variance of
    /// the populated policy components.
    pub variance_factor: f64,
    /// Mixing weight above which a policy component counts as populated.
    pub weight_threshold: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig { r_scale: 100.0, variance_factor: 10.0, weight_threshold: 0.01 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutSettings {
    pub horizon: usize,
    /// Sampled rollouts per start.
    pub samples: usize,
    /// Divergence radius around the world centre, in world diagonals.
    pub divergence_factor: f64,
}

impl Default for RolloutSettings {
    fn default() -> Self {
        RolloutSettings { horizon: 1000, samples: 10, divergence_factor: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// World fixture; the embedded toy world when absent.
    pub world: Option<PathBuf>,
    pub dt: f64,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    /// Scripted demonstrations from the world's initial starts; an empty
    /// dataset otherwise.
    pub initial_demos: bool,
    /// Stop a campaign early once the stopping rule fires.
    pub stop_early: bool,
    pub active: AlConfig,
    pub teacher: TeacherConfig,
    pub expert: ExpertConfig,
    pub rollout: RolloutSettings,
    pub projector_resolution: usize,
    /// Obstacle clearance of query points.
    pub projector_margin: f64,
    pub grid_resolution: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: None,
            dt: 0.05,
            iterations: 10,
            seeds: vec![0, 1, 2, 3, 4],
            initial_demos: true,
            stop_early: false,
            active: AlConfig::default(),
            teacher: TeacherConfig::default(),
            expert: ExpertConfig::default(),
            rollout: RolloutSettings::default(),
            projector_resolution: 100,
            projector_margin: 0.1,
            grid_resolution: 100,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        if let Some(w) = &self.world {
            if !w.exists() {
                return Err(Error::Config(format!("world fixture {} does not exist", w.display())));
            }
        }
        if !(self.dt > 0.0) || self.projector_resolution == 0 || self.grid_resolution == 0 {
            return Err(Error::Config("dt and resolutions must be positive".into()));
        }
        Ok(())
    }

    pub fn load_world(&self) -> Result<World2D> {
        match &self.world {
            Some(p) => World2D::from_json_file(p),
            None => Ok(World2D::toy()),
        }
    }

    pub fn teacher(&self, world: &World2D) -> Result<TeacherOracle> {
        TeacherOracle::new(world.clone(), self.teacher.speed, self.teacher.noise_std, self.teacher.inflation, self.dt)?
            .with_approach(self.teacher.approach_distance)
    }

    pub fn projector(&self, world: &World2D) -> GridProjector {
        GridProjector::new(world.clone(), self.projector_resolution, self.projector_margin)
    }
}

/// Scripted demonstrations from the world's initial starts; none when
/// `initial_demos` is off.
pub fn initial_demonstrations(config: &ExperimentConfig, world: &World2D, seed: u64) -> Result<Vec<Demonstration>> {
    if !config.initial_demos {
        return Ok(Vec::new());
    }
    let teacher = config.teacher(world)?;
    world
        .initial_starts
        .iter()
        .enumerate()
        .map(|(i, s)| teacher.scripted_demo(*s, derive_seed(seed, i as u64, INITIAL_DEMO_STREAM)))
        .collect()
}

pub fn initial_dataset(config: &ExperimentConfig, world: &World2D, seed: u64) -> Result<Dataset> {
    let mut ds = Dataset::empty(2, 2)?;
    for d in initial_demonstrations(config, world, seed)? {
        ds.extend(&d.to_dataset()?)?;
    }
    Ok(ds)
}

/// Fits the iteration-0 session for `seed`.
pub fn initial_session(config: &ExperimentConfig, world: &World2D, seed: u64) -> Result<AlSession> {
    let ds = initial_dataset(config, world, seed)?;
    AlSession::new(config.active.clone(), ds, world.bounds.min.to_vec(), world.bounds.max.to_vec(), seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignKind {
    Active,
    Random,
}

impl CampaignKind {
    pub fn name(&self) -> &'static str {
        match self {
            CampaignKind::Active => "active",
            CampaignKind::Random => "random",
        }
    }
}

/// One seed of a campaign, with per-iteration posterior snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignRun {
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
    pub posteriors: Vec<BgmmPosterior>,
    /// First iteration at which the stopping rule fired.
    pub stop_iteration: Option<usize>,
    pub session: AlSession,
}

pub fn run_campaign(config: &ExperimentConfig, world: &World2D, kind: CampaignKind, seed: u64) -> Result<CampaignRun> {
    let mut session = initial_session(config, world, seed)?;
    let teacher = config.teacher(world)?;
    let projector = config.projector(world);
    let source = match kind {
        CampaignKind::Active => QuerySource::Active(Some(&projector)),
        CampaignKind::Random => QuerySource::Random(world, config.projector_margin),
    };
    let mut posteriors = vec![session.posterior.clone()];
    let mut stop_iteration = None;
    for _ in 0..config.iterations {
        session = al_step(&session, &source, |q, s| teacher.scripted_demo([q[0], q[1]], s)?.to_dataset())?;
        posteriors.push(session.posterior.clone());
        if stop_iteration.is_none() && session.should_stop() {
            stop_iteration = Some(session.iteration());
            if config.stop_early {
                break;
            }
        }
    }
    Ok(CampaignRun { seed, history: session.history.clone(), posteriors, stop_iteration, session })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedTrace {
    pub seed: u64,
    pub h2_q: Vec<f64>,
    pub queries: Vec<Option<Vec<f64>>>,
    pub failed: Vec<bool>,
    pub stop_iteration: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iteration: usize,
    pub mean: f64,
    /// Population standard deviation across seeds.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub schema_version: u32,
    pub kind: CampaignKind,
    pub iterations: usize,
    pub seeds: Vec<SeedTrace>,
    pub aggregate: Vec<AggregateRow>,
    /// Degree-2 least-squares fit `c0 + c1 t + c2 t²` of the mean trace.
    pub poly_fit: Vec<f64>,
}

impl CampaignReport {
    pub fn from_runs(kind: CampaignKind, iterations: usize, runs: &[CampaignRun]) -> Result<Self> {
        let seeds: Vec<SeedTrace> = runs
            .iter()
            .map(|r| SeedTrace {
                seed: r.seed,
                h2_q: r.history.iter().map(|h| h.h2_q).collect(),
                queries: r.history.iter().map(|h| h.query.clone()).collect(),
                failed: r.history.iter().map(|h| h.failed).collect(),
                stop_iteration: r.stop_iteration,
            })
            .collect();
        let len = seeds.iter().map(|s| s.h2_q.len()).max().unwrap_or(0);
        let mut aggregate = Vec::with_capacity(len);
        for it in 0..len {
            let vals: Vec<f64> = seeds.iter().filter_map(|s| s.h2_q.get(it).copied()).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            aggregate.push(AggregateRow { iteration: it, mean, std: var.sqrt(), n: vals.len() });
        }
        let poly_fit = if aggregate.len() >= 3 {
            let xs: Vec<f64> = aggregate.iter().map(|r| r.iteration as f64).collect();
            let ys: Vec<f64> = aggregate.iter().map(|r| r.mean).collect();
            polyfit(&xs, &ys, 2)?
        } else {
            Vec::new()
        };
        Ok(CampaignReport { schema_version: REPORT_SCHEMA_VERSION, kind, iterations, seeds, aggregate, poly_fit })
    }

    pub fn mean_at(&self, iteration: usize) -> Option<f64> {
        self.aggregate.get(iteration).map(|r| r.mean)
    }
}

/// Runs every configured seed; results are ordered as the seeds are.
pub fn run_campaigns(config: &ExperimentConfig, kind: CampaignKind) -> Result<(CampaignReport, Vec<CampaignRun>)> {
    config.validate()?;
    let world = config.load_world()?;
    let runs: Vec<CampaignRun> = config.seeds.par_iter().map(|&s| run_campaign(config, &world, kind, s)).collect::<Result<_>>()?;
    Ok((CampaignReport::from_runs(kind, config.iterations, &runs)?, runs))
}

pub fn run_active(config: &ExperimentConfig) -> Result<(CampaignReport, Vec<CampaignRun>)> {
    run_campaigns(config, CampaignKind::Active)
}

pub fn run_random_baseline(config: &ExperimentConfig) -> Result<(CampaignReport, Vec<CampaignRun>)> {
    run_campaigns(config, CampaignKind::Random)
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes `<kind>_report.json`, `<kind>_aggregate.csv` and, per seed,
/// `<kind>_seed<s>_{history.csv,queries.csv,q.json,posteriors.json}`.
pub fn write_campaign(dir: &Path, report: &CampaignReport, runs: &[CampaignRun]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let k = report.kind.name();
    let mut written = Vec::new();
    let p = dir.join(format!("{k}_report.json"));
    write_json(&p, report)?;
    written.push(p);

    let p = dir.join(format!("{k}_aggregate.csv"));
    let mut f = fs::File::create(&p)?;
    writeln!(f, "iteration,mean_H2_q,std_H2_q,n")?;
    for r in &report.aggregate {
        writeln!(f, "{},{},{},{}", r.iteration, r.mean, r.std, r.n)?;
    }
    written.push(p);

    for run in runs {
        let stem = format!("{k}_seed{}", run.seed);
        let p = dir.join(format!("{stem}_history.csv"));
        run.session.write_history_csv(fs::File::create(&p)?)?;
        written.push(p);

        let p = dir.join(format!("{stem}_queries.csv"));
        let mut f = fs::File::create(&p)?;
        writeln!(f, "iteration,x,y,failed")?;
        for h in &run.history {
            if let Some(q) = &h.query {
                writeln!(f, "{},{},{},{}", h.iteration, q[0], q[1], h.failed)?;
            }
        }
        written.push(p);

        let p = dir.join(format!("{stem}_q.json"));
        let qs: Vec<&VariationalGmm> = run.history.iter().map(|h| &h.q).collect();
        write_json(&p, &qs)?;
        written.push(p);

        let p = dir.join(format!("{stem}_posteriors.json"));
        write_json(&p, &run.posteriors)?;
        written.push(p);
    }
    Ok(written)
}

/// Least-squares polynomial coefficients, lowest order first.
pub fn polyfit(xs: &[f64], ys: &[f64], degree: usize) -> Result<Vec<f64>> {
    if xs.len() != ys.len() {
        return Err(Error::dim(xs.len(), ys.len()));
    }
    if xs.len() <= degree {
        return Err(Error::arg("polynomial fit needs more points than its degree"));
    }
    let a = DMatrix::from_fn(xs.len(), degree + 1, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let svd = a.svd(true, true);
    let coef = svd.solve(&b, 1e-12).map_err(|e| Error::arg(e))?;
    Ok(coef.iter().cloned().collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    Total,
    Aleatoric,
    Epistemic,
    Cost,
}

impl std::str::FromStr for GridMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(GridMode::Total),
            "aleatoric" => Ok(GridMode::Aleatoric),
            "epistemic" => Ok(GridMode::Epistemic),
            "cost" => Ok(GridMode::Cost),
            _ => Err(Error::arg(format!("unknown grid mode {s:?}"))),
        }
    }
}

/// Cell centres of a `resolution × resolution` grid, x-major.
pub fn grid_points(world: &World2D, resolution: usize) -> Vec<Point> {
    let (lo, hi) = (world.bounds.min, world.bounds.max);
    let n = resolution as f64;
    let mut pts = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            pts.push([lo[0] + (i as f64 + 0.5) * (hi[0] - lo[0]) / n, lo[1] + (j as f64 + 0.5) * (hi[1] - lo[1]) / n]);
        }
    }
    pts
}

/// `(x, y, value)` rows: H₂ of the selected uncertainty, or the
/// information-density cost.
pub fn uncertainty_grid(
    posterior: &BgmmPosterior,
    cost: Option<&InfoDensityCost>,
    world: &World2D,
    mode: GridMode,
    resolution: usize,
) -> Result<Vec<[f64; 3]>> {
    if resolution == 0 {
        return Err(Error::arg("grid resolution must be positive"));
    }
    let pts = grid_points(world, resolution);
    let values: Vec<f64> = match mode {
        GridMode::Cost => {
            let c = cost.ok_or_else(|| Error::arg("cost grid needs an information-density cost"))?;
            pts.par_iter().map(|p| c.eval(p)).collect()
        }
        _ => {
            let um = match mode {
                GridMode::Total => UncertaintyMode::Total,
                GridMode::Aleatoric => UncertaintyMode::Aleatoric,
                _ => UncertaintyMode::Epistemic,
            };
            let ent = CompiledEntropy::new(&ConditionalModel::new(posterior)?, um)?;
            pts.par_iter().map(|p| ent.eval(p, None)).collect()
        }
    };
    Ok(pts.iter().zip(values).map(|(p, v)| [p[0], p[1], v]).collect())
}

pub fn write_grid_csv<W: Write>(rows: &[[f64; 3]], mut w: W) -> Result<()> {
    writeln!(w, "x,y,value")?;
    for r in rows {
        writeln!(w, "{},{},{}", r[0], r[1], r[2])?;
    }
    Ok(())
}

/// One-standard-deviation ellipse of a 2D component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub weight: f64,
    pub mean: [f64; 2],
    /// Semi-axis lengths, major first.
    pub axes: [f64; 2],
    /// Major-axis angle in radians from the x axis.
    pub angle: f64,
}

pub fn q_ellipses(q: &VariationalGmm) -> Result<Vec<Ellipse>> {
    if q.dim() != 2 {
        return Err(Error::dim(2, q.dim()));
    }
    let g = q.gmm();
    Ok(g.weights()
        .iter()
        .zip(g.components())
        .map(|(w, c)| {
            let s = c.covariance();
            let (a, b, d) = (s[(0, 0)], s[(0, 1)], s[(1, 1)]);
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d).powi(2) + b * b).sqrt();
            let angle = 0.5 * (2.0 * b).atan2(a - d);
            Ellipse {
                weight: *w,
                mean: [c.mean()[0], c.mean()[1]],
                axes: [(mid + rad).sqrt(), (mid - rad).max(0.0).sqrt()],
                angle,
            }
        })
        .collect())
}

/// Median moment-matched aleatoric variance per output dimension over the
/// components whose mixing weight exceeds `threshold`.
pub fn median_aleatoric_variance(posterior: &BgmmPosterior, threshold: f64) -> Result<f64> {
    let model = ConditionalModel::new(posterior)?;
    let weights = posterior.mixing_weights();
    let mut v: Vec<f64> = model
        .components
        .iter()
        .zip(&weights)
        .filter(|(c, w)| **w > threshold && c.dof_cond > 2.0)
        .map(|(c, _)| c.schur.trace() * c.dof / ((c.dof_cond - 2.0) * model.d_out as f64))
        .collect();
    if v.is_empty() {
        return Err(Error::arg("no populated policy component"));
    }
    v.sort_by(f64::total_cmp);
    Ok(v[v.len() / 2])
}

pub fn expert_for(posterior: &BgmmPosterior, world: &World2D, config: &ExperimentConfig) -> Result<LqtExpert> {
    let sys = LinearSystem::single_integrator(2, config.dt)?;
    let var = config.expert.variance_factor * median_aleatoric_variance(posterior, config.expert.weight_threshold)?;
    LqtExpert::for_goal(&sys, DVector::from_row_slice(&world.goal), config.expert.r_scale, var)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Bgmm,
    Poe,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bgmm" => Ok(PolicyKind::Bgmm),
            "poe" => Ok(PolicyKind::Poe),
            _ => Err(Error::arg(format!("unknown policy kind {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub start: Vec<f64>,
    pub index: usize,
    pub policy: PolicyKind,
    pub mode: RolloutMode,
    pub rollout: Rollout,
    pub score: RolloutScore,
}

/// `samples` rollouts per start of the BGMM policy (total-uncertainty
/// conditional) or its product with the LQT expert.
#[allow(clippy::too_many_arguments)]
pub fn policy_rollouts(
    posterior: &BgmmPosterior,
    world: &World2D,
    config: &ExperimentConfig,
    policy: PolicyKind,
    mode: RolloutMode,
    starts: &[Point],
    samples: usize,
    seed: u64,
) -> Result<Vec<RolloutRecord>> {
    let model = ConditionalModel::new(posterior)?;
    let sys = LinearSystem::single_integrator(2, config.dt)?;
    let expert = match policy {
        PolicyKind::Poe => Some(expert_for(posterior, world, config)?),
        PolicyKind::Bgmm => None,
    };
    let rc = RolloutConfig {
        horizon: config.rollout.horizon,
        mode,
        goal: world.goal.to_vec(),
        goal_eps: world.goal_eps,
        center: world.center().to_vec(),
        divergence_bound: config.rollout.divergence_factor * world.diagonal(),
    };
    let jobs: Vec<(usize, usize)> = (0..starts.len()).flat_map(|s| (0..samples).map(move |i| (s, i))).collect();
    jobs.par_iter()
        .map(|&(s, i)| {
            let pol = |x: &DVector<f64>| {
                let g = model.uncertainty_gmm(x, UncertaintyMode::Total)?;
                match &expert {
                    Some(e) => poe_fuse(&g, &e.command_distribution(x)?),
                    None => Ok(g),
                }
            };
            let r = rollout(pol, &sys, &starts[s], &rc, derive_seed(seed, (s * samples + i) as u64, ROLLOUT_STREAM))?;
            let score = evaluate_rollout(world, &r);
            Ok(RolloutRecord { start: starts[s].to_vec(), index: i, policy, mode, rollout: r, score })
        })
        .collect()
}

pub fn count_diverged(records: &[RolloutRecord]) -> usize {
    records.iter().filter(|r| r.rollout.termination == Termination::Diverged).count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub schema_version: u32,
    pub policy: PolicyKind,
    pub mode: RolloutMode,
    pub rollouts: usize,
    pub diverged: usize,
    pub collided: usize,
    pub successes: usize,
}

pub fn summarize_rollouts(policy: PolicyKind, mode: RolloutMode, records: &[RolloutRecord]) -> RolloutSummary {
    RolloutSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        policy,
        mode,
        rollouts: records.len(),
        diverged: count_diverged(records),
        collided: records.iter().filter(|r| r.score.collided).count(),
        successes: records.iter().filter(|r| r.score.success).count(),
    }
}
