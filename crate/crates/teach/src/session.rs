//! One teaching session as a synchronous state machine.
//!
//! Transitions: `idle → awaiting_demo` on a query, `awaiting_demo → fitting`
//! on an accepted demonstration, `fitting → idle` when the refit lands.
//! Every accepted mutation appends one [`Event`]; replaying the events from
//! a fresh state reproduces the session exactly.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use alfd_core::active::{derive_seed, AlSession, HistoryEntry, QuerySource};
use alfd_core::bgmm::Dataset;
use alfd_core::control::RolloutMode;
use alfd_core::experiment::{
    initial_demonstrations, policy_rollouts, q_ellipses, summarize_rollouts, uncertainty_grid, Ellipse, ExperimentConfig,
    GridMode, PolicyKind, RolloutRecord, RolloutSummary,
};
use alfd_core::sim::{dist, resample_polyline, DemoSource, Demonstration, Point, World2D};
use alfd_core::variational::VariationalGmm;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ServiceError, ServiceResult};

pub const SCHEMA_VERSION: u32 = 1;

/// Seed stream of rollouts served to the UI.
const ROLLOUT_VIEW_STREAM: u64 = 21;

/// Largest grid and rollout requests served.
pub const MAX_GRID_RESOLUTION: usize = 400;
pub const MAX_ROLLOUTS_PER_START: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    AwaitingDemo,
    Fitting,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    Create { schema_version: u32, id: String, seed: u64, config: Box<ExperimentConfig>, world: Box<World2D> },
    /// The served point is recorded so replay can check it.
    Query { point: Point },
    Demo { polyline: Vec<Point>, timestamps: Option<Vec<f64>> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateRequest {
    pub schema_version: Option<u32>,
    /// Partial configurations fill in from the defaults.
    pub config: Option<ExperimentConfig>,
    /// The embedded toy world when absent.
    pub world: Option<World2D>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoRequest {
    pub schema_version: Option<u32>,
    pub polyline: Vec<Point>,
    /// One per polyline point, strictly increasing.
    pub timestamps: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub schema_version: u32,
    pub id: String,
    pub status: Status,
    pub pending_query: Option<Point>,
    pub iteration: usize,
    pub dataset_size: usize,
    pub demos: usize,
    pub h2_q: f64,
    pub should_stop: bool,
    pub state_hash: String,
    pub world: World2D,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResponse {
    pub schema_version: u32,
    pub query: Point,
    pub h2_q: f64,
    pub ellipses: Vec<Ellipse>,
    pub q: VariationalGmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemoAccepted {
    pub schema_version: u32,
    pub status: Status,
    pub resampled_states: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub h2_q: f64,
    pub dataset_size: usize,
    pub failed: bool,
    pub query: Option<Vec<f64>>,
    pub note: Option<String>,
}

impl From<&HistoryEntry> for HistoryRow {
    fn from(h: &HistoryEntry) -> Self {
        HistoryRow {
            iteration: h.iteration,
            h2_q: h.h2_q,
            dataset_size: h.dataset_size,
            failed: h.failed,
            query: h.query.clone(),
            note: h.note.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryView {
    pub schema_version: u32,
    pub rows: Vec<HistoryRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridView {
    pub schema_version: u32,
    pub mode: GridMode,
    pub resolution: usize,
    /// `(x, y, value)` at cell centres, x-major.
    pub cells: Vec<[f64; 3]>,
    pub min: f64,
    pub max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutPath {
    pub start: Vec<f64>,
    pub index: usize,
    pub states: Vec<Vec<f64>>,
    pub success: bool,
    pub collided: bool,
    pub diverged: bool,
}

impl From<&RolloutRecord> for RolloutPath {
    fn from(r: &RolloutRecord) -> Self {
        RolloutPath {
            start: r.start.clone(),
            index: r.index,
            states: r.rollout.states.clone(),
            success: r.score.success,
            collided: r.score.collided,
            diverged: r.rollout.termination == alfd_core::control::Termination::Diverged,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutView {
    pub schema_version: u32,
    pub summary: RolloutSummary,
    pub rollouts: Vec<RolloutPath>,
}

/// Refit work detached from the session so it can run off the request path.
#[derive(Clone, Debug)]
pub struct FitJob {
    al: AlSession,
    demo: Demonstration,
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    al: AlSession,
    demo: Demonstration,
    succeeded: bool,
}

impl FitJob {
    pub fn run(self) -> FitOutcome {
        let query = self.demo.query.map(|q| q.to_vec()).unwrap_or_default();
        let result = self.demo.to_dataset().and_then(|ds| self.al.incorporate(query.clone(), &ds));
        match result {
            Ok(al) => FitOutcome { al, demo: self.demo, succeeded: true },
            Err(e) => {
                log::warn!("refit failed: {e}");
                FitOutcome { al: self.al.record_failure(Some(query), e.to_string()), demo: self.demo, succeeded: false }
            }
        }
    }
}

fn check_schema(v: Option<u32>) -> ServiceResult<()> {
    match v {
        Some(v) if v != SCHEMA_VERSION => {
            Err(ServiceError::Invalid(format!("schema_version {v} is not supported (expected {SCHEMA_VERSION})")))
        }
        _ => Ok(()),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drawing speed: median over segments of length over elapsed time.
fn drawn_speed(polyline: &[Point], timestamps: &[f64]) -> ServiceResult<f64> {
    if timestamps.len() != polyline.len() {
        return Err(ServiceError::Invalid(format!(
            "{} timestamps for {} polyline points",
            timestamps.len(),
            polyline.len()
        )));
    }
    let mut speeds = Vec::with_capacity(polyline.len() - 1);
    for i in 1..polyline.len() {
        let dt = timestamps[i] - timestamps[i - 1];
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(ServiceError::Invalid("timestamps must be finite and strictly increasing".into()));
        }
        let len = dist(polyline[i - 1], polyline[i]);
        if len > 0.0 {
            speeds.push(len / dt);
        }
    }
    if speeds.is_empty() {
        return Err(ServiceError::Invalid("polyline has zero length".into()));
    }
    Ok(median(speeds))
}

/// Human demonstration from a drawn polyline: arc-length resampling on the
/// session's time step at the configured or drawn speed.
pub fn resample_drawing(
    world: &World2D,
    polyline: &[Point],
    timestamps: Option<&[f64]>,
    speed: f64,
    dt: f64,
    query: Option<Point>,
) -> ServiceResult<Demonstration> {
    if polyline.len() < 2 {
        return Err(ServiceError::Invalid(format!("polyline needs at least 2 points, got {}", polyline.len())));
    }
    if polyline.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ServiceError::Invalid("polyline has non-finite coordinates".into()));
    }
    if let Some(i) = polyline.iter().position(|p| world.collides(*p)) {
        return Err(ServiceError::Invalid(format!("polyline point {i} {:?} is in collision", polyline[i])));
    }
    if let Some(i) = polyline.windows(2).position(|w| world.segment_collides(w[0], w[1], 0.0)) {
        return Err(ServiceError::Invalid(format!("polyline segment {i} crosses an obstacle")));
    }
    let speed = match timestamps {
        Some(t) => drawn_speed(polyline, t)?,
        None => speed,
    };
    let (states, commands) = resample_polyline(polyline, speed, dt).map_err(|e| ServiceError::Invalid(e.to_string()))?;
    Ok(Demonstration { states, commands, source: DemoSource::Human, query })
}

#[derive(Clone, Debug, Serialize)]
pub struct SessionState {
    pub id: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub world: World2D,
    pub al: AlSession,
    pub demos: Vec<Demonstration>,
    pub pending_query: Option<Point>,
    pub status: Status,
    pub events: Vec<Event>,
}

impl SessionState {
    /// Fits the initial demonstrations (or the prior alone); status idle.
    pub fn create(id: String, request: CreateRequest) -> ServiceResult<Self> {
        check_schema(request.schema_version)?;
        let mut config = request.config.unwrap_or_default();
        let world = match request.world {
            Some(w) => w,
            None => config.load_world().map_err(|e| ServiceError::Invalid(e.to_string()))?,
        };
        config.world = None;
        config.validate().map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let seed = request.seed.unwrap_or(config.seeds[0]);
        let demos = initial_demonstrations(&config, &world, seed).map_err(|e| ServiceError::Invalid(e.to_string()))?;
        let mut ds = Dataset::empty(2, 2)?;
        for d in &demos {
            ds.extend(&d.to_dataset()?)?;
        }
        let al = AlSession::new(config.active.clone(), ds, world.bounds.min.to_vec(), world.bounds.max.to_vec(), seed)?;
        let create = Event::Create {
            schema_version: SCHEMA_VERSION,
            id: id.clone(),
            seed,
            config: Box::new(config.clone()),
            world: Box::new(world.clone()),
        };
        Ok(SessionState { id, seed, config, world, al, demos, pending_query: None, status: Status::Idle, events: vec![create] })
    }

    fn require(&self, wanted: Status, action: &str) -> ServiceResult<()> {
        match self.status {
            s if s == wanted => Ok(()),
            Status::Fitting => Err(ServiceError::Busy),
            s => Err(ServiceError::Conflict(format!("cannot {action} while {}", status_name(s)))),
        }
    }

    /// Selects the next query from the current q; status → awaiting_demo.
    pub fn request_query(&mut self) -> ServiceResult<QueryResponse> {
        self.require(Status::Idle, "request a query")?;
        let projector = self.config.projector(&self.world);
        let q = self.al.next_query(&QuerySource::Active(Some(&projector)))?;
        let point = [q[0], q[1]];
        let response = QueryResponse {
            schema_version: SCHEMA_VERSION,
            query: point,
            h2_q: self.al.h2_q(),
            ellipses: q_ellipses(&self.al.q)?,
            q: self.al.q.clone(),
        };
        self.pending_query = Some(point);
        self.status = Status::AwaitingDemo;
        self.events.push(Event::Query { point });
        Ok(response)
    }

    /// Validates and resamples a drawing; status → fitting. The returned job
    /// must be run and handed to [`SessionState::finish_fit`].
    pub fn begin_demo(&mut self, request: DemoRequest) -> ServiceResult<(FitJob, DemoAccepted)> {
        check_schema(request.schema_version)?;
        self.require(Status::AwaitingDemo, "submit a demonstration")?;
        let demo = resample_drawing(
            &self.world,
            &request.polyline,
            request.timestamps.as_deref(),
            self.config.teacher.speed,
            self.config.dt,
            self.pending_query,
        )?;
        let accepted = DemoAccepted { schema_version: SCHEMA_VERSION, status: Status::Fitting, resampled_states: demo.len() };
        self.status = Status::Fitting;
        self.events.push(Event::Demo { polyline: request.polyline, timestamps: request.timestamps });
        Ok((FitJob { al: self.al.clone(), demo }, accepted))
    }

    /// Lands a refit; a failed refit is recorded in the history. Status → idle.
    pub fn finish_fit(&mut self, outcome: FitOutcome) {
        debug_assert_eq!(self.status, Status::Fitting);
        self.al = outcome.al;
        if outcome.succeeded {
            self.demos.push(outcome.demo);
        }
        self.pending_query = None;
        self.status = Status::Idle;
    }

    /// [`SessionState::begin_demo`], the refit and [`SessionState::finish_fit`]
    /// in one call.
    pub fn submit_demo(&mut self, request: DemoRequest) -> ServiceResult<DemoAccepted> {
        let (job, mut accepted) = self.begin_demo(request)?;
        self.finish_fit(job.run());
        accepted.status = self.status;
        Ok(accepted)
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            schema_version: SCHEMA_VERSION,
            id: self.id.clone(),
            status: self.status,
            pending_query: self.pending_query,
            iteration: self.al.iteration(),
            dataset_size: self.al.dataset.len(),
            demos: self.demos.len(),
            h2_q: self.al.h2_q(),
            should_stop: self.al.should_stop(),
            state_hash: self.state_hash(),
            world: self.world.clone(),
        }
    }

    pub fn history(&self) -> HistoryView {
        HistoryView { schema_version: SCHEMA_VERSION, rows: self.al.history.iter().map(HistoryRow::from).collect() }
    }

    pub fn grid(&self, mode: GridMode, resolution: Option<usize>) -> ServiceResult<GridView> {
        let resolution = resolution.unwrap_or(self.config.grid_resolution);
        if resolution == 0 || resolution > MAX_GRID_RESOLUTION {
            return Err(ServiceError::Invalid(format!("resolution must be in 1..={MAX_GRID_RESOLUTION}")));
        }
        let cells = uncertainty_grid(&self.al.posterior, Some(&self.al.cost), &self.world, mode, resolution)?;
        let min = cells.iter().map(|c| c[2]).fold(f64::INFINITY, f64::min);
        let max = cells.iter().map(|c| c[2]).fold(f64::NEG_INFINITY, f64::max);
        Ok(GridView { schema_version: SCHEMA_VERSION, mode, resolution, cells, min, max })
    }

    /// `n` rollouts from each of the world's held-out starts.
    pub fn rollouts(&self, n: usize, mode: RolloutMode, policy: PolicyKind) -> ServiceResult<RolloutView> {
        if n == 0 || n > MAX_ROLLOUTS_PER_START {
            return Err(ServiceError::Invalid(format!("n must be in 1..={MAX_ROLLOUTS_PER_START}")));
        }
        let seed = derive_seed(self.seed, self.al.iteration() as u64, ROLLOUT_VIEW_STREAM);
        let records =
            policy_rollouts(&self.al.posterior, &self.world, &self.config, policy, mode, &self.world.test_starts, n, seed)?;
        Ok(RolloutView {
            schema_version: SCHEMA_VERSION,
            summary: summarize_rollouts(policy, mode, &records),
            rollouts: records.iter().map(RolloutPath::from).collect(),
        })
    }

    /// SHA-256 of the canonical JSON of the whole state, hex encoded.
    pub fn state_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("session state serializes");
        Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn posterior_json(&self) -> String {
        serde_json::to_string(&self.al.posterior).expect("posterior serializes")
    }

    /// Rebuilds a session from its event log, running each refit inline.
    pub fn replay(events: &[Event]) -> ServiceResult<Self> {
        let mut it = events.iter();
        let mut state = match it.next() {
            Some(Event::Create { schema_version, id, seed, config, world }) => SessionState::create(
                id.clone(),
                CreateRequest {
                    schema_version: Some(*schema_version),
                    config: Some((**config).clone()),
                    world: Some((**world).clone()),
                    seed: Some(*seed),
                },
            )?,
            _ => return Err(ServiceError::Invalid("event log must start with a create event".into())),
        };
        for (i, ev) in it.enumerate() {
            match ev {
                Event::Create { .. } => return Err(ServiceError::Invalid(format!("event {} is a second create", i + 1))),
                Event::Query { point } => {
                    let served = state.request_query()?.query;
                    if served != *point {
                        return Err(ServiceError::Invalid(format!(
                            "replay diverged at event {}: query {served:?} != logged {point:?}",
                            i + 1
                        )));
                    }
                }
                Event::Demo { polyline, timestamps } => {
                    state.submit_demo(DemoRequest {
                        schema_version: Some(SCHEMA_VERSION),
                        polyline: polyline.clone(),
                        timestamps: timestamps.clone(),
                    })?;
                }
            }
        }
        Ok(state)
    }
}

fn status_name(s: Status) -> &'static str {
    match s {
        Status::Idle => "idle",
        Status::AwaitingDemo => "awaiting a demonstration",
        Status::Fitting => "fitting",
    }
}

/// Appends events as JSON lines.
pub fn append_events(path: &Path, events: &[Event]) -> ServiceResult<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for ev in events {
        let line = serde_json::to_string(ev).map_err(|e| ServiceError::Internal(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    f.sync_data()?;
    Ok(())
}

pub fn read_events(path: &Path) -> ServiceResult<Vec<Event>> {
    let mut events = Vec::new();
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| ServiceError::Invalid(format!("event log line {}: {e}", i + 1)))?,
        );
    }
    Ok(events)
}

pub fn replay_log(path: &Path) -> ServiceResult<SessionState> {
    SessionState::replay(&read_events(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_unit_line_resamples_to_one_state_per_step() {
        let w = World2D::toy();
        let d = resample_drawing(&w, &[[1.0, 1.0], [2.0, 1.0]], None, 1.0, 0.05, None).unwrap();
        assert_eq!(d.len(), 21);
        assert_eq!(d.states[20], [2.0, 1.0]);
        assert!(d.commands[..20].iter().all(|u| (u[0] - 1.0).abs() < 1e-9 && u[1].abs() < 1e-9));
        assert_eq!(d.commands[20], [0.0, 0.0]);
        assert_eq!(d.source, DemoSource::Human);
    }

    #[test]
    fn timestamps_set_the_median_drawn_speed() {
        let w = World2D::toy();
        let line = [[1.0, 1.0], [1.5, 1.0], [2.0, 1.0], [3.0, 1.0]];
        // Segment speeds 0.5, 2, 2: median 2.
        let d = resample_drawing(&w, &line, Some(&[0.0, 1.0, 1.25, 1.75]), 1.0, 0.05, None).unwrap();
        assert_eq!(d.len(), 21);
        assert!((d.commands[0][0] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn bad_drawings_are_rejected() {
        let w = World2D::toy();
        let inside = w.obstacles[0].center();
        assert!(resample_drawing(&w, &[[1.0, 1.0]], None, 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], inside], None, 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], [11.0, 1.0]], None, 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], [f64::NAN, 1.0]], None, 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], [2.0, 1.0]], Some(&[1.0, 1.0]), 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], [2.0, 1.0]], Some(&[0.0]), 1.0, 0.05, None).is_err());
        assert!(resample_drawing(&w, &[[1.0, 1.0], [1.0, 1.0]], Some(&[0.0, 1.0]), 1.0, 0.05, None).is_err());
    }

    #[test]
    fn segment_through_an_obstacle_is_rejected_even_with_free_endpoints() {
        let w = World2D::toy();
        let o = &w.obstacles[0];
        let c = o.center();
        let a = [c[0], o.min[1] - 0.2];
        let b = [c[0], o.max[1] + 0.2];
        assert!(!w.collides(a) && !w.collides(b));
        let err = resample_drawing(&w, &[a, b], None, 1.0, 0.05, None).unwrap_err();
        assert!(err.to_string().contains("obstacle"), "{err}");
    }

    #[test]
    fn median_of_even_and_odd_lengths() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn unsupported_schema_version_is_invalid() {
        assert!(check_schema(Some(SCHEMA_VERSION + 1)).is_err());
        assert!(check_schema(Some(SCHEMA_VERSION)).is_ok());
        assert!(check_schema(None).is_ok());
    }
}
