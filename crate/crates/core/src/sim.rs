//! Planar reaching world with rectangular obstacles, a scripted teacher and
//! rollout scoring.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bgmm::Dataset;
use crate::control::{Rollout, Termination};
use crate::error::{Error, Result};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

/// The shipped toy world.
pub const TOY_WORLD_JSON: &str = include_str!("../fixtures/toy_world.json");

pub type Point = [f64; 2];

/// Closed axis-aligned rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Point,
    pub max: Point,
}

impl Rect {
    pub fn new(min: Point, max: Point) -> Result<Self> {
        if !(min[0] < max[0] && min[1] < max[1]) {
            return Err(Error::arg(format!("degenerate rectangle {min:?}..{max:?}")));
        }
        Ok(Rect { min, max })
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    fn contains_strict(&self, p: Point) -> bool {
        p[0] > self.min[0] && p[0] < self.max[0] && p[1] > self.min[1] && p[1] < self.max[1]
    }

    pub fn inflate(&self, r: f64) -> Rect {
        Rect { min: [self.min[0] - r, self.min[1] - r], max: [self.max[0] + r, self.max[1] + r] }
    }

    pub fn center(&self) -> Point {
        [(self.min[0] + self.max[0]) / 2.0, (self.min[1] + self.max[1]) / 2.0]
    }

    pub fn width(&self) -> Point {
        [self.max[0] - self.min[0], self.max[1] - self.min[1]]
    }

    /// Parameter interval of `a + t (b − a)`, `t ∈ [0, 1]`, inside the
    /// closed rectangle.
    fn clip(&self, a: Point, b: Point) -> Option<(f64, f64)> {
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..2 {
            let d = b[axis] - a[axis];
            if d == 0.0 {
                if a[axis] < self.min[axis] || a[axis] > self.max[axis] {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((self.min[axis] - a[axis]) / d, (self.max[axis] - a[axis]) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        Some((t0, t1))
    }

    /// Whether the segment meets the closed rectangle.
    pub fn segment_hits(&self, a: Point, b: Point) -> bool {
        self.clip(a, b).is_some()
    }

    /// Whether the segment passes through the open interior. The interior
    /// points of a chord through a convex set form its relative interior, so
    /// testing the chord midpoint suffices.
    pub fn segment_hits_interior(&self, a: Point, b: Point) -> bool {
        match self.clip(a, b) {
            Some((t0, t1)) => {
                let t = 0.5 * (t0 + t1);
                self.contains_strict(lerp(a, b, t))
            }
            None => false,
        }
    }
}

pub fn lerp(a: Point, b: Point, t: f64) -> Point {
    [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
}

pub fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WorldRepr", into = "WorldRepr")]
pub struct World2D {
    pub name: String,
    pub bounds: Rect,
    pub obstacles: Vec<Rect>,
    pub goal: Point,
    pub goal_eps: f64,
    pub initial_starts: Vec<Point>,
    pub test_starts: Vec<Point>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WorldRepr {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub bounds: Rect,
    pub obstacles: Vec<Rect>,
    pub goal: Point,
    pub goal_eps: f64,
    #[serde(default)]
    pub initial_starts: Vec<Point>,
    #[serde(default)]
    pub test_starts: Vec<Point>,
}

impl TryFrom<WorldRepr> for World2D {
    type Error = Error;
    fn try_from(r: WorldRepr) -> Result<Self> {
        if r.schema_version != WORLD_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "world schema_version {} unsupported (expected {WORLD_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        World2D::new(r.name, r.bounds, r.obstacles, r.goal, r.goal_eps, r.initial_starts, r.test_starts)
    }
}

impl From<World2D> for WorldRepr {
    fn from(w: World2D) -> Self {
        WorldRepr {
            schema_version: WORLD_SCHEMA_VERSION,
            name: w.name,
            bounds: w.bounds,
            obstacles: w.obstacles,
            goal: w.goal,
            goal_eps: w.goal_eps,
            initial_starts: w.initial_starts,
            test_starts: w.test_starts,
        }
    }
}

impl World2D {
    pub fn new(
        name: String,
        bounds: Rect,
        obstacles: Vec<Rect>,
        goal: Point,
        goal_eps: f64,
        initial_starts: Vec<Point>,
        test_starts: Vec<Point>,
    ) -> Result<Self> {
        Rect::new(bounds.min, bounds.max)?;
        for o in &obstacles {
            Rect::new(o.min, o.max)?;
            if !(bounds.contains(o.min) && bounds.contains(o.max)) {
                return Err(Error::arg(format!("obstacle {o:?} leaves the bounds")));
            }
        }
        if !(goal_eps > 0.0) {
            return Err(Error::arg("goal_eps must be positive"));
        }
        let w = World2D { name, bounds, obstacles, goal, goal_eps, initial_starts, test_starts };
        if w.collides(goal) {
            return Err(Error::arg("goal collides or lies outside the bounds"));
        }
        for s in w.initial_starts.iter().chain(&w.test_starts) {
            if w.collides(*s) {
                return Err(Error::arg(format!("start {s:?} collides")));
            }
        }
        Ok(w)
    }

    pub fn toy() -> Self {
        serde_json::from_str(TOY_WORLD_JSON).expect("shipped fixture is valid")
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// True inside any obstacle (closed) or outside the bounds.
    pub fn collides(&self, p: Point) -> bool {
        !self.bounds.contains(p) || self.obstacles.iter().any(|o| o.contains(p))
    }

    /// Point check with every obstacle grown by `margin`.
    pub fn collides_with_margin(&self, p: Point, margin: f64) -> bool {
        !self.bounds.contains(p) || self.obstacles.iter().any(|o| o.inflate(margin).contains(p))
    }

    /// Segment check with obstacles grown by `margin`.
    pub fn segment_collides(&self, a: Point, b: Point, margin: f64) -> bool {
        !self.bounds.contains(a) || !self.bounds.contains(b) || self.obstacles.iter().any(|o| o.inflate(margin).segment_hits(a, b))
    }

    pub fn diagonal(&self) -> f64 {
        dist(self.bounds.min, self.bounds.max)
    }

    pub fn center(&self) -> Point {
        self.bounds.center()
    }

    /// Whether the goal region has been reached.
    pub fn at_goal(&self, p: Point) -> bool {
        dist(p, self.goal) <= self.goal_eps
    }
}

/// Drawn or scripted trajectory with commands consistent with finite
/// differences of the states; the final command is zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub states: Vec<Point>,
    pub commands: Vec<Point>,
    pub source: DemoSource,
    pub query: Option<Point>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    Scripted,
    Human,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Joint rows `[x, y, vx, vy]`.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let mut ds = Dataset::empty(2, 2)?;
        for (s, u) in self.states.iter().zip(&self.commands) {
            ds.push(&[s[0], s[1], u[0], u[1]])?;
        }
        Ok(ds)
    }

    pub fn write_csv<W: Write>(&self, dt: f64, mut w: W) -> Result<()> {
        writeln!(w, "t,x,y,vx,vy")?;
        for (i, (s, u)) in self.states.iter().zip(&self.commands).enumerate() {
            writeln!(w, "{},{},{},{},{}", i as f64 * dt, s[0], s[1], u[0], u[1])?;
        }
        Ok(())
    }
}

fn polyline_lengths(points: &[Point], speed: f64, dt: f64) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::arg("polyline needs at least two points"));
    }
    if !(speed > 0.0 && dt > 0.0) {
        return Err(Error::arg("speed and dt must be positive"));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("polyline".into()));
    }
    let mut cum = vec![0.0];
    for w in points.windows(2) {
        cum.push(cum.last().unwrap() + dist(w[0], w[1]));
    }
    if *cum.last().unwrap() <= 0.0 {
        return Err(Error::arg("polyline has zero length"));
    }
    Ok(cum)
}

/// Points at non-decreasing arc lengths `arcs` along the polyline.
fn points_at(points: &[Point], cum: &[f64], arcs: &[f64]) -> Vec<Point> {
    let mut seg = 0;
    arcs.iter()
        .map(|&s| {
            while seg + 1 < points.len() - 1 && cum[seg + 1] < s {
                seg += 1;
            }
            let len = cum[seg + 1] - cum[seg];
            let t = if len > 0.0 { ((s - cum[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
            lerp(points[seg], points[seg + 1], t)
        })
        .collect()
}

/// Resamples a polyline by arc length at constant `speed`, one state every
/// `dt`; the final state is the polyline end. Commands are forward finite
/// differences, the last one zero.
pub fn resample_polyline(points: &[Point], speed: f64, dt: f64) -> Result<(Vec<Point>, Vec<Point>)> {
    let cum = polyline_lengths(points, speed, dt)?;
    let total = *cum.last().unwrap();
    let h = speed * dt;
    let steps = ((total / h) - 1e-9).ceil().max(1.0) as usize;
    let arcs: Vec<f64> = (0..=steps).map(|i| (i as f64 * h).min(total)).collect();
    let mut states = points_at(points, &cum, &arcs);
    *states.last_mut().unwrap() = *points.last().unwrap();
    let commands = finite_difference_commands(&states, dt);
    Ok((states, commands))
}

/// Constant `speed` until `approach` arc length remains, then speed
/// proportional to the remaining length, so the remainder shrinks by the
/// factor `1 − speed·dt/approach` per step. Sampling ends once less than
/// `stop` remains; the final state is not moved onto the polyline end.
pub fn resample_with_approach(points: &[Point], speed: f64, dt: f64, approach: f64, stop: f64) -> Result<(Vec<Point>, Vec<Point>)> {
    if approach <= 0.0 {
        return resample_polyline(points, speed, dt);
    }
    if !(stop > 0.0) || speed * dt >= approach {
        return Err(Error::arg("approach must exceed one cruise step and stop must be positive"));
    }
    let cum = polyline_lengths(points, speed, dt)?;
    let total = *cum.last().unwrap();
    let mut arcs = vec![0.0];
    let mut s: f64 = 0.0;
    while total - s > stop {
        let remaining = total - s;
        s += if remaining > approach { speed * dt } else { remaining * speed * dt / approach };
        arcs.push(s.min(total));
    }
    let states = points_at(points, &cum, &arcs);
    let commands = finite_difference_commands(&states, dt);
    Ok((states, commands))
}

fn finite_difference_commands(states: &[Point], dt: f64) -> Vec<Point> {
    let mut commands: Vec<Point> =
        states.windows(2).map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt]).collect();
    commands.push([0.0, 0.0]);
    commands
}

/// Scripted stand-in for the human teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherOracle {
    pub world: World2D,
    pub speed: f64,
    pub noise_std: f64,
    /// Obstacle clearance of the planned path.
    pub inflation: f64,
    pub dt: f64,
    /// Noise redraws before giving up on a clearance violation.
    pub max_retries: usize,
    /// Final arc length over which the demonstration decelerates; zero
    /// keeps the speed constant up to the goal.
    #[serde(default)]
    pub approach_distance: f64,
}

#[derive(Clone, Copy, PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Dijkstra over a dense symmetric adjacency given as a cost callback;
/// returns the node sequence from `src` to `dst`.
fn dijkstra<F: Fn(usize, usize) -> Option<f64>>(n: usize, src: usize, dst: usize, edge: F) -> Option<(Vec<usize>, f64)> {
    let mut best = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    best[src] = 0.0;
    heap.push(HeapItem(0.0, src));
    while let Some(HeapItem(d, u)) = heap.pop() {
        if d > best[u] {
            continue;
        }
        if u == dst {
            break;
        }
        for v in 0..n {
            if v == u {
                continue;
            }
            if let Some(w) = edge(u, v) {
                let nd = d + w;
                if nd < best[v] {
                    best[v] = nd;
                    prev[v] = u;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
    }
    if !best[dst].is_finite() {
        return None;
    }
    let mut path = vec![dst];
    while *path.last().unwrap() != src {
        path.push(prev[*path.last().unwrap()]);
    }
    path.reverse();
    Some((path, best[dst]))
}

impl TeacherOracle {
    pub fn new(world: World2D, speed: f64, noise_std: f64, inflation: f64, dt: f64) -> Result<Self> {
        if !(speed > 0.0 && inflation > 0.0 && dt > 0.0 && noise_std >= 0.0) {
            return Err(Error::arg("teacher needs positive speed, inflation, dt and non-negative noise"));
        }
        Ok(TeacherOracle { world, speed, noise_std, inflation, dt, max_retries: 20, approach_distance: 0.0 })
    }

    pub fn with_approach(mut self, approach_distance: f64) -> Result<Self> {
        if !(approach_distance >= 0.0) {
            return Err(Error::arg("approach distance must be non-negative"));
        }
        self.approach_distance = approach_distance;
        Ok(self)
    }

    fn inflated(&self) -> Vec<Rect> {
        self.world.obstacles.iter().map(|o| o.inflate(self.inflation)).collect()
    }

    fn free_segment(&self, inflated: &[Rect], a: Point, b: Point) -> bool {
        inflated.iter().all(|r| !r.segment_hits_interior(a, b))
    }

    /// Moves a point lying inside the inflation zone to the nearest point of
    /// the zone boundary, repeated for overlapping zones.
    fn escape(&self, inflated: &[Rect], mut p: Point) -> Point {
        for _ in 0..4 * inflated.len().max(1) {
            let Some(r) = inflated.iter().find(|r| r.contains_strict(p)) else { break };
            let moves = [
                (p[0] - r.min[0], [r.min[0], p[1]]),
                (r.max[0] - p[0], [r.max[0], p[1]]),
                (p[1] - r.min[1], [p[0], r.min[1]]),
                (r.max[1] - p[1], [p[0], r.max[1]]),
            ];
            let candidates = moves.iter().filter(|(_, q)| self.world.bounds.contains(*q));
            match candidates.min_by(|a, b| a.0.total_cmp(&b.0)) {
                Some((_, q)) => p = *q,
                None => break,
            }
        }
        p
    }

    /// Shortest polyline from `x0` to the goal around the inflated obstacles.
    pub fn plan(&self, x0: Point) -> Result<Vec<Point>> {
        if self.world.collides(x0) {
            return Err(Error::NoPath { start: x0.to_vec() });
        }
        let inflated = self.inflated();
        let start = self.escape(&inflated, x0);
        let goal = self.escape(&inflated, self.world.goal);
        let mut nodes = vec![start, goal];
        for r in &inflated {
            for c in [r.min, [r.max[0], r.min[1]], r.max, [r.min[0], r.max[1]]] {
                if self.world.bounds.contains(c) && !inflated.iter().any(|o| o.contains_strict(c)) {
                    nodes.push(c);
                }
            }
        }
        let (idx, _) = dijkstra(nodes.len(), 0, 1, |u, v| {
            self.free_segment(&inflated, nodes[u], nodes[v]).then(|| dist(nodes[u], nodes[v]))
        })
        .ok_or_else(|| Error::NoPath { start: x0.to_vec() })?;
        let mut path = Vec::with_capacity(idx.len() + 2);
        if start != x0 {
            path.push(x0);
        }
        path.extend(idx.iter().map(|i| nodes[*i]));
        if goal != self.world.goal {
            path.push(self.world.goal);
        }
        path.dedup();
        Ok(path)
    }

    /// Planned path followed at constant speed, decelerating over the
    /// approach distance and stopping within half the goal tolerance. Each
    /// state is the path point
    /// displaced by one step of velocity noise, so noise does not accumulate;
    /// commands are the finite differences of the noisy states.
    pub fn scripted_demo(&self, x0: Point, seed: u64) -> Result<Demonstration> {
        let path = self.plan(x0)?;
        let (nominal, _) = resample_with_approach(&path, self.speed, self.dt, self.approach_distance, 0.5 * self.world.goal_eps)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clearance = self.inflation / 2.0;
        for _ in 0..=self.max_retries {
            let mut states = nominal.clone();
            if self.noise_std > 0.0 {
                let last = states.len() - 1;
                for s in states[1..last].iter_mut() {
                    let ex: f64 = StandardNormal.sample(&mut rng);
                    let ey: f64 = StandardNormal.sample(&mut rng);
                    s[0] += self.dt * self.noise_std * ex;
                    s[1] += self.dt * self.noise_std * ey;
                }
            }
            if self.trace_is_clear(&states, clearance) && self.world.at_goal(*states.last().unwrap()) {
                let commands = finite_difference_commands(&states, self.dt);
                return Ok(Demonstration { states, commands, source: DemoSource::Scripted, query: Some(x0) });
            }
        }
        Err(Error::Teacher(format!("could not produce a clear demonstration from {x0:?}")))
    }

    /// Start points may lie inside the inflation zone; the clearance check
    /// applies once the trace has left it.
    fn trace_is_clear(&self, states: &[Point], clearance: f64) -> bool {
        let mut escaped = false;
        for w in states.windows(2) {
            if !escaped && !self.world.collides_with_margin(w[0], clearance) {
                escaped = true;
            }
            if escaped {
                if self.world.segment_collides(w[0], w[1], clearance) {
                    return false;
                }
            } else if self.world.segment_collides(w[0], w[1], 0.0) {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutScore {
    pub success: bool,
    pub collided: bool,
    pub path_length: f64,
}

/// Interpolation points checked between consecutive rollout states.
pub const ROLLOUT_INTERP_POINTS: usize = 10;

pub fn evaluate_rollout(world: &World2D, r: &Rollout) -> RolloutScore {
    let pts: Vec<Point> = r.states.iter().map(|s| [s[0], s[1]]).collect();
    let mut collided = pts.iter().any(|p| world.collides(*p));
    let mut path_length = 0.0;
    for w in pts.windows(2) {
        path_length += dist(w[0], w[1]);
        if !collided {
            collided = (1..=ROLLOUT_INTERP_POINTS)
                .any(|i| world.collides(lerp(w[0], w[1], i as f64 / (ROLLOUT_INTERP_POINTS + 1) as f64)));
        }
    }
    RolloutScore { success: r.termination == Termination::GoalReached && !collided, collided, path_length }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn open_world(goal: Point, obstacles: Vec<Rect>) -> World2D {
        World2D::new("t".into(), Rect::new([-1.0, -1.0], [3.0, 3.0]).unwrap(), obstacles, goal, 0.05, vec![], vec![]).unwrap()
    }

    /// Shortest 16-connected path on an `n x n` grid of cell centres whose
    /// edges avoid `blocked`.
    fn grid_shortest(world: &World2D, blocked: &[Rect], from: Point, to: Point, n: usize) -> f64 {
        let (lo, hi) = (world.bounds.min, world.bounds.max);
        let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
        let cell = |p: Point| -> (usize, usize) {
            (((p[0] - lo[0]) / h[0]).floor().clamp(0.0, (n - 1) as f64) as usize, ((p[1] - lo[1]) / h[1]).floor().clamp(0.0, (n - 1) as f64) as usize)
        };
        let centre = |i: usize, j: usize| [lo[0] + (i as f64 + 0.5) * h[0], lo[1] + (j as f64 + 0.5) * h[1]];
        let free = |a: Point, b: Point| blocked.iter().all(|r| !r.segment_hits_interior(a, b));
        let moves: Vec<(i64, i64)> = [(1, 0), (0, 1), (1, 1), (1, -1), (2, 1), (1, 2), (2, -1), (1, -2)]
            .iter()
            .flat_map(|&(a, b)| [(a, b), (-a, -b)])
            .collect();
        let (si, sj) = cell(from);
        let (ti, tj) = cell(to);
        let mut best = vec![f64::INFINITY; n * n];
        let mut heap = BinaryHeap::new();
        best[si * n + sj] = 0.0;
        heap.push(HeapItem(0.0, si * n + sj));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > best[u] {
                continue;
            }
            let (i, j) = (u / n, u % n);
            if (i, j) == (ti, tj) {
                return d + dist(from, centre(si, sj)) + dist(to, centre(ti, tj));
            }
            for &(di, dj) in &moves {
                let (ni, nj) = (i as i64 + di, j as i64 + dj);
                if ni < 0 || nj < 0 || ni >= n as i64 || nj >= n as i64 {
                    continue;
                }
                let (ni, nj) = (ni as usize, nj as usize);
                let (a, b) = (centre(i, j), centre(ni, nj));
                if !free(a, b) {
                    continue;
                }
                let nd = d + dist(a, b);
                let v = ni * n + nj;
                if nd < best[v] {
                    best[v] = nd;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        f64::INFINITY
    }

    fn path_length(p: &[Point]) -> f64 {
        p.windows(2).map(|w| dist(w[0], w[1])).sum()
    }

    #[test]
    fn collision_conventions() {
        let w = World2D::new("t".into(), Rect::new([0.0, 0.0], [3.0, 3.0]).unwrap(), vec![Rect::new([0.0, 0.0], [1.0, 1.0]).unwrap()], [2.5, 2.5], 0.1, vec![], vec![])
            .unwrap();
        assert!(w.collides([0.5, 0.5]));
        assert!(w.collides([1.0, 1.0]));
        assert!(!w.collides([2.0, 2.0]));
        assert!(w.collides([3.5, 2.0]));
    }

    #[test]
    fn toy_fixture_loads_and_round_trips() {
        let w = World2D::toy();
        assert_eq!(w.initial_starts.len(), 8);
        assert_eq!(w.test_starts.len(), 5);
        let text = serde_json::to_string(&w).unwrap();
        assert!(text.contains("\"schema_version\":1"));
        assert_eq!(serde_json::from_str::<World2D>(&text).unwrap(), w);
        let bad = text.replace("\"schema_version\":1", "\"schema_version\":7");
        assert!(serde_json::from_str::<World2D>(&bad).is_err());
    }

    #[test]
    fn straight_demo_in_empty_world() {
        let w = open_world([1.0, 0.0], vec![]);
        let t = TeacherOracle::new(w, 1.0, 0.0, 0.1, 0.05).unwrap();
        let d = t.scripted_demo([0.0, 0.0], 0).unwrap();
        assert_eq!(d.len(), 21);
        for u in &d.commands[..d.len() - 1] {
            assert!((u[0] - 1.0).abs() < 1e-9 && u[1].abs() < 1e-12);
        }
        assert_eq!(d.commands.last().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn approach_profile_decays_geometrically() {
        // Straight line of length 3: cruise to 1 remaining, then the
        // remainder shrinks by (1 - h / L) per step until below `stop`.
        let (speed, dt, l, stop) = (1.0, 0.05, 1.0, 0.15);
        let (states, commands) = resample_with_approach(&[[0.0, 0.0], [3.0, 0.0]], speed, dt, l, stop).unwrap();
        let h = speed * dt;
        let cruise = (2.0 / h - 1e-9).ceil() as usize;
        let mut want = vec![];
        let mut s = 0.0;
        for _ in 0..cruise {
            s += h;
            want.push(s);
        }
        let mut r: f64 = 3.0 - s;
        while r > stop {
            if r > l {
                r -= h;
            } else {
                r *= 1.0 - h / l;
            }
            want.push(3.0 - r);
        }
        assert_eq!(states.len(), want.len() + 1);
        for (p, w) in states[1..].iter().zip(&want) {
            assert!((p[0] - w).abs() < 1e-9 && p[1] == 0.0);
        }
        assert!(3.0 - states.last().unwrap()[0] <= stop);
        // Inside the approach zone the command is proportional to the remainder.
        for (p, u) in states.iter().zip(&commands).skip(cruise + 1).take(10) {
            assert!((u[0] - speed * (3.0 - p[0]) / l).abs() < 1e-9);
        }
        assert_eq!(commands.last().unwrap(), &[0.0, 0.0]);
        assert_eq!(resample_with_approach(&[[0.0, 0.0], [3.0, 0.0]], speed, dt, 0.0, stop).unwrap(), resample_polyline(&[[0.0, 0.0], [3.0, 0.0]], speed, dt).unwrap());
        assert!(resample_with_approach(&[[0.0, 0.0], [3.0, 0.0]], speed, dt, 0.01, stop).is_err());
    }

    #[test]
    fn decelerating_demo_stops_inside_goal_tolerance() {
        let w = World2D::toy();
        let t = TeacherOracle::new(w.clone(), 1.0, 0.1, 0.3, 0.05).unwrap().with_approach(1.0).unwrap();
        for (i, s) in w.initial_starts.iter().enumerate() {
            let d = t.scripted_demo(*s, i as u64).unwrap();
            let end = *d.states.last().unwrap();
            assert!(dist(end, w.goal) < w.goal_eps);
            assert!(d.states.iter().all(|p| !w.collides(*p)));
        }
    }

    #[test]
    fn blocked_segment_detours_and_is_near_optimal() {
        let obstacle = Rect::new([0.4, -0.5], [0.6, 0.5]).unwrap();
        let w = open_world([1.0, 0.0], vec![obstacle]);
        let t = TeacherOracle::new(w.clone(), 1.0, 0.0, 0.1, 0.05).unwrap();
        let path = t.plan([0.0, 0.0]).unwrap();
        let len = path_length(&path);
        assert!(len > 1.0);
        let d = t.scripted_demo([0.0, 0.0], 0).unwrap();
        assert!(d.states.iter().all(|p| !w.collides(*p)));
        let oracle = grid_shortest(&w, &[obstacle.inflate(0.1)], [0.0, 0.0], [1.0, 0.0], 400);
        assert!(len <= oracle * 1.05 && len >= oracle * 0.95, "{len} vs grid {oracle}");
    }

    #[test]
    fn toy_world_paths_match_grid_oracle() {
        let w = World2D::toy();
        let t = TeacherOracle::new(w.clone(), 1.0, 0.0, 0.3, 0.05).unwrap();
        let inflated: Vec<Rect> = w.obstacles.iter().map(|o| o.inflate(0.3)).collect();
        for s in w.initial_starts.iter().chain(&w.test_starts) {
            let len = path_length(&t.plan(*s).unwrap());
            let oracle = grid_shortest(&w, &inflated, *s, w.goal, 400);
            assert!((len - oracle).abs() <= 0.05 * oracle, "start {s:?}: {len} vs grid {oracle}");
        }
    }

    #[test]
    fn noisy_demos_stay_clear_and_end_at_goal() {
        let w = World2D::toy();
        let t = TeacherOracle::new(w.clone(), 1.0, 0.5, 0.3, 0.05).unwrap();
        for (i, s) in w.initial_starts.iter().chain(&w.test_starts).enumerate() {
            let d = t.scripted_demo(*s, i as u64).unwrap();
            assert!(w.at_goal(*d.states.last().unwrap()));
            for (k, win) in d.states.windows(2).enumerate() {
                let u = d.commands[k];
                assert!(((win[1][0] - win[0][0]) / t.dt - u[0]).abs() < 1e-6);
                assert!(((win[1][1] - win[0][1]) / t.dt - u[1]).abs() < 1e-6);
            }
            let r = Rollout {
                states: d.states.iter().map(|p| p.to_vec()).collect(),
                commands: d.commands[..d.len() - 1].iter().map(|p| p.to_vec()).collect(),
                termination: Termination::GoalReached,
                error: None,
            };
            assert!(evaluate_rollout(&w, &r).success);
        }
    }

    #[test]
    fn enclosed_start_has_no_path() {
        let ring = vec![
            Rect::new([0.0, 0.0], [2.0, 0.2]).unwrap(),
            Rect::new([0.0, 1.8], [2.0, 2.0]).unwrap(),
            Rect::new([0.0, 0.0], [0.2, 2.0]).unwrap(),
            Rect::new([1.8, 0.0], [2.0, 2.0]).unwrap(),
        ];
        let w = open_world([2.8, 2.8], ring);
        let t = TeacherOracle::new(w, 1.0, 0.0, 0.05, 0.05).unwrap();
        assert!(matches!(t.scripted_demo([1.0, 1.0], 0), Err(Error::NoPath { .. })));
    }

    #[test]
    fn resampling_arithmetic() {
        let (s, u) = resample_polyline(&[[0.0, 0.0], [1.0, 0.0]], 1.0, 0.05).unwrap();
        assert_eq!(s.len(), 21);
        assert_eq!(u.len(), 21);
        let (s, _) = resample_polyline(&[[0.0, 0.0], [0.5, 0.0], [0.5, 0.5]], 1.0, 0.05).unwrap();
        assert_eq!(s.len(), 21);
        assert!(dist(s[15], [0.5, 0.25]) < 1e-12);
        assert!(resample_polyline(&[[0.0, 0.0]], 1.0, 0.05).is_err());
    }

    #[test]
    fn interpolation_catches_tunnelling() {
        let w = World2D::new("t".into(), Rect::new([0.0, 0.0], [3.0, 3.0]).unwrap(), vec![Rect::new([1.45, 0.0], [1.5, 2.0]).unwrap()], [2.5, 1.0], 0.1, vec![], vec![])
            .unwrap();
        let r = Rollout { states: vec![vec![1.0, 1.0], vec![2.0, 1.0]], commands: vec![vec![20.0, 0.0]], termination: Termination::GoalReached, error: None };
        // Fine-grid oracle: some point on the segment lies in the obstacle.
        assert!((0..=1000).any(|i| w.collides(lerp([1.0, 1.0], [2.0, 1.0], i as f64 / 1000.0))));
        let score = evaluate_rollout(&w, &r);
        assert!(score.collided && !score.success);
        assert!((score.path_length - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_steps_is_not_success() {
        let w = World2D::toy();
        let r = Rollout { states: vec![vec![1.0, 1.0], vec![1.1, 1.0]], commands: vec![vec![2.0, 0.0]], termination: Termination::MaxSteps, error: None };
        let s = evaluate_rollout(&w, &r);
        assert!(!s.success && !s.collided);
    }

    #[test]
    fn demo_csv_has_header_and_rows() {
        let w = open_world([1.0, 0.0], vec![]);
        let d = TeacherOracle::new(w, 1.0, 0.0, 0.1, 0.05).unwrap().scripted_demo([0.0, 0.0], 0).unwrap();
        let mut buf = Vec::new();
        d.write_csv(0.05, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), "t,x,y,vx,vy");
        assert_eq!(text.lines().count(), 22);
    }

    proptest! {
        #[test]
        fn collides_is_monotone_under_growth(px in 0.0f64..10.0, py in 0.0f64..10.0, grow in 0.0f64..1.0) {
            let w = World2D::toy();
            let mut bigger = w.clone();
            bigger.obstacles[0] = bigger.obstacles[0].inflate(grow);
            if w.collides([px, py]) {
                prop_assert!(bigger.collides([px, py]));
            }
        }
    }
}
