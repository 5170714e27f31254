#![allow(dead_code)]

use alfd_core::experiment::ExperimentConfig;
use alfd_core::sim::{Point, TeacherOracle, World2D};
use alfd_teach::DemoRequest;

/// Small fits so a test session refits in well under a second.
pub fn fast_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.active.k_policy = 4;
    c.active.k_q = 2;
    c.active.fit.restarts = 1;
    c.active.fit.max_iter = 100;
    c.active.variational.steps = 40;
    c.active.variational.warm_steps = 20;
    c.active.variational.samples_per_component = 8;
    c.active.beta_grid = 10;
    c.projector_resolution = 40;
    c
}

/// Collision-free polyline from `from` to the goal.
pub fn path_to_goal(from: Point) -> Vec<Point> {
    let teacher = TeacherOracle::new(World2D::toy(), 1.0, 0.0, 0.05, 0.05).unwrap();
    teacher.plan(from).unwrap()
}

pub fn demo(polyline: Vec<Point>) -> DemoRequest {
    DemoRequest { schema_version: Some(alfd_teach::SCHEMA_VERSION), polyline, timestamps: None }
}

/// Vertical segment across the first obstacle of the toy world.
pub fn crossing_polyline() -> Vec<Point> {
    let w = World2D::toy();
    let o = &w.obstacles[0];
    let c = o.center();
    vec![[c[0], o.min[1] - 0.2], [c[0], o.max[1] + 0.2]]
}
