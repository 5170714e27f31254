use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use alfd_cli::{campaign, fit, grid, load_config, replay, rollouts};
use alfd_core::control::RolloutMode;
use alfd_core::experiment::{CampaignReport, ExperimentConfig, GridMode, PolicyKind, RolloutSummary};

const FAST: &str = r#"
seeds = [0, 1]
iterations = 2
projector_resolution = 40
grid_resolution = 10

[active]
k_policy = 4
k_q = 2
beta_grid = 10

[active.fit]
restarts = 1
max_iter = 100

[active.variational]
steps = 40
warm_steps = 20
samples_per_component = 8

[rollout]
horizon = 300
samples = 2
"#;

fn fast(dir: &Path) -> (PathBuf, ExperimentConfig) {
    let p = dir.join("fast.toml");
    fs::write(&p, FAST).unwrap();
    let c = load_config(Some(&p)).unwrap();
    (p, c)
}

fn csv_rows(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().skip(1).map(String::from).collect()
}

#[test]
fn print_config_round_trips_through_toml() {
    let out = Command::new(env!("CARGO_BIN_EXE_alfd")).arg("--print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), ExperimentConfig::default());
}

#[test]
fn missing_config_or_fixture_exits_nonzero_with_a_diagnostic() {
    let out = Command::new(env!("CARGO_BIN_EXE_alfd")).args(["--config", "/nonexistent.toml", "fit"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    fs::write(&p, "world = \"/nonexistent/world.json\"\n").unwrap();
    assert!(load_config(Some(&p)).is_err());
}

#[test]
fn active_campaign_writes_history_queries_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.seeds = vec![0];
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (report, written) = campaign(&c, &a, false).unwrap();
    campaign(&c, &b, false).unwrap();
    // Iteration 0 plus one row per iteration.
    assert_eq!(csv_rows(&a.join("active_seed0_history.csv")).len(), 3);
    assert_eq!(csv_rows(&a.join("active_seed0_queries.csv")).len(), 2);
    assert_eq!(report.aggregate.len(), 3);
    for p in &written {
        let name = p.file_name().unwrap();
        assert_eq!(fs::read(p).unwrap(), fs::read(b.join(name)).unwrap(), "{name:?} differs between runs");
    }
    let parsed: CampaignReport = serde_json::from_str(&fs::read_to_string(a.join("active_report.json")).unwrap()).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn zero_iterations_report_only_the_initial_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.iterations = 0;
    let (report, _) = campaign(&c, dir.path(), false).unwrap();
    assert_eq!(report.aggregate.len(), 1);
    assert!(report.seeds.iter().all(|s| s.h2_q.len() == 1));
}

#[test]
fn random_and_active_share_the_initial_entropy() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.iterations = 1;
    let (active, _) = campaign(&c, dir.path(), false).unwrap();
    let (random, _) = campaign(&c, dir.path(), true).unwrap();
    for (a, r) in active.seeds.iter().zip(&random.seeds) {
        assert_eq!(a.h2_q[0], r.h2_q[0]);
    }
    assert_eq!(random.seeds.len(), 2);
    assert_eq!(csv_rows(&dir.path().join("random_aggregate.csv")).len(), 2);
}

#[test]
fn fit_writes_parseable_posterior_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.seeds = vec![3];
    let written = fit(&c, dir.path()).unwrap();
    assert_eq!(written.len(), 3);
    let post: alfd_core::bgmm::BgmmPosterior =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit_seed3_posterior.json")).unwrap()).unwrap();
    assert_eq!(post.k(), 4);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fit_seed3_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["dataset_size"].as_u64().unwrap() as usize, post.n_points);
}

#[test]
fn grid_has_resolution_squared_rows_and_cost_mode_writes_ellipses() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.seeds = vec![0];
    let written = grid(&c, dir.path(), GridMode::Cost, 12, 0).unwrap();
    assert_eq!(written.len(), 2);
    assert_eq!(csv_rows(&dir.path().join("grid_cost_seed0.csv")).len(), 144);
    let ellipses: Vec<alfd_core::experiment::Ellipse> =
        serde_json::from_str(&fs::read_to_string(dir.path().join("grid_cost_seed0_ellipses.json")).unwrap()).unwrap();
    assert_eq!(ellipses.len(), 2);
    grid(&c, dir.path(), GridMode::Aleatoric, 5, 0).unwrap();
    for row in csv_rows(&dir.path().join("grid_aleatoric_seed0.csv")) {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v.len(), 3);
        assert!(v[2].is_finite());
    }
}

#[test]
fn rollouts_write_records_and_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let (_, mut c) = fast(dir.path());
    c.seeds = vec![0];
    let written = rollouts(&c, dir.path(), RolloutMode::Mean, &[PolicyKind::Bgmm, PolicyKind::Poe], 1, 0).unwrap();
    assert_eq!(written.len(), 4);
    let s: RolloutSummary =
        serde_json::from_str(&fs::read_to_string(dir.path().join("rollouts_poe_mean_seed0_summary.json")).unwrap()).unwrap();
    assert_eq!(s.rollouts, 5);
}

#[test]
fn replay_subcommand_reproduces_a_teaching_session() {
    use alfd_teach::session::append_events;
    use alfd_teach::{CreateRequest, DemoRequest, SessionState};
    let dir = tempfile::tempdir().unwrap();
    let (_, c) = fast(dir.path());
    let world = c.load_world().unwrap();
    let mut s = SessionState::create("r".into(), CreateRequest { config: Some(c.clone()), ..Default::default() }).unwrap();
    let q = s.request_query().unwrap().query;
    let polyline = c.teacher(&world).unwrap().plan(q).unwrap();
    s.submit_demo(DemoRequest { schema_version: None, polyline, timestamps: None }).unwrap();
    let log = dir.path().join("r.jsonl");
    append_events(&log, &s.events).unwrap();
    let out = replay(&log, dir.path()).unwrap();
    assert_eq!(fs::read_to_string(out).unwrap().trim_end(), serde_json::to_string_pretty(&s.al.posterior).unwrap());
}

#[test]
fn binary_runs_a_campaign_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = fast(dir.path());
    let out = dir.path().join("out");
    let run = Command::new(env!("CARGO_BIN_EXE_alfd"))
        .args(["--config", cfg.to_str().unwrap(), "random-baseline", "--seed", "4", "--iterations", "1", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success());
    assert!(String::from_utf8_lossy(&run.stdout).contains("random_report.json"));
    assert_eq!(csv_rows(&out.join("random_seed4_history.csv")).len(), 2);
}
