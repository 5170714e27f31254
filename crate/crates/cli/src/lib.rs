//! Subcommands of the `alfd` binary.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use alfd_core::active::{al_step, AlSession, QuerySource};
use alfd_core::bgmm::UncertaintyMode;
use alfd_core::control::RolloutMode;
use alfd_core::experiment::{
    initial_session, policy_rollouts, q_ellipses, run_active, run_random_baseline, summarize_rollouts,
    uncertainty_grid, write_campaign, write_grid_csv, write_json, CampaignReport, ExperimentConfig, GridMode, PolicyKind,
    REPORT_SCHEMA_VERSION,
};
use alfd_core::sim::World2D;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "alfd", version, about = "Active learning from demonstration on a 2D reaching world")]
pub struct Cli {
    /// TOML configuration; unset keys take the built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run this seed only instead of the configured list.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory; defaults to the configured one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit the iteration-0 model from the initial demonstrations.
    Fit {
        #[command(flatten)]
        common: Common,
    },
    /// Active-learning campaign with the scripted teacher.
    Active {
        #[command(flatten)]
        common: Common,
        /// Entropy driving the queries: total, aleatoric or epistemic.
        #[arg(long)]
        mode: Option<UncertaintyMode>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Same pipeline with uniformly drawn free query points.
    RandomBaseline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mode: Option<UncertaintyMode>,
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Uncertainty or cost values on a regular grid over the world.
    Grid {
        #[command(flatten)]
        common: Common,
        /// total, aleatoric, epistemic or cost.
        #[arg(long, default_value = "epistemic")]
        mode: GridMode,
        #[arg(long)]
        resolution: Option<usize>,
        /// Active iterations to run before sampling the grid.
        #[arg(long, default_value_t = 0)]
        iterations: usize,
    },
    /// Policy rollouts from the world's held-out starts.
    Rollouts {
        #[command(flatten)]
        common: Common,
        /// mean or sample.
        #[arg(long, default_value = "sample")]
        mode: RolloutMode,
        /// bgmm or poe; both when absent.
        #[arg(long)]
        policy: Option<PolicyKind>,
        /// Rollouts per start; defaults to the configured count.
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 0)]
        iterations: usize,
    },
    /// Serve teaching sessions over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Event-log directory; `<out>/sessions` when absent.
        #[arg(long)]
        log_dir: Option<PathBuf>,
    },
    /// Replay a teaching-session event log and write its posterior.
    Replay {
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::from_file(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(ExperimentConfig::default()),
    }
}

fn apply_common(config: &mut ExperimentConfig, common: &Common) -> PathBuf {
    if let Some(s) = common.seed {
        config.seeds = vec![s];
    }
    common.out.clone().unwrap_or_else(|| config.output_dir.clone())
}

fn apply_campaign(
    config: &mut ExperimentConfig,
    common: &Common,
    mode: Option<UncertaintyMode>,
    iterations: Option<usize>,
) -> PathBuf {
    if let Some(m) = mode {
        config.active.entropy_mode = m;
    }
    if let Some(n) = iterations {
        config.iterations = n;
    }
    apply_common(config, common)
}

fn print_trace(report: &CampaignReport) {
    for r in &report.aggregate {
        eprintln!("{} iteration {:>2}: H2(q) {:.4} ± {:.4} (n={})", report.kind.name(), r.iteration, r.mean, r.std, r.n);
    }
}

/// Session after `iterations` active steps for one seed.
pub fn session_after(config: &ExperimentConfig, world: &World2D, seed: u64, iterations: usize) -> Result<AlSession> {
    let mut session = initial_session(config, world, seed)?;
    if iterations > 0 {
        let teacher = config.teacher(world)?;
        let projector = config.projector(world);
        let source = QuerySource::Active(Some(&projector));
        for _ in 0..iterations {
            session = al_step(&session, &source, |q, s| teacher.scripted_demo([q[0], q[1]], s)?.to_dataset())?;
        }
    }
    Ok(session)
}

#[derive(Serialize)]
struct FitSummary {
    schema_version: u32,
    seed: u64,
    dataset_size: usize,
    effective_components: usize,
    final_elbo: Option<f64>,
    h2_q: f64,
    beta: f64,
}

pub fn fit(config: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let world = config.load_world()?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let s = initial_session(config, &world, seed)?;
        let summary = FitSummary {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            dataset_size: s.dataset.len(),
            effective_components: s.posterior.effective_components(1e-2),
            final_elbo: s.posterior.elbo_trace.last().copied(),
            h2_q: s.h2_q(),
            beta: s.beta,
        };
        for (name, value) in [
            ("posterior", serde_json::to_value(&s.posterior)?),
            ("q", serde_json::to_value(&s.q)?),
            ("summary", serde_json::to_value(&summary)?),
        ] {
            let p = out.join(format!("fit_seed{seed}_{name}.json"));
            write_json(&p, &value)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn campaign(config: &ExperimentConfig, out: &Path, random: bool) -> Result<(CampaignReport, Vec<PathBuf>)> {
    let (report, runs) = if random { run_random_baseline(config)? } else { run_active(config)? };
    let written = write_campaign(out, &report, &runs)?;
    Ok((report, written))
}

pub fn grid(config: &ExperimentConfig, out: &Path, mode: GridMode, resolution: usize, iterations: usize) -> Result<Vec<PathBuf>> {
    let world = config.load_world()?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let s = session_after(config, &world, seed, iterations)?;
        let rows = uncertainty_grid(&s.posterior, Some(&s.cost), &world, mode, resolution)?;
        let name = serde_json::to_value(mode)?.as_str().unwrap_or("grid").to_string();
        let p = out.join(format!("grid_{name}_seed{seed}.csv"));
        write_grid_csv(&rows, fs::File::create(&p)?)?;
        written.push(p);
        if mode == GridMode::Cost {
            let p = out.join(format!("grid_cost_seed{seed}_ellipses.json"));
            write_json(&p, &q_ellipses(&s.q)?)?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn rollouts(
    config: &ExperimentConfig,
    out: &Path,
    mode: RolloutMode,
    policies: &[PolicyKind],
    samples: usize,
    iterations: usize,
) -> Result<Vec<PathBuf>> {
    let world = config.load_world()?;
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for &seed in &config.seeds {
        let s = session_after(config, &world, seed, iterations)?;
        for &policy in policies {
            let records =
                policy_rollouts(&s.posterior, &world, config, policy, mode, &world.test_starts, samples, seed)?;
            let tag = format!("{}_{}", serde_json::to_value(policy)?.as_str().unwrap_or("policy"), serde_json::to_value(mode)?.as_str().unwrap_or("mode"));
            let p = out.join(format!("rollouts_{tag}_seed{seed}.json"));
            write_json(&p, &records)?;
            written.push(p);
            let p = out.join(format!("rollouts_{tag}_seed{seed}_summary.json"));
            write_json(&p, &summarize_rollouts(policy, mode, &records))?;
            written.push(p);
        }
    }
    Ok(written)
}

pub fn replay(log: &Path, out: &Path) -> Result<PathBuf> {
    let state = alfd_teach::replay_log(log).map_err(|e| anyhow::anyhow!("replaying {}: {e}", log.display()))?;
    fs::create_dir_all(out)?;
    let p = out.join(format!("replay_{}_posterior.json", state.id));
    write_json(&p, &state.al.posterior)?;
    Ok(p)
}

pub fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_deref())?;
    if cli.print_config {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    let report = |written: &[PathBuf]| {
        for p in written {
            println!("{}", p.display());
        }
    };
    match command {
        Command::Fit { common } => {
            let out = apply_common(&mut config, &common);
            report(&fit(&config, &out)?);
        }
        Command::Active { common, mode, iterations } => {
            let out = apply_campaign(&mut config, &common, mode, iterations);
            let (r, written) = campaign(&config, &out, false)?;
            report(&written);
            print_trace(&r);
        }
        Command::RandomBaseline { common, mode, iterations } => {
            let out = apply_campaign(&mut config, &common, mode, iterations);
            let (r, written) = campaign(&config, &out, true)?;
            report(&written);
            print_trace(&r);
        }
        Command::Grid { common, mode, resolution, iterations } => {
            let out = apply_common(&mut config, &common);
            let res = resolution.unwrap_or(config.grid_resolution);
            report(&grid(&config, &out, mode, res, iterations)?);
        }
        Command::Rollouts { common, mode, policy, samples, iterations } => {
            let out = apply_common(&mut config, &common);
            let policies = match policy {
                Some(p) => vec![p],
                None => vec![PolicyKind::Bgmm, PolicyKind::Poe],
            };
            let samples = samples.unwrap_or(config.rollout.samples);
            report(&rollouts(&config, &out, mode, &policies, samples, iterations)?);
        }
        Command::Serve { addr, log_dir } => {
            let log_dir = log_dir.unwrap_or_else(|| config.output_dir.join("sessions"));
            let options = alfd_teach::ServiceOptions { log_dir: Some(log_dir), config };
            tokio::runtime::Runtime::new()?.block_on(alfd_teach::serve(addr, options))?;
        }
        Command::Replay { log, out } => {
            let out = out.unwrap_or_else(|| config.output_dir.clone());
            println!("{}", replay(&log, &out)?.display());
        }
    }
    Ok(())
}
