use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use csmsckf::config::Config;
use csmsckf::eval::{monte_carlo, timing_harness};
use csmsckf::filter::Mode;
use csmsckf::io::{write_run, write_world_with_manifest, Manifest};
use csmsckf::sim::generate_world;
use log::info;

/// Exit status when any run diverged.
const EXIT_DIVERGED: u8 = 2;

#[derive(Parser)]
#[command(name = "csmsckf", version, about = "Map-based VIO localization simulator and evaluator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write its streams as CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Run filter configurations over seeds and write per-run CSVs plus
    /// manifest.json.
    Run {
        #[command(flatten)]
        common: Common,
        /// odometry, sm, mm or mapconst; repeatable. Defaults to eval.modes.
        #[arg(long, short)]
        mode: Vec<Mode>,
        /// Seeds to run; repeatable. Defaults to the eval seed range.
        #[arg(long, short)]
        seed: Vec<u64>,
        /// Enable re-linearization.
        #[arg(long)]
        relin: bool,
    },
    /// Time the Schmidt update against a full EKF update over nuisance sizes.
    Bench {
        #[command(flatten)]
        common: Common,
    },
    /// Print the aggregates of a manifest written by `run`.
    Report {
        /// Directory holding manifest.json, or the file itself.
        path: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::new()),
    }
}

fn print_aggregates(m: &Manifest) {
    let f = |v: Option<f64>, prec: usize| v.map(|x| format!("{x:.prec$}")).unwrap_or_else(|| "-".into());
    println!(
        "{:<12} {:>5} {:>9} {:>10} {:>10} {:>12} {:>12} {:>12} {:>10}",
        "config", "runs", "diverged", "rmse_m", "nees", "in3sig_axis", "in3sig_min", "in3sig_step", "nees_pose"
    );
    for a in &m.aggregates {
        println!(
            "{:<12} {:>5} {:>9} {:>10} {:>10} {:>12} {:>12} {:>12} {:>10}",
            a.label,
            a.runs,
            a.diverged,
            f(a.rmse_mean, 3),
            f(a.nees_mean, 2),
            f(a.inside_3sigma_mean, 3),
            f(a.inside_3sigma_min, 3),
            f(a.inside_3sigma_steps_mean, 3),
            f(a.nees_pose_mean, 2)
        );
    }
}

fn simulate(common: &Common, seed: u64) -> anyhow::Result<ExitCode> {
    let cfg = load_config(common.config.as_deref())?;
    let world = generate_world(&cfg.sim, seed)?;
    write_world_with_manifest(&world, &cfg, &common.out)?;
    println!(
        "seed {seed}: {} IMU samples, {} frames, {} match events, {} keyframes, {} landmarks -> {}",
        world.imu.len(),
        world.frames.len(),
        world.matches.len(),
        world.map.keyframes().len(),
        world.map.landmarks().len(),
        common.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run(common: &Common, modes: &[Mode], seeds: &[u64], relin: bool) -> anyhow::Result<ExitCode> {
    let mut cfg = load_config(common.config.as_deref())?;
    if !modes.is_empty() {
        cfg.eval.modes = modes.to_vec();
    }
    cfg.eval.relin |= relin;
    let seeds = if seeds.is_empty() { cfg.eval.seed_list() } else { seeds.to_vec() };
    if seeds.is_empty() {
        bail!("no seeds to run");
    }
    let configs = cfg.eval.configurations();
    fs::create_dir_all(&common.out)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml()?)?;
    info!("running {} configurations over {} seeds", configs.len(), seeds.len());
    let reports = monte_carlo(&cfg.sim, &cfg.filter, &configs, &seeds)?;
    let mut entries = Vec::new();
    for r in reports.iter().flatten() {
        if let Some(e) = &r.error {
            log::warn!("{} seed {}: {e}", r.label(), r.seed);
        }
        entries.push(write_run(r, &common.out)?);
    }
    let manifest = Manifest::new(cfg.clone(), entries);
    manifest.write(&common.out.join("manifest.json"))?;
    print_aggregates(&manifest);
    Ok(exit_for(&manifest))
}

fn exit_for(m: &Manifest) -> ExitCode {
    if m.any_diverged() {
        for r in m.runs.iter().filter(|r| r.diverged) {
            eprintln!("diverged: {} seed {}", r.label, r.seed);
        }
        ExitCode::from(EXIT_DIVERGED)
    } else {
        ExitCode::SUCCESS
    }
}

fn bench(common: &Common) -> anyhow::Result<ExitCode> {
    let cfg = load_config(common.config.as_deref())?;
    let report = timing_harness(&cfg.eval.bench_sizes, cfg.eval.bench_repeats);
    fs::create_dir_all(&common.out)?;
    let mut w = csv::Writer::from_path(common.out.join("bench.csv"))?;
    w.write_record(["nuisance_dim", "schmidt_ms", "ekf_ms"])?;
    println!("{:>12} {:>12} {:>12}", "nuisance_dim", "schmidt_ms", "ekf_ms");
    for r in &report.rows {
        w.write_record([r.nuisance_dim.to_string(), r.schmidt_ms.to_string(), r.ekf_ms.to_string()])?;
        println!("{:>12} {:>12.3} {:>12.3}", r.nuisance_dim, r.schmidt_ms, r.ekf_ms);
    }
    w.flush()?;
    fs::write(common.out.join("bench.json"), serde_json::to_string_pretty(&report)?)?;
    println!("log-log slope: schmidt {:.2}, ekf {:.2}", report.schmidt_slope, report.ekf_slope);
    Ok(ExitCode::SUCCESS)
}

fn report(path: &Path) -> anyhow::Result<ExitCode> {
    let file = if path.is_dir() { path.join("manifest.json") } else { path.to_path_buf() };
    let m = Manifest::read(&file).with_context(|| format!("reading {}", file.display()))?;
    println!("config hash {}", m.config_hash);
    print_aggregates(&m);
    Ok(exit_for(&m))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Simulate { common, seed } => simulate(common, *seed),
        Command::Run { common, mode, seed, relin } => run(common, mode, seed, *relin),
        Command::Bench { common } => bench(common),
        Command::Report { path } => report(path),
    };
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
