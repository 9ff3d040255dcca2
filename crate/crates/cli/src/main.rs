//! `routelab`: routing demos, schedule checks, toy diffusion training,
//! router retrofitting, convergence analysis and cluster simulation.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::config::RunConfig;
use crate::output::Output;

#[derive(Debug, Parser)]
#[command(name = "routelab", about = "Expert-choice vs token-choice routing experiments")]
struct Cli {
    /// TOML config, or a manifest.json from an earlier run.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "routelab-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Route one score matrix and report per-expert loads.
    Route(RouteArgs),
    /// Expected top-k of each capacity schedule against a static baseline.
    ScheduleCheck(ScheduleArgs),
    /// Train the toy masked diffusion model.
    Train(TrainArgs),
    /// Swap a trained TC router for EC and optionally finetune.
    Retrofit(RetrofitArgs),
    /// Per-bin convergence rates from loss traces.
    Analyze(AnalyzeArgs),
    /// Compare routing policies in the straggler simulator.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
struct RouteArgs {
    /// Use the built-in 6x3 demo matrix.
    #[arg(long)]
    demo: bool,
    /// Headerless CSV of router scores, one token per row.
    #[arg(long, conflicts_with = "demo")]
    scores: Option<PathBuf>,
    /// Random TOKENS,EXPERTS score matrix drawn from the seed.
    #[arg(long, value_name = "TOKENS,EXPERTS", value_parser = parse_dims, conflicts_with_all = ["demo", "scores"])]
    random: Option<(usize, usize)>,
    /// tc or ec.
    #[arg(long, value_parser = ["tc", "ec"])]
    policy: Option<String>,
    /// TC top-k.
    #[arg(long)]
    k: Option<usize>,
    /// EC tokens per expert.
    #[arg(long)]
    c: Option<usize>,
    /// TC capacity factor; omit for dropless TC.
    #[arg(long)]
    cf: Option<f64>,
}

#[derive(Debug, Args)]
struct ScheduleArgs {
    #[arg(long)]
    k_min: Option<f64>,
    #[arg(long)]
    k_max: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Static top-k to compare against (default: midpoint).
    #[arg(long)]
    baseline: Option<f64>,
    /// Comma-separated scheduler kinds (default: all seven).
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Total training steps (overrides the config).
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RetrofitArgs {
    /// TC checkpoint to convert.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dynamic EC schedule kind, e.g. linear_reverse.
    #[arg(long, requires_all = ["k_min", "k_max"])]
    schedule: Option<String>,
    #[arg(long)]
    k_min: Option<f64>,
    #[arg(long)]
    k_max: Option<f64>,
    /// Fixed EC top-k (default: the TC top-k).
    #[arg(long, conflicts_with = "schedule")]
    k: Option<f64>,
    #[arg(long)]
    finetune_steps: Option<u64>,
    /// Also continue the TC model for the same number of steps.
    #[arg(long)]
    baseline: bool,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    /// Loss trace CSV; pass twice (dynamic, then static) for the ratio table.
    #[arg(long = "trace")]
    traces: Vec<PathBuf>,
    /// Explicit stage windows START:END, comma-separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "geometric")]
    stages: Option<Vec<String>>,
    /// Doubling stages START:END.
    #[arg(long)]
    geometric: Option<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    devices: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// Capacity factors of the bounded TC policies.
    #[arg(long, value_delimiter = ',')]
    cf: Option<Vec<f64>>,
    /// Zipf exponent of the score skew; 0 for uniform scores.
    #[arg(long)]
    skew: Option<f64>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Leave out the dropless TC variants.
    #[arg(long)]
    no_dropless: bool,
}

fn apply(cfg: &mut RunConfig, command: &Command) -> anyhow::Result<()> {
    match command {
        Command::Route(a) => {
            let r = &mut cfg.route;
            r.demo |= a.demo;
            if a.scores.is_some() || a.random.is_some() || a.demo {
                r.scores = a.scores.clone();
                r.random = a.random;
                r.demo = a.demo;
            }
            set(&mut r.policy, a.policy.clone());
            set(&mut r.k, a.k);
            set(&mut r.c, a.c);
            set(&mut r.cf, a.cf);
        }
        Command::ScheduleCheck(a) => {
            let s = &mut cfg.schedule_check;
            overwrite(&mut s.k_min, a.k_min);
            overwrite(&mut s.k_max, a.k_max);
            overwrite(&mut s.sigma, a.sigma);
            set(&mut s.baseline, a.baseline);
            if let Some(kinds) = &a.kinds {
                s.kinds = kinds
                    .iter()
                    .filter(|k| !k.trim().is_empty())
                    .map(|k| k.parse().map_err(|e: routelab::Error| commands::Usage(e.to_string())))
                    .collect::<Result<_, _>>()?;
            }
        }
        Command::Train(a) => {
            overwrite(&mut cfg.train.optim.total_steps, a.steps);
            set(&mut cfg.train.resume, a.resume.clone());
        }
        Command::Retrofit(a) => {
            let r = &mut cfg.retrofit;
            set(&mut r.checkpoint, a.checkpoint.clone());
            if let (Some(kind), Some(lo), Some(hi)) = (&a.schedule, a.k_min, a.k_max) {
                let kind = kind.parse().map_err(|e: routelab::Error| commands::Usage(e.to_string()))?;
                r.schedule = Some(routelab::CapacitySchedule::new(kind, lo, hi)?);
                r.k = None;
            }
            if a.k.is_some() {
                r.k = a.k;
                r.schedule = None;
            }
            overwrite(&mut r.finetune_steps, a.finetune_steps);
            r.baseline |= a.baseline;
        }
        Command::Analyze(a) => {
            let s = &mut cfg.analyze;
            if !a.traces.is_empty() {
                s.traces = a.traces.clone();
            }
            if let Some(stages) = &a.stages {
                s.stages = Some(stages.iter().map(|w| parse_window(w)).collect::<Result<_, _>>()?);
                s.geometric = None;
            }
            if let Some(g) = &a.geometric {
                s.geometric = Some(parse_window(g)?);
                s.stages = None;
            }
        }
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            overwrite(&mut s.n_experts, a.experts);
            overwrite(&mut s.n_devices, a.devices);
            overwrite(&mut s.k, a.k);
            overwrite(&mut s.cfs, a.cf.clone());
            overwrite(&mut s.skew, a.skew);
            overwrite(&mut s.n_tokens, a.tokens);
            overwrite(&mut s.n_steps, a.steps);
            s.dropless &= !a.no_dropless;
        }
    }
    Ok(())
}

fn set<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

fn overwrite<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn parse_window(s: &str) -> Result<(u64, u64), commands::Usage> {
    let bad = || commands::Usage(format!("expected START:END, got '{s}'"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let bad = || format!("expected TOKENS,EXPERTS, got '{s}'");
    let (n, e) = s.split_once(',').ok_or_else(bad)?;
    Ok((n.trim().parse().map_err(|_| bad())?, e.trim().parse().map_err(|_| bad())?))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    apply(&mut cfg, &cli.command)?;
    if let Some(n) = std::env::var("ROUTELAB_THREADS").ok().and_then(|v| v.parse().ok()) {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let mut out = Output::new(&cli.out)?;
    let seed = cfg.seed;
    let (name, section) = match cli.command {
        Command::Route(_) => {
            commands::route(&cfg.route, seed, &mut out)?;
            ("route", serde_json::to_value(&cfg.route)?)
        }
        Command::ScheduleCheck(_) => {
            commands::schedule_check(&cfg.schedule_check, &mut out)?;
            ("schedule-check", serde_json::to_value(&cfg.schedule_check)?)
        }
        Command::Train(_) => {
            commands::train(&mut cfg.train, seed, &mut out)?;
            ("train", serde_json::to_value(&cfg.train)?)
        }
        Command::Retrofit(_) => {
            commands::retrofit(&cfg.retrofit, seed, &mut out)?;
            ("retrofit", serde_json::to_value(&cfg.retrofit)?)
        }
        Command::Analyze(_) => {
            commands::analyze(&cfg.analyze, &mut out)?;
            ("analyze", serde_json::to_value(&cfg.analyze)?)
        }
        Command::Simulate(_) => {
            commands::simulate(&cfg.simulate, seed, &mut out)?;
            ("simulate", serde_json::to_value(&cfg.simulate)?)
        }
    };
    out.finish(name, seed, section)
}

fn main() -> ExitCode {
    let version = format!("{} (format {})", env!("CARGO_PKG_VERSION"), routelab::FORMAT_VERSION);
    let version: &'static str = Box::leak(version.into_boxed_str());
    let matches = Cli::command().version(version).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.downcast_ref::<commands::Usage>().is_some() {
                eprintln!("\nFor more information, try '--help'.");
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
