use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use conet::experiment::{self, resolve_run_dir, AnnealTrigger, Plan, RunData};
use conet::intervene::{AnnealParams, ForgetParams, DEFAULT_ATTEMPT_BUDGET};
use conet::{ConceptGraph, Execution, TaskSet, TrainConfig, UpdateMode};

/// Multi-task concept network simulator.
#[derive(Parser)]
#[command(name = "conet", version)]
struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a baseline run.
    Train(TrainArgs),
    /// Train with an annealing boost at a fixed step or the frustration peak.
    Anneal(AnnealArgs),
    /// Train with a forgetting boost at a fixed step.
    Forget(ForgetArgs),
    /// Write derived tables for a finished run.
    Analyze {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to <run>/reports/analysis.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare per-problem accuracy of two runs over the same tasks.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Matched step; defaults to the latest step evaluated in both.
        #[arg(long)]
        step: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-execute a run and check every artifact digest.
    Replay {
        #[arg(long)]
        run: PathBuf,
        /// Defaults to <run>.replay.
        #[arg(long)]
        into: Option<PathBuf>,
        /// Keep the replayed directory.
        #[arg(long)]
        keep: bool,
    },
    /// Write the graph and task set a configuration generates.
    ExportGraph {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sequential,
    Aggregated,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecArg {
    Parallel,
    Sequential,
}

/// Every configuration key as an optional override of the file value.
#[derive(Args)]
struct ConfigArgs {
    /// TOML configuration; unset keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_nodes: Option<usize>,
    #[arg(long)]
    out_degree: Option<usize>,
    #[arg(long)]
    n_tasks: Option<usize>,
    #[arg(long)]
    n_rollout: Option<usize>,
    #[arg(long)]
    l_max: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    learning_rate: Option<f64>,
    #[arg(long)]
    total_steps: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    web_threshold: Option<f64>,
    #[arg(long, alias = "seed")]
    master_seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    theta_floor: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    init_low: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    init_high: Option<f64>,
    #[arg(long)]
    advantage_mean_divide: Option<bool>,
    #[arg(long, value_enum)]
    update_mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    execution: Option<ExecArg>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                TrainConfig::from_toml_str(&text)?
            }
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(
            n_nodes, out_degree, n_tasks, n_rollout, l_max, learning_rate, total_steps, eval_every, eval_samples,
            snapshot_every, web_threshold, master_seed, theta_floor, init_low, init_high, advantage_mean_divide
        );
        if let Some(m) = self.update_mode {
            c.update_mode = match m {
                ModeArg::Sequential => UpdateMode::Sequential,
                ModeArg::Aggregated => UpdateMode::Aggregated,
            };
        }
        if let Some(e) = self.execution {
            c.execution = match e {
                ExecArg::Parallel => Execution::Parallel,
                ExecArg::Sequential => Execution::Sequential,
            };
        }
        for w in c.validate()? {
            log::warn!("{w}");
        }
        Ok(c)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Run directory; relative paths resolve against $CONET_RUN_ROOT.
    #[arg(long)]
    run: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AnnealArgs {
    #[command(flatten)]
    train: TrainArgs,
    /// Fixed step; ignored with --frustration.
    #[arg(long, default_value_t = 50)]
    at: usize,
    /// Fire at the confirmed cluster-count peak instead of a fixed step.
    #[arg(long)]
    frustration: bool,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 3)]
    confirm: usize,
    /// Latest step for the frustration trigger.
    #[arg(long, default_value_t = 150)]
    deadline: usize,
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    count: usize,
    /// Accuracy below which a task is a candidate.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_ATTEMPT_BUDGET)]
    budget: usize,
}

#[derive(Args)]
struct ForgetArgs {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long, default_value_t = 400)]
    at: usize,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = DEFAULT_ATTEMPT_BUDGET)]
    budget: usize,
}

fn execute(train: &TrainArgs, plan_for: impl FnOnce(usize) -> Plan) -> anyhow::Result<()> {
    let config = train.config.resolve()?;
    let plan = plan_for(config.total_steps);
    let dir = resolve_run_dir(&train.run);
    let manifest = experiment::run_plan(&dir, &config, &plan)?;
    println!(
        "{}: {} steps complete in {}",
        manifest.plan.name,
        manifest.completed_steps,
        dir.display()
    );
    Ok(())
}

fn write_json(value: &impl serde::Serialize, out: Option<&Path>) -> anyhow::Result<()> {
    match out {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?);
            serde_json::to_writer_pretty(&mut w, value)?;
            writeln!(w)?;
        }
        None => {
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
                other => other?,
            }
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(t) => execute(&t, Plan::baseline),
        Command::Anneal(a) => {
            let trigger = if a.frustration {
                AnnealTrigger::Frustration {
                    window: a.window,
                    confirm: a.confirm,
                    deadline: a.deadline,
                }
            } else {
                AnnealTrigger::Fixed { step: a.at }
            };
            let params = AnnealParams {
                acc_threshold: a.threshold,
                target_count: a.count,
                tau: a.tau,
                attempt_budget: a.budget,
            };
            execute(&a.train, |total| Plan::anneal(trigger, params, total))
        }
        Command::Forget(f) => {
            let params = ForgetParams {
                tau: f.tau,
                target_count: f.count,
                attempt_budget: f.budget,
            };
            execute(&f.train, |total| Plan::forget(f.at, params, total))
        }
        Command::Analyze { run, out } => {
            let dir = resolve_run_dir(&run);
            let out = out.unwrap_or_else(|| dir.join("reports").join("analysis"));
            let summary = experiment::analyze_run(&dir, &out)?;
            write_json(&summary, None)
        }
        Command::Compare { a, b, step, out } => {
            let ra = RunData::open(&resolve_run_dir(&a))?;
            let rb = RunData::open(&resolve_run_dir(&b))?;
            let cmp = experiment::compare_runs(&ra, &rb, step)?;
            write_json(&cmp, out.as_deref())
        }
        Command::Replay { run, into, keep } => {
            let dir = resolve_run_dir(&run);
            let into = into.unwrap_or_else(|| {
                let mut s = dir.clone().into_os_string();
                s.push(".replay");
                PathBuf::from(s)
            });
            let report = experiment::replay(&dir, &into)?;
            if !keep {
                std::fs::remove_dir_all(&into).with_context(|| format!("removing {}", into.display()))?;
            }
            write_json(&report, None)?;
            if !report.is_reproduced() {
                return Err(conet::Error::Comparison(format!("{} artifacts differ on replay", report.differing.len())).into());
            }
            Ok(())
        }
        Command::ExportGraph { config, graph, tasks } => {
            let c = config.resolve()?;
            let g = ConceptGraph::generate(c.n_nodes, c.out_degree, c.master_seed)?;
            g.write_edge_list(BufWriter::new(File::create(&graph)?))?;
            if let Some(t) = tasks {
                TaskSet::sample(&g, c.n_tasks, c.master_seed)?.write(BufWriter::new(File::create(&t)?))?;
            }
            Ok(())
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<conet::Error>() {
        Some(e) => e.exit_code() as u8,
        None if err.downcast_ref::<std::io::Error>().is_some() => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(&e.downcast_ref::<conet::Error>(), Some(conet::Error::Locked { .. })) {
                eprintln!("another process owns this run directory");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
