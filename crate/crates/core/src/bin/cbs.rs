use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use critbatch::pipeline::{analyze_curve_file, Pipeline};
use critbatch::runstore::RunStore;
use critbatch::scaling_laws::{CurveFamily, FitTarget};

/// Critical batch size experiments on small controllable tasks.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Store root holding runs/ and results/.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads for branches, arms and noise pairs (default: all cores).
    #[arg(long, global = true)]
    parallel: Option<usize>,
    /// Overwrite existing runs and result files.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Args)]
struct Source {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "run")]
    config: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reuse the config stored with an existing run instead of a file.
    #[arg(long)]
    run: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base run and write its checkpoints.
    Train {
        #[command(flatten)]
        source: Source,
    },
    /// Branched sweeps at checkpoints; writes sweep.csv and curve.csv.
    Sweep {
        #[command(flatten)]
        source: Source,
        /// Checkpoint positions in tokens (default: all).
        #[arg(long, value_delimiter = ',')]
        at: Vec<u64>,
    },
    /// Gradient noise scale at checkpoints; writes noise.csv.
    Noise {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_delimiter = ',')]
        at: Vec<u64>,
    },
    /// Warmup versus small- and large-batch controls.
    Warmup {
        #[command(flatten)]
        source: Source,
        /// Curve CSV to plan from (default: the run's own curve.csv).
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Fit a curve CSV and predict the aggregate critical batch size.
    Analyze {
        #[arg(long)]
        curve: PathBuf,
        #[arg(long, default_value = "power")]
        family: CurveFamily,
        /// Fit the interval lower bound or the geometric-mean point.
        #[arg(long, default_value = "lower", value_parser = parse_target)]
        target: FitTarget,
        /// Horizon in tokens.
        #[arg(long)]
        horizon: f64,
        /// Results subdirectory name.
        #[arg(long, default_value = "analysis")]
        name: String,
    },
}

fn parse_target(s: &str) -> Result<FitTarget, String> {
    match s {
        "lower" => Ok(FitTarget::Lower),
        "point" => Ok(FitTarget::Point),
        _ => Err(format!("unknown fit target {s:?} (expected lower or point)")),
    }
}

fn pipeline(store: RunStore, source: &Source, force: bool) -> anyhow::Result<Pipeline> {
    let p = match (&source.config, &source.run) {
        (Some(path), None) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Pipeline::new(store, &text, source.seed)?
        }
        (None, Some(run)) => {
            if source.seed.is_some() {
                bail!("--seed cannot be combined with --run");
            }
            Pipeline::from_run(store, run)?
        }
        _ => bail!("pass either --config or --run"),
    };
    Ok(p.force(force))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let store = RunStore::open(&cli.out_dir)?;
    match cli.command {
        Command::Train { source } => {
            let out = pipeline(store, &source, cli.force)?.train()?;
            if let Some(t) = out.resumed_from {
                println!("resumed from {t} tokens");
            }
            println!("{} complete at {} tokens, smoothed loss {:.6}", out.run_id, out.final_tokens, out.final_smoothed_loss);
        }
        Command::Sweep { source, at } => {
            let (curve, path) = pipeline(store, &source, cli.force)?.sweep(&at)?;
            for m in &curve {
                let upper = m.interval.upper.map_or("censored".to_owned(), |u| u.to_string());
                println!("{:>12} tokens  k*={:<6} cbs in [{}, {}]", m.checkpoint_tokens, m.k_star, m.interval.lower, upper);
            }
            println!("wrote {}", path.display());
        }
        Command::Noise { source, at } => {
            let (rows, path) = pipeline(store, &source, cli.force)?.noise(&at)?;
            for (tokens, e) in &rows {
                println!("{tokens:>12} tokens  B_simple={:.4} [{:.4}, {:.4}]", e.b_simple, e.ci_low, e.ci_high);
            }
            println!("wrote {}", path.display());
        }
        Command::Warmup { source, curve } => {
            let out = pipeline(store, &source, cli.force)?.warmup(curve.as_deref())?;
            println!("doubling at {:?}", out.plan.thresholds);
            for r in &out.results {
                println!("{:<12} loss {:.6}  steps {}", r.kind.name(), r.final_mt_loss, r.grad_steps);
            }
            println!("arm runs: {}", out.arm_runs.join(", "));
            println!("wrote {}", out.report_path.display());
        }
        Command::Analyze { curve, family, target, horizon, name } => {
            let (report, path) = analyze_curve_file(&store, &name, &curve, family, target, horizon, cli.force)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.parallel {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = match e.downcast_ref::<critbatch::Error>() {
                Some(err) if err.is_validation() => 2,
                Some(err) if err.is_numeric() => 3,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}
