use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use dfac::env::{load_matrix_game, two_step_game, MatrixGame};
use dfac::networks::Algorithm;
use dfac::report::{atomic_write, cdf_sample_dump, factorization_table, write_metrics_csv, ModelSnapshot};
use dfac::selftest;
use dfac::training::{evaluate_greedy, run_training, TrainConfig};

const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Parser)]
#[command(name = "dfac", version, about = "Distributional value factorization on cooperative matrix games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.snapshot and factorization.json.
    Train(TrainArgs),
    /// Report greedy returns of a saved model.
    Eval(EvalArgs),
    /// Write the factorization table of a saved model.
    Table(TableArgs),
    /// Write sorted quantile samples for one state and joint action.
    Cdf(CdfArgs),
    /// Run the built-in invariant suites.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoArg {
    Iql,
    Vdn,
    Qmix,
    Diql,
    Ddn,
    Dmix,
}

impl From<AlgoArg> for Algorithm {
    fn from(a: AlgoArg) -> Self {
        match a {
            AlgoArg::Iql => Algorithm::Iql,
            AlgoArg::Vdn => Algorithm::Vdn,
            AlgoArg::Qmix => Algorithm::Qmix,
            AlgoArg::Diql => Algorithm::Diql,
            AlgoArg::Ddn => Algorithm::Ddn,
            AlgoArg::Dmix => Algorithm::Dmix,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    #[value(name = "two_step")]
    TwoStep,
}

#[derive(Args)]
struct OutArg {
    /// Output directory.
    #[arg(long, env = "DFAC_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_enum)]
    algo: Option<AlgoArg>,
    /// Built-in environment.
    #[arg(long, value_enum, conflicts_with = "game")]
    env: Option<EnvArg>,
    /// Matrix game definition file.
    #[arg(long)]
    game: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Total training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// TOML file overriding training defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Quantile samples per factorization table entry.
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
    #[command(flatten)]
    out: OutArg,
}

#[derive(Args)]
struct SnapshotArg {
    /// Saved model; defaults to model.snapshot in the output directory.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[command(flatten)]
    out: OutArg,
}

impl SnapshotArg {
    fn load(&self) -> Result<ModelSnapshot> {
        let path = self.snapshot.clone().unwrap_or_else(|| self.out.out.join("model.snapshot"));
        ModelSnapshot::load(&path).with_context(|| format!("loading snapshot {}", path.display()))
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    snapshot: SnapshotArg,
    /// Greedy evaluation episodes.
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    /// Evaluation seed; defaults to the training seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TableArgs {
    #[command(flatten)]
    snapshot: SnapshotArg,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
}

#[derive(Args)]
struct CdfArgs {
    #[command(flatten)]
    snapshot: SnapshotArg,
    /// State label, e.g. 2B.
    #[arg(long)]
    state: String,
    /// Comma-separated action labels, one per agent, e.g. B,B.
    #[arg(long)]
    actions: String,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    samples: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Eval(args) => eval(args),
        Command::Table(args) => table(args),
        Command::Cdf(args) => cdf(args),
        Command::Selftest => run_selftest(),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn resolve_game(env: Option<EnvArg>, game: Option<&Path>) -> Result<MatrixGame> {
    match (env, game) {
        (_, Some(path)) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading game {}", path.display()))?;
            load_matrix_game(&text).with_context(|| format!("parsing game {}", path.display()))
        }
        (Some(EnvArg::TwoStep), None) | (None, None) => Ok(two_step_game()),
    }
}

fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_toml(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(a) = args.algo {
        config.algorithm = a.into();
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(n) = args.episodes {
        config.total_episodes = n;
    }
    config.validate()?;
    Ok(config)
}

fn train(args: TrainArgs) -> Result<ExitCode> {
    let config = resolve_config(&args)?;
    let game = resolve_game(args.env, args.game.as_deref())?;
    let out = &args.out.out;
    ensure_dir(out)?;

    let (metrics, model) = run_training(game.clone(), &config)?;
    write_metrics_csv(&out.join("metrics.csv"), &metrics)?;
    ModelSnapshot::capture(&model, &config, game.spec()).save(&out.join("model.snapshot"))?;
    let table = factorization_table(&model, &game, args.samples)?;
    atomic_write(&out.join("factorization.json"), table.to_json()?.as_bytes())?;

    if let Some(last) = metrics.points.last() {
        println!(
            "{} seed {}: {} episodes, greedy return {:.3}, td loss {:.4}",
            config.algorithm, config.seed, last.episode, last.greedy_return_mean, last.td_loss
        );
    }
    println!("wrote metrics.csv, model.snapshot and factorization.json to {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(args: EvalArgs) -> Result<ExitCode> {
    if args.episodes == 0 {
        bail!("--episodes must be at least 1");
    }
    let snap = args.snapshot.load()?;
    let model = snap.model()?;
    let game = snap.game()?;
    let seed = args.seed.unwrap_or(snap.config.seed);
    let returns = evaluate_greedy(&game, &model, seed, args.episodes, snap.config.loss.n_eval)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let std = (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
    let max = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    println!("algorithm {}", snap.algorithm);
    println!("episodes {}", returns.len());
    println!("greedy_return_mean {mean:.6}");
    println!("greedy_return_std {std:.6}");
    println!("greedy_return_min {min:.6}");
    println!("greedy_return_max {max:.6}");
    Ok(ExitCode::SUCCESS)
}

fn table(args: TableArgs) -> Result<ExitCode> {
    let snap = args.snapshot.load()?;
    let table = factorization_table(&snap.model()?, &snap.game()?, args.samples)?;
    let out = &args.snapshot.out.out;
    ensure_dir(out)?;
    let json = table.to_json()?;
    atomic_write(&out.join("factorization.json"), json.as_bytes())?;
    println!("{json}");
    Ok(ExitCode::SUCCESS)
}

fn cdf(args: CdfArgs) -> Result<ExitCode> {
    let snap = args.snapshot.load()?;
    let game = snap.game()?;
    let spec = game.spec();
    let state = spec.state_index(&args.state).ok_or_else(|| anyhow!("unknown state `{}`", args.state))?;
    let joint = spec
        .parse_joint(&args.actions)
        .ok_or_else(|| anyhow!("`{}` is not a joint action of this game", args.actions))?;
    let dump = cdf_sample_dump(&snap.model()?, &game, state, &joint, args.samples)?;
    let out = &args.snapshot.out.out;
    ensure_dir(out)?;
    let path = out.join(dump.file_name());
    atomic_write(&path, dump.to_csv().as_bytes())?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn run_selftest() -> Result<ExitCode> {
    let results = selftest::run_all()?;
    for r in &results {
        println!("{r}");
    }
    Ok(if results.iter().all(|r| r.passed) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
