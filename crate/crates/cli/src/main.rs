//! `cup`: train, prune and compare feed-forward networks.
//!
//! Failures print a single `error[<kind>]: <message>` line on stderr and exit
//! with status 1 (2 for usage errors).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::CliError;

#[derive(Parser, Debug)]
#[command(name = "cup", version, about = "Cluster pruning for feed-forward networks")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a ReLU MLP from scratch.
    Train(TrainArgs),
    /// Cluster-prune a model, optionally retraining it.
    Prune(PruneArgs),
    /// Prune to fixed per-layer counts by weight magnitude or at random.
    PruneBaseline(BaselineArgs),
    /// Train from scratch while pruning on a linear threshold schedule.
    PruneSs(SsArgs),
    /// Run the pruning pipeline over a grid of thresholds or slopes.
    Sweep(SweepArgs),
    /// Compare the size and cost of two models.
    Report(ReportArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory holding the MNIST IDX files.
    #[arg(long, env = "CUP_DATA_DIR")]
    data_dir: Option<PathBuf>,
    /// Use only the first N training images.
    #[arg(long, value_name = "N")]
    train_limit: Option<usize>,
    /// Use only the first N test images.
    #[arg(long, value_name = "N")]
    test_limit: Option<usize>,
}

#[derive(Args, Debug, Clone)]
struct RecipeArgs {
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Layer widths, e.g. 784-500-300-10.
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Model output; the training log goes next to it as <stem>.train.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Auto,
    Manual,
}

#[derive(Args, Debug, Clone)]
struct RetrainArgs {
    /// Epochs of retraining after pruning.
    #[arg(long, default_value_t = 0)]
    retrain_epochs: usize,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct PruneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Auto)]
    mode: Mode,
    /// Dendrogram cut height (auto mode).
    #[arg(long, allow_hyphen_values = true)]
    t: Option<f64>,
    /// Surviving filters per prunable layer, e.g. 100,60 (manual mode).
    #[arg(long, value_parser = parse_counts)]
    counts: Option<Counts>,
    /// Scale feature rows to unit norm before clustering.
    #[arg(long)]
    normalize: bool,
    #[command(flatten)]
    retrain: RetrainArgs,
    /// Pruned model; plan and costs go to <stem>.plan.json and <stem>.cost.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum CriterionArg {
    Random,
    L1,
    L2,
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    criterion: CriterionArg,
    #[arg(long, value_parser = parse_counts)]
    counts: Counts,
    #[command(flatten)]
    retrain: RetrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct SsFlags {
    #[arg(long, default_value_t = 0.03, allow_hyphen_values = true)]
    k: f64,
    #[arg(long, default_value_t = 0.3, allow_hyphen_values = true)]
    b: f64,
    /// Required flops reduction (initial / final).
    #[arg(long, default_value_t = 2.0, conflicts_with = "target_flops")]
    target_fr: f64,
    /// Absolute flops budget instead of a reduction.
    #[arg(long)]
    target_flops: Option<u64>,
    #[arg(long)]
    normalize: bool,
}

#[derive(Args, Debug)]
struct SsArgs {
    #[arg(long, value_parser = parse_arch)]
    arch: Arch,
    #[command(flatten)]
    ss: SsFlags,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[command(flatten)]
    recipe: RecipeArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Model output; the history goes to <stem>.history.csv and .history.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum SweepParam {
    T,
    K,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_enum)]
    param: SweepParam,
    #[arg(long, allow_hyphen_values = true)]
    from: f64,
    #[arg(long, allow_hyphen_values = true)]
    to: f64,
    #[arg(long, allow_hyphen_values = true)]
    step: f64,
    /// Trained model to prune (t sweeps).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Architecture trained from scratch (k sweeps).
    #[arg(long, value_parser = parse_arch)]
    arch: Option<Arch>,
    /// Single-shot epochs (k sweeps).
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[command(flatten)]
    ss: SsFlags,
    #[command(flatten)]
    retrain: RetrainArgs,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    baseline_model: PathBuf,
    #[arg(long)]
    compressed_model: PathBuf,
    /// Layerwise CSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Layer widths such as `784-500-300-10`.
#[derive(Clone, Debug)]
struct Arch(Vec<usize>);

/// Comma-separated filter counts such as `100,60`.
#[derive(Clone, Debug)]
struct Counts(Vec<usize>);

fn parse_arch(s: &str) -> Result<Arch, String> {
    cup_core::model::parse_arch(s).map(Arch).map_err(|e| e.to_string())
}

fn parse_counts(s: &str) -> Result<Counts, String> {
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("invalid count list {s:?}")))
        .collect::<Result<_, _>>()
        .map(Counts)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Prune(a) => commands::prune(a),
        Command::PruneBaseline(a) => commands::prune_baseline(a),
        Command::PruneSs(a) => commands::prune_ss(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Report(a) => commands::report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                e.exit();
            }
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {line}");
            return ExitCode::from(2);
        }
    };
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            ExitCode::from(if matches!(e, CliError::Usage(_)) { 2 } else { 1 })
        }
    }
}
