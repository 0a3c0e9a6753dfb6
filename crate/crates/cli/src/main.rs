mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit statuses shared by every subcommand.
pub mod exit {
    pub const UNEXPECTED: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const EMPTY: u8 = 3;
    pub const MISMATCH: u8 = 4;
}

const AFTER_HELP: &str = "\
Settings may also come from --config FILE, a flat text file of `key = value`
lines whose keys are long flag names (dashes or underscores). A flag given on
the command line overrides the same key in the file.

Exit codes: 0 success, 1 unexpected failure, 2 usage or config error,
3 nothing left to analyse, 4 evaluation sets do not match.";

#[derive(Parser)]
#[command(name = "abd", version, about = "Batch detection of anomalous driving behavior", after_help = AFTER_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic grid network, trips and ground truth.
    Generate(GenerateArgs),
    /// Match, featurize, score and rank drivers in one run.
    Pipeline(PipelineArgs),
    /// Map-match trips only and write the snapped points.
    Match(MatchArgs),
    /// Score a feature table, fitting a forest unless --model is given.
    Score(ScoreArgs),
    /// Compare a driver report against ground truth labels.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rows: Option<usize>,
    #[arg(long)]
    pub cols: Option<usize>,
    /// Block length in meters.
    #[arg(long)]
    pub spacing: Option<f64>,
    #[arg(long)]
    pub drivers: Option<usize>,
    #[arg(long)]
    pub trips_per_driver: Option<usize>,
    #[arg(long)]
    pub abnormal_fraction: Option<f64>,
    #[arg(long)]
    pub loop_prob: Option<f64>,
    #[arg(long)]
    pub detour_prob: Option<f64>,
    #[arg(long)]
    pub brake_prob: Option<f64>,
    #[arg(long)]
    pub accel_prob: Option<f64>,
}

/// Knobs shared by the analysis commands.
#[derive(Args, Debug, Default)]
pub struct AnalysisArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Minimum trip length in meters; trips must be strictly longer.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub contamination: Option<f64>,
    /// Number of isolation trees.
    #[arg(long)]
    pub trees: Option<usize>,
    /// Subsample size per tree.
    #[arg(long)]
    pub subsample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub trip_threshold: Option<f64>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    /// Also fit one forest per feature group.
    #[arg(long)]
    pub per_category: bool,
    /// Snapping radius in meters.
    #[arg(long)]
    pub max_snap: Option<f64>,
    #[arg(long)]
    pub min_matched_fraction: Option<f64>,
    /// Acceleration threshold (m/s²) used when trips carry no event flags.
    #[arg(long)]
    pub accel_threshold: Option<f64>,
    /// Cell edge of the segment index, meters.
    #[arg(long)]
    pub cell_size: Option<f64>,
    /// Run every stage on one thread.
    #[arg(long)]
    pub sequential: bool,
}

#[derive(Args, Debug, Default)]
pub struct PipelineArgs {
    /// Directory holding nodes.csv and segments.csv.
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub trips: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Args, Debug, Default)]
pub struct MatchArgs {
    #[arg(long)]
    pub network: Option<PathBuf>,
    #[arg(long)]
    pub trips: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Args, Debug, Default)]
pub struct ScoreArgs {
    /// Feature table as written by `pipeline`.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Previously saved model.json; scores without refitting.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub analysis: AnalysisArgs,
}

#[derive(Args, Debug, Default)]
pub struct EvaluateArgs {
    /// Driver report with a classification column.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth with driver_id,label.
    #[arg(long)]
    pub truth: PathBuf,
    /// Where metrics.json goes; defaults to the report's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Pipeline(a) => commands::pipeline(a),
        Command::Match(a) => commands::match_only(a),
        Command::Score(a) => commands::score(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    ExitCode::from(code)
}
