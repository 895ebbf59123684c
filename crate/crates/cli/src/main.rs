mod commands;
mod run_dir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Multi-task molecular property classification from SMILES.
#[derive(Debug, Parser)]
#[command(name = "samtl", version, about, propagate_version = true)]
pub struct Cli {
    /// Root directory under which every command creates its run directory.
    #[arg(long, global = true, env = "SAMTL_RUN_DIR", default_value = "runs")]
    pub run_root: PathBuf,
    /// Directory holding fetched datasets, used to resolve presets.
    #[arg(long, global = true, env = "SAMTL_DATA_DIR", default_value = "data")]
    pub data_dir: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Download a benchmark dataset into the data directory.
    Fetch(FetchArgs),
    /// Print the tokens (or scaffold keys) of every SMILES in a CSV.
    Tokenize(TokenizeArgs),
    /// Train one model per seed and evaluate the validation-selected checkpoints.
    Train(TrainArgs),
    /// Score a trained run on a labelled CSV.
    Evaluate(EvaluateArgs),
    /// Print per-task probabilities for SMILES strings.
    Predict(PredictArgs),
    /// Train the ablation matrix and print a comparison table.
    Ablate(AblateArgs),
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Dump encoder outputs and attention maps for SMILES strings.
    Encode(EncodeArgs),
    /// List the named dataset protocols.
    Presets,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// One of bbbp, clintox, hiv, sider, tox21.
    pub dataset: String,
    /// Base URL of the dataset mirror.
    #[arg(long, default_value = samtl::data::DEFAULT_BASE_URL)]
    pub base_url: String,
}

#[derive(Debug, Args)]
pub struct TokenizeArgs {
    pub csv: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_column: String,
    /// Emit `smiles<TAB>scaffold_key` instead of tokens.
    #[arg(long)]
    pub scaffolds: bool,
    /// Split two-character atoms into single characters.
    #[arg(long)]
    pub single_char: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Random,
    Stratified,
    Scaffold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadArg {
    DiscreteOutput,
    MaxPool,
}

/// Dataset selection shared by `train` and `ablate`.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV file or preset name (see `samtl presets`).
    pub input: String,
    /// SMILES column (ignored for presets).
    #[arg(long, default_value = "smiles")]
    pub smiles_column: String,
    /// Comma-separated task columns; default infers every 0/1 column.
    #[arg(long, value_delimiter = ',')]
    pub tasks: Option<Vec<String>>,
    /// Split method; presets supply their own default.
    #[arg(long, value_enum)]
    pub split: Option<SplitArg>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    /// Held-out test CSV; training then uses the train and test parts of the split.
    #[arg(long)]
    pub score_csv: Option<PathBuf>,
}

/// Model and optimizer settings. Flags override `--config`, which
/// overrides the built-in defaults.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON file with optional `model` and `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds; seeds are `seed_base .. seed_base + k`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed_base: u64,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub max_seq_len: Option<usize>,
    #[arg(long)]
    pub sa_layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub embed_size: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub ffn_size: Option<usize>,
    #[arg(long)]
    pub filter_width: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[arg(long)]
    pub position_encoding: bool,
    #[arg(long)]
    pub no_self_attention: bool,
    #[arg(long)]
    pub no_cnn: bool,
    /// Replace the convolution with a GRU.
    #[arg(long)]
    pub rnn: bool,
    #[arg(long)]
    pub single_char: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Run directory; default is a fresh directory under the run root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Matrix {
    /// The full model and eight single-change variants.
    Table7,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, value_enum)]
    pub matrix: Matrix,
    /// Also run the variant without convolution and attention.
    #[arg(long)]
    pub include_degenerate: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub run: PathBuf,
    pub csv: PathBuf,
    #[arg(long, default_value = "smiles")]
    pub smiles_column: String,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub run: PathBuf,
    #[arg(required = true)]
    pub smiles: Vec<String>,
    /// Average every seed's checkpoint instead of using `best.samtl`.
    #[arg(long)]
    pub ensemble: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Random seeds per op.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Parameter coordinates sampled per whole-network check.
    #[arg(long, default_value_t = samtl::gradsuite::END_TO_END_SAMPLES)]
    pub samples: usize,
    /// Skip the whole-network checks of the ablation variants.
    #[arg(long)]
    pub ops_only: bool,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub run: PathBuf,
    #[arg(required = true)]
    pub smiles: Vec<String>,
    /// CSV file for attention weights.
    #[arg(long)]
    pub dump_attention: Option<PathBuf>,
}

/// An invocation problem the user can fix by changing arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// A failed numerical check.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if cause.is::<NumericFailure>() {
            return EXIT_NUMERIC;
        }
        if let Some(samtl::TrainError::DivergedLoss { .. }) = cause.downcast_ref() {
            return EXIT_NUMERIC;
        }
        if let Some(samtl::data::FetchError::UnknownDataset { .. }) = cause.downcast_ref() {
            return EXIT_USAGE;
        }
    }
    EXIT_DATA
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
