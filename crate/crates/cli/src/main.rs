mod commands;
mod config;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "asc", version, about = "Acoustic scene classification pipeline")]
pub struct Cli {
    /// Worker threads for parallel sections [env: ASC_THREADS; default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Bit-stable mode: results do not depend on thread count or scheduling
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Config file of `key = value` lines; `[subcommand]` sections scope keys. Flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic scene dataset (WAVs, metadata, folds)
    Synth(SynthArgs),
    /// Extract features for every clip in the metadata
    Featurize(FeaturizeArgs),
    /// Rank segments and write a curation report
    Curate(CurateArgs),
    /// Train a DenseNet on one fold and write a checkpoint
    Train(TrainArgs),
    /// Fit the per-class GMM baseline on one fold
    BaselineGmm(GmmArgs),
    /// Score a checkpoint or GMM bank on a fold's test split
    Evaluate(EvaluateArgs),
    /// Four-fold cross-validation; appends one result line
    Cv(CvArgs),
    /// Render results as a markdown table plus confusion CSVs
    Report(ReportArgs),
    /// Finite-difference check of every autograd operator
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Featurize(_) => "featurize",
            Command::Curate(_) => "curate",
            Command::Train(_) => "train",
            Command::BaselineGmm(_) => "baseline-gmm",
            Command::Evaluate(_) => "evaluate",
            Command::Cv(_) => "cv",
            Command::Report(_) => "report",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Dataset root; audio paths in the metadata are relative to it
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Metadata TSV [default: <data>/meta.tsv]
    #[arg(long)]
    pub meta: Option<PathBuf>,
    /// Directory holding fold{1..4}_{train,test}.tsv [default: <data>/folds]
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Feature store directory [default: <data>/features]
    #[arg(long)]
    pub features: Option<PathBuf>,
}

impl DataArgs {
    pub fn meta_path(&self) -> PathBuf {
        self.meta.clone().unwrap_or_else(|| self.data.join("meta.tsv"))
    }
    pub fn folds_dir(&self) -> PathBuf {
        self.folds.clone().unwrap_or_else(|| self.data.join("folds"))
    }
    pub fn features_dir(&self) -> PathBuf {
        self.features.clone().unwrap_or_else(|| self.data.join("features"))
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SynthArgs {
    /// Output directory
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub classes: usize,
    #[arg(long, default_value_t = 40)]
    pub segments_per_class: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Fraction of segments replaced by near-constant outliers
    #[arg(long, default_value_t = 0.0)]
    pub outlier_frac: f64,
    /// Give outliers a wrong label
    #[arg(long)]
    pub mislabel: bool,
    #[arg(long, default_value_t = 44_100)]
    pub sample_rate: u32,
    /// Segment length in seconds
    #[arg(long, default_value_t = 10.0)]
    pub duration: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureChoice {
    Logmel128,
    Mfcc60,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FeaturizeArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Feature kinds, comma separated
    #[arg(long, value_enum, value_delimiter = ',', default_value = "logmel128,mfcc60")]
    pub feature: Vec<FeatureChoice>,
    /// Also write each log-mel record as a PGM image under <features>/images
    #[arg(long)]
    pub dump_image: bool,
    /// Segment length for splitting clips
    #[arg(long, default_value_t = 10.0)]
    pub segment_seconds: f64,
    #[arg(long, default_value_t = 40.0)]
    pub frame_ms: f64,
    #[arg(long, default_value_t = 0.5)]
    pub overlap: f64,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Variance,
    Silence,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CurationArgs {
    /// Ranking statistic
    #[arg(long, value_enum, default_value = "variance")]
    pub method: MethodChoice,
    /// Fraction of training segments to drop (variance method)
    #[arg(long, default_value_t = 0.0)]
    pub ratio: f64,
    /// Drop segments quieter than this (silence method)
    #[arg(long, default_value_t = -60.0, allow_negative_numbers = true)]
    pub threshold_dbfs: f64,
    /// Segment length used to measure levels (silence method)
    #[arg(long, default_value_t = 10.0)]
    pub segment_seconds: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CurateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub curation: CurationArgs,
    /// Curate only this fold's training split [default: every segment]
    #[arg(long)]
    pub fold: Option<usize>,
    /// Report TSV [default: <data>/curation.tsv]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NetChoice {
    Densenet,
    Msdensenet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Gmm,
    Densenet,
    Msdensenet,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetChoice {
    Default,
    Tiny,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationChoice {
    MeanLogprob,
    Majority,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct NetArgs {
    #[arg(long, value_enum, default_value = "default")]
    pub preset: PresetChoice,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without validation improvement before stopping
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Per-class fraction of training segments held out for validation
    #[arg(long, default_value_t = 0.1)]
    pub val_fraction: f64,
    /// How patch posteriors combine into a segment decision
    #[arg(long, value_enum, default_value = "mean-logprob")]
    pub aggregation: AggregationChoice,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EmArgs {
    /// Mixture components per class
    #[arg(long, default_value_t = 32)]
    pub components: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    /// Stop when the average log-likelihood gains less than this
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "msdensenet")]
    pub model: NetChoice,
    #[command(flatten)]
    pub net: NetArgs,
    /// Fold to train on (1..4)
    #[arg(long, default_value_t = 1)]
    pub fold: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub curation: CurationArgs,
    /// Checkpoint path [default: <data>/runs/<model>-<preset>-fold<K>.ascp]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GmmArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    /// Fold to train on (1..4)
    #[arg(long, default_value_t = 1)]
    pub fold: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[command(flatten)]
    pub curation: CurationArgs,
    /// Bank path [default: <data>/runs/gmm-fold<K>.ascg]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// A `.ascp` network checkpoint (with its `.json` sidecar) or a `.ascg` GMM bank
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Fold whose test split is scored (1..4)
    #[arg(long, default_value_t = 1)]
    pub fold: usize,
    /// Override the aggregation stored with a network checkpoint
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationChoice>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CvArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value = "msdensenet")]
    pub model: ModelChoice,
    #[command(flatten)]
    pub net: NetArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[command(flatten)]
    pub curation: CurationArgs,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Also train on all development folds and score folds/evaluate.tsv
    #[arg(long)]
    pub evaluate: bool,
    /// JSON-lines results file to append to [default: <data>/results.jsonl]
    #[arg(long)]
    pub results: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReportArgs {
    /// JSON-lines results file
    #[arg(long, default_value = "data/results.jsonl")]
    pub results: PathBuf,
    /// Output directory for report.md and confusion CSVs
    #[arg(long, default_value = "data/report")]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GradcheckArgs {
    /// Random points per operator
    #[arg(long, default_value_t = 5)]
    pub points: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Pass threshold on the max relative error
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    /// JSON summary
    #[arg(long, default_value = "gradcheck.json")]
    pub out: PathBuf,
}

/// Exit status 1: bad input or flags. Exit status 2: the run itself failed.
#[derive(Debug)]
pub enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    pub fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
    pub fn validation(e: impl std::fmt::Display) -> Self {
        Failure::Validation(e.to_string())
    }
}

fn argv_with_config(argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let cli = Cli::try_parse_from(&argv).map_err(clap_exit)?;
    let Some(path) = &cli.config else { return Ok(argv) };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let cfg = config::parse(&text).map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    let active = cli.command.name();
    let injected = config::flags_for(&cfg, &Cli::command(), active)
        .map_err(|e| Failure::validation(format!("{}: {e}", path.display())))?;
    // Config values go right after the subcommand so that later flags override them.
    let pos = argv.iter().position(|a| a == active).expect("subcommand present");
    let mut out = argv[..=pos].to_vec();
    out.extend(injected);
    out.extend_from_slice(&argv[pos + 1..]);
    Ok(out)
}

fn clap_exit(e: clap::Error) -> Failure {
    use clap::error::ErrorKind;
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            std::process::exit(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 1 } else { 0 });
        }
        _ => Failure::Validation(e.render().to_string()),
    }
}

fn parse_cli(argv: Vec<String>) -> Result<Cli, Failure> {
    let argv = argv_with_config(argv)?;
    let cmd = Cli::command().mut_subcommands(|s| s.args_override_self(true));
    let matches = cmd.try_get_matches_from(argv).map_err(clap_exit)?;
    Cli::from_arg_matches(&matches).map_err(clap_exit)
}

fn init_threads(cli: &Cli) -> Result<Option<usize>, Failure> {
    let threads = match cli.threads {
        Some(n) => Some(n),
        None => match std::env::var("ASC_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| Failure::validation(format!("ASC_THREADS must be a positive integer, got `{v}`")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = threads {
        if n == 0 {
            return Err(Failure::validation("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::runtime)?;
    }
    Ok(threads)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let outcome = parse_cli(std::env::args().collect()).and_then(|cli| {
        let threads = init_threads(&cli)?;
        commands::run(&cli, threads)
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("{}", msg.trim_end());
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
