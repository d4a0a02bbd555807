mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Artifact version plus the on-disk format versions it reads and writes.
pub const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format 1, dataset format jsonl, sequence cache format varint, git ",
    env!("DGAE_GIT_DESCRIBE"),
    ")"
);

#[derive(Parser, Debug)]
#[command(name = "dgae", version = VERSION, about = "Discrete graph auto-encoder: data, training, sampling and evaluation")]
pub struct Cli {
    /// Model config (TOML). A `.json` file may hold a full model config or
    /// only the feature settings.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the resolved config and exit without doing any work.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Worker threads for featurization, evaluation and ablations.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Synthetic datasets.
    Dataset {
        #[command(subcommand)]
        cmd: DatasetCmd,
    },
    /// Feature-augmentation diagnostics.
    Featurize(FeaturizeArgs),
    /// Stage 1: train the quantized auto-encoder.
    TrainAe(TrainAeArgs),
    /// Stage 2: train the prior on a stage-1 checkpoint.
    TrainPrior(TrainPriorArgs),
    /// Sample graphs from a stage-2 checkpoint.
    Generate(GenerateArgs),
    /// MMD of generated graphs against reference graphs.
    Eval(EvalArgs),
    /// Ablation studies.
    Ablate {
        #[command(subcommand)]
        cmd: AblateCmd,
    },
    /// Timing benchmarks.
    Bench {
        #[command(subcommand)]
        cmd: BenchCmd,
    },
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    Gen(DatasetGenArgs),
}

#[derive(Args, Debug)]
pub struct DatasetGenArgs {
    #[arg(long, default_value = "community-small")]
    pub spec: String,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Candidate graph sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub p_intra: Option<f64>,
    #[arg(long)]
    pub p_inter: Option<f64>,
}

#[derive(Args, Debug)]
pub struct FeaturizeArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// `widths` (columns per feature family) or `summary` (per-column statistics).
    #[arg(long, default_value = "widths")]
    pub report: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainAeArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out graphs; by default a seeded split of `--data`.
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainPriorArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Training graphs, normally `train.jsonl` from `train-ae`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub heldout: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Sequence cache from `train-ae`; must equal a fresh encoding.
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_max: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub gen: PathBuf,
    /// Report path; the CSV goes to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training graphs: adds a row for the training-set floor.
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    pub floor_draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Subcommand, Debug)]
pub enum AblateCmd {
    Features(AblateFeaturesArgs),
    Codebook(AblateCodebookArgs),
}

#[derive(Args, Debug)]
pub struct AblateFeaturesArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
}

#[derive(Args, Debug)]
pub struct AblateCodebookArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Cells as `m x C`, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16x2,4x4,256x1,32x2,1024x1")]
    pub grid: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 100)]
    pub gen_count: usize,
}

#[derive(Subcommand, Debug)]
pub enum BenchCmd {
    Gen(BenchGenArgs),
}

#[derive(Args, Debug)]
pub struct BenchGenArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "100,500,1000")]
    pub counts: Vec<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_max: Option<usize>,
    /// `n_max` values for the per-step cost sweep.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pub sweep: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 200)]
    pub sweep_count: usize,
    /// Length of the forced full-length per-position profile.
    #[arg(long, default_value_t = 64)]
    pub profile_len: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", error_line("usage", &first));
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            ExitCode::FAILURE
        }
    }
}
