use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

mod commands;
mod config;
mod error;

use error::Failure;

#[derive(Parser)]
#[command(name = "scenario", version, about = "Build scenarios around a query sentence from a pool of mixed sentences")]
struct Cli {
    /// Worker threads for parallel stages (defaults to all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a mixture dataset from a corpus.
    Synth {
        /// TOML or JSON options file, or a run manifest to replay.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: SynthOpts,
    },
    /// Train a model on a generated dataset.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: TrainOpts,
    },
    /// Score a method on a split and write a report.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: EvalOpts,
    },
    /// Build a scenario for one query from raw sentences.
    Construct {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        opts: ConstructOpts,
    },
    /// Print a mixture with its gold sentences marked.
    Inspect(InspectOpts),
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthOpts {
    /// Input corpus.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Corpus format: jsonl or paragraphs.
    #[arg(long)]
    pub format: Option<String>,
    /// Generate a synthetic corpus instead of reading one.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub synthetic: Option<bool>,
    #[arg(long)]
    pub synthetic_scenarios: Option<usize>,
    #[arg(long)]
    pub synthetic_seed: Option<u64>,
    /// Give every synthetic scenario its own vocabulary.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub disjoint: Option<bool>,
    /// w18, rand, hybrid-2, hybrid-3 or hybrid-4.
    #[arg(long)]
    pub condition: Option<String>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub dev: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub dev_frac: Option<f64>,
    #[arg(long)]
    pub test_frac: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mixture size for padded conditions.
    #[arg(long)]
    pub pad_to: Option<usize>,
    #[arg(long)]
    pub vocab_cap: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOpts {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// comp, comp-ins, comp-ins-rn or pairwise.
    #[arg(long)]
    pub head: Option<String>,
    /// fixed or dynamic.
    #[arg(long)]
    pub termination: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, alias = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sentence vector width.
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub relation_width: Option<usize>,
    #[arg(long)]
    pub pairwise_hidden: Option<usize>,
    #[arg(long)]
    pub rn_normalize: Option<bool>,
    #[arg(long)]
    pub pairwise_symmetric: Option<bool>,
    /// Redraw teacher-forced states every epoch.
    #[arg(long)]
    pub resample: Option<bool>,
    /// Stub embedding width.
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub provider_seed: Option<u64>,
    /// Pretrained vector table used instead of stub embeddings.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Vocabulary file; other tokens share the unknown-word vector.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Omit wall-clock times so reruns give identical files.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub deterministic: Option<bool>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOpts {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    /// Mixture file, instead of a dataset split.
    #[arg(long)]
    pub mixtures: Option<PathBuf>,
    /// unif, avg, oracle, pairwise, comp, comp-ins or comp-ins-rn.
    #[arg(long)]
    pub head: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// fixed or dynamic.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub label: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub provider_seed: Option<u64>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstructOpts {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON file with `query` and `sentences`; stdin when absent.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Sentences to select in fixed mode.
    #[arg(long)]
    pub budget: Option<usize>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args, Clone, Debug)]
pub struct InspectOpts {
    #[arg(long, conflicts_with = "data")]
    pub mixtures: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Mixture id to show.
    #[arg(long, conflicts_with = "index")]
    pub id: Option<String>,
    /// Position of the mixture in the file.
    #[arg(long)]
    pub index: Option<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(Failure::config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| Failure::config(e.to_string()))?;
    }
    match cli.command {
        Command::Synth { config, opts } => commands::synth(config::resolve(&opts, config.as_deref(), "synth")?),
        Command::Train { config, opts } => commands::train(config::resolve(&opts, config.as_deref(), "train")?),
        Command::Eval { config, opts } => commands::eval(config::resolve(&opts, config.as_deref(), "eval")?),
        Command::Construct { config, opts } => {
            commands::construct(config::resolve(&opts, config.as_deref(), "construct")?)
        }
        Command::Inspect(opts) => commands::inspect(opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let f = Failure::config(e.render().to_string().trim().to_string());
            eprintln!("{}", f.to_json());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.to_json());
            ExitCode::from(f.exit_code as u8)
        }
    }
}
