//! `nasgen`: command-line driver for corpus building, model training,
//! guided search, ablations and reporting.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (unreadable or invalid inputs), 3 internal error.

/// Writes to stdout, ignoring a closed pipe.
macro_rules! out {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = write!(std::io::stdout().lock(), $($t)*);
    }};
}

macro_rules! outln {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout().lock(), $($t)*);
    }};
}

mod commands;
mod rerun;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "nasgen", version, about = "Model-guided evolutionary architecture search")]
pub struct Cli {
    /// TOML configuration file; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 selects the sequential code path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an architecture corpus (JSON lines).
    BuildCorpus(BuildCorpusArgs),
    /// Train the sequence model from scratch on a corpus.
    Pretrain(PretrainArgs),
    /// Continue training a sequence model checkpoint on another corpus.
    Finetune(FinetuneArgs),
    /// Train the layer-to-block selector.
    TrainFcn(TrainFcnArgs),
    /// Eliminate and refill blocks of one architecture.
    Reconstruct(ReconstructArgs),
    /// Run the genetic search.
    Search(SearchArgs),
    /// Evaluate one architecture.
    Eval(EvalArgs),
    /// Correlate fitness between evaluation modes over a corpus.
    Correlate(CorrelateArgs),
    /// Fitness of reconstructed architectures per elimination rate.
    AblateRates(AblateRatesArgs),
    /// Cheap-versus-full evaluation correlation over seeded architectures.
    AblateEpochs(AblateEpochsArgs),
    /// Summarize a search run directory and write plot data.
    Report(ReportArgs),
    /// Replay a command from its manifest and compare output hashes.
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// nasbench, finetune or teacher.
    #[arg(long)]
    pub source: nas_core::corpus::Source,
    /// Benchmark file (nasbench source only).
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Extra corpora whose layers join the vocabulary without being trained on.
    #[arg(long = "vocab-corpus")]
    pub vocab_corpus: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub freeze_embeddings: bool,
}

#[derive(Debug, Args)]
pub struct TrainFcnArgs {
    /// Training corpora; repeat for several.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    /// Sequence model checkpoint supplying the vocabulary.
    #[arg(long)]
    pub gpt: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    /// Architecture JSON.
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long)]
    pub gpt: PathBuf,
    #[arg(long)]
    pub fcn: PathBuf,
    #[arg(long)]
    pub rate: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, required_unless_present = "unguided")]
    pub gpt: Option<PathBuf>,
    #[arg(long, required_unless_present = "unguided")]
    pub fcn: Option<PathBuf>,
    /// Plain genetic search without reconstruction.
    #[arg(long)]
    pub unguided: bool,
    /// surrogate, tabular or external; overrides the configuration.
    #[arg(long)]
    pub evaluator: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub arch: PathBuf,
    #[arg(long)]
    pub evaluator: Option<String>,
    /// Surrogate mode: cheap or full.
    #[arg(long)]
    pub mode: Option<String>,
    /// Write the fitness record here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorrelateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Comma-separated surrogate modes; every pair is correlated.
    #[arg(long, default_value = "cheap,full", value_delimiter = ',')]
    pub modes: Vec<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateRatesArgs {
    #[arg(long)]
    pub gpt: PathBuf,
    #[arg(long)]
    pub fcn: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub count: usize,
    #[arg(long, value_delimiter = ',', default_values_t = nas_core::reporting::ABLATION_RATES)]
    pub rates: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateEpochsArgs {
    #[arg(long, default_value_t = 60)]
    pub count: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the replayed outputs (default: `rerun` next to the manifest).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Errors caused by how the tool was invoked rather than by its inputs.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Outputs of a replayed command differ from the recorded ones.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct Mismatch(pub String);

fn exit_code(err: &anyhow::Error) -> u8 {
    use nas_core::Error as E;
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<Mismatch>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) => 1,
                E::Arch(_)
                | E::Parse { .. }
                | E::Graph { .. }
                | E::Vocab { .. }
                | E::Label(_)
                | E::Checkpoint(_)
                | E::Report(_)
                | E::Io { .. }
                | E::Json(_)
                | E::Protocol(_) => 2,
                E::TrainingDiverged { .. } | E::Eval(_) => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return 2;
        }
    }
    3
}

/// The error chain joined with ": ", skipping causes already spelled out by
/// their parent's message.
fn describe(err: &anyhow::Error) -> String {
    let mut s = String::new();
    for cause in err.chain() {
        let m = cause.to_string();
        if !s.ends_with(&m) {
            if !s.is_empty() {
                s.push_str(": ");
            }
            s.push_str(&m);
        }
    }
    s
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.log_level)
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run::execute(cli, args, std::env::vars().collect(), None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
