//! `wisteria` command-line interface.

mod commands;
mod output;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wisteria::Error;

#[derive(Parser, Debug)]
#[command(name = "wisteria", version, about = "Genomic language model: synthesis, pretraining, evaluation, ablation, benchmarking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for initialization, masking and data order.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// FASTA file or manifest of FASTA paths (overrides `corpus`).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus (`corpus.fa` and `labels.csv`).
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Masked-LM pretraining.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Perplexity at several evaluation lengths.
    EvalPpl {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated lengths (overrides `eval_lengths`).
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
    },
    /// Linear probe on pooled embeddings.
    Probe {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Checkpoint to embed with; a freshly initialized model when absent.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// `id,label` CSV (overrides `labels`).
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Train and evaluate reduced variants or GCMB-count sweeps.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        /// Comma-separated GCMB layer counts.
        #[arg(long, value_delimiter = ',')]
        nblocks: Vec<usize>,
    },
    /// Throughput and peak memory versus length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lengths (overrides `bench_lengths`).
        #[arg(long, value_delimiter = ',')]
        lengths: Vec<usize>,
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "full,no_fourier")]
        variants: Vec<String>,
    },
    /// Write pooled embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        corpus: CorpusArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Print a checkpoint's config and tensor table.
    InspectCkpt {
        path: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Config(_) | Error::Parse { .. } => 2,
        _ => 3,
    }
}

fn run(cli: Cli) -> wisteria::Result<()> {
    use commands as c;
    match cli.command {
        Command::Synth { common } => c::synth(&common),
        Command::Pretrain { common, corpus, resume, stop_after } => c::pretrain(&common, &corpus, resume, stop_after),
        Command::EvalPpl { common, corpus, ckpt, lengths } => c::eval_ppl(&common, &corpus, &ckpt, &lengths),
        Command::Probe { common, corpus, ckpt, labels } => c::probe(&common, &corpus, ckpt.as_deref(), labels),
        Command::Ablate { common, corpus, variants, nblocks } => c::ablate(&common, &corpus, &variants, &nblocks),
        Command::Bench { common, lengths, variants } => c::bench(&common, &lengths, &variants),
        Command::ExportEmbeddings { common, corpus, ckpt, labels } => c::export(&common, &corpus, &ckpt, labels),
        Command::InspectCkpt { path } => c::inspect(&path),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("wisteria: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
