//! `lift`: corpus generation, adaptation, fine-tuning, evaluation and
//! benchmarking from one TOML configuration.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O or malformed input
//! file, 4 numeric failure (non-finite values, out of memory), 1 anything
//! else.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use lift_core::evalbench::EvalMode;

use crate::commands::Run;
use crate::config::{ConfigError, RunConfig};

#[derive(Parser)]
#[command(name = "lift", version, about = "Long-input fine-tuning on byte-level toy transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a document corpus (test or fine-tuning) as JSON lines.
    Corpus(Flags),
    /// Adapt a model to one document and save the checkpoint.
    Lift(Flags),
    /// Fine-tune a model on a corpus and save the checkpoint.
    Sft(Flags),
    /// Evaluate one mode on one document.
    Eval(Flags),
    /// Time adaptation against full-context forward passes.
    Bench(Flags),
    /// Summarise evaluation report lines into CSV.
    Report(Flags),
    /// Run every configured mode end to end into one directory.
    Pipeline(Flags),
}

#[derive(Args, Clone, Default)]
struct Flags {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Rerun from a manifest written by an earlier run.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Override a config field, e.g. `--set lift.epochs=4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<EvalMode>,
    #[arg(long)]
    doc_index: Option<usize>,
    /// Ask only about middle-third facts.
    #[arg(long)]
    middle_only: bool,
    /// Pretrain a freshly initialised model first.
    #[arg(long)]
    pretrain: bool,
    #[arg(long)]
    doc: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    ckpt_in: Option<PathBuf>,
    #[arg(long)]
    sft_ckpt: Option<PathBuf>,
    #[arg(long)]
    ckpt_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    manifest_out: Option<PathBuf>,
}

impl Flags {
    fn apply(&self, c: &mut RunConfig) {
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(m) = self.mode {
            c.job.mode = m;
        }
        if let Some(i) = self.doc_index {
            c.job.doc_index = i;
        }
        c.job.middle_only |= self.middle_only;
        c.job.pretrain |= self.pretrain;
        let io = &mut c.io;
        let paths = [
            (&mut io.doc, &self.doc),
            (&mut io.input, &self.input),
            (&mut io.corpus, &self.corpus),
            (&mut io.ckpt_in, &self.ckpt_in),
            (&mut io.sft_ckpt, &self.sft_ckpt),
            (&mut io.ckpt_out, &self.ckpt_out),
            (&mut io.out, &self.out),
            (&mut io.out_dir, &self.out_dir),
            (&mut io.manifest_out, &self.manifest_out),
        ];
        for (slot, flag) in paths {
            if flag.is_some() {
                slot.clone_from(flag);
            }
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    let (name, flags) = match &cli.command {
        Command::Corpus(f) => ("corpus", f),
        Command::Lift(f) => ("lift", f),
        Command::Sft(f) => ("sft", f),
        Command::Eval(f) => ("eval", f),
        Command::Bench(f) => ("bench", f),
        Command::Report(f) => ("report", f),
        Command::Pipeline(f) => ("pipeline", f),
    };
    // Pipeline manifests record the pipeline's own configuration.
    let pipeline_rerun = name == "pipeline" && flags.manifest.is_some();
    let mut config = if pipeline_rerun {
        RunConfig::default()
    } else {
        config::load(flags.config.as_deref(), flags.manifest.as_deref(), &flags.sets)?.0
    };
    flags.apply(&mut config);
    let r = Run::new(name, config)?;
    match cli.command {
        Command::Corpus(_) => commands::corpus(r),
        Command::Lift(_) => commands::lift(r),
        Command::Sft(_) => commands::sft(r),
        Command::Eval(_) => commands::eval(r),
        Command::Bench(_) => commands::bench(r),
        Command::Report(_) => commands::report(r),
        Command::Pipeline(f) => commands::run_pipeline(r, f.manifest.as_deref().filter(|_| pipeline_rerun)),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use lift_core::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::InvalidInput(_) => 2,
                E::Io { .. } | E::Format(_) => 3,
                E::NonFinite(_) | E::OutOfMemory(_) => 4,
                E::Shape(_) => 1,
            };
        }
        if cause.is::<ConfigError>() || cause.is::<toml::de::Error>() {
            return 2;
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(manifest) => {
            eprintln!("manifest: {}", manifest.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
