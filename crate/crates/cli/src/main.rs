use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use advrank::harness::commands;
use advrank::harness::config::load_document;
use advrank::harness::RunConfig;
use advrank::text::SynthSpec;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advrank", version, about = "Adversarial training and robustness evaluation for toy bi-encoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed (`seed` for gen-corpus, `training.seed` otherwise).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (for compare: optional file for the table).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Field override on a dotted path, e.g. `training.epochs=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic topic corpus; the config is a corpus spec.
    GenCorpus(Common),
    /// Train from scratch, or resume a checkpoint with AT.
    Train(Common),
    /// Margin-MSE training against teacher margins.
    Distill(Common),
    /// Adapt a checkpoint to a new corpus.
    Finetune(Common),
    /// Write varied copies of the evaluation queries.
    PerturbQueries(Common),
    /// Rank the collection and score the run.
    Evaluate(Common),
    /// Significance table over evaluation reports; the first is the baseline.
    Compare {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        /// Tab-separated instead of markdown.
        #[arg(long)]
        tsv: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

impl Common {
    fn out(&self) -> Result<&PathBuf> {
        self.out.as_ref().context("--out is required")
    }

    fn overrides(&self, seed_key: &str) -> Vec<String> {
        let mut all = self.overrides.clone();
        if let Some(seed) = self.seed {
            all.push(format!("{seed_key}={seed}"));
        }
        all
    }

    fn run_config(&self) -> Result<RunConfig> {
        Ok(RunConfig::load(self.config.as_deref(), &self.overrides("training.seed"))?)
    }
}

fn report_run(run: Option<&advrank::harness::TrainRun>, out: &PathBuf) {
    match run {
        Some(run) => println!(
            "{} epochs, {} steps, best dev mrr@10 {:?}; checkpoints in {}",
            run.epochs.len(),
            run.steps,
            run.best.meta.dev_mrr,
            out.display()
        ),
        None => println!("0 epochs; input checkpoint copied to {}", out.display()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus(c) => {
            let spec: SynthSpec = load_document(c.config.as_deref(), &c.overrides("seed"))?;
            let out = c.out()?;
            commands::gen_corpus(&spec, out)?;
            println!("corpus written to {}", out.display());
        }
        Command::Train(c) => {
            let run = commands::train(&c.run_config()?, c.out()?)?;
            report_run(Some(&run), c.out()?);
        }
        Command::Distill(c) => {
            let run = commands::distill(&c.run_config()?, c.out()?)?;
            report_run(Some(&run), c.out()?);
        }
        Command::Finetune(c) => {
            let run = commands::finetune(&c.run_config()?, c.out()?)?;
            report_run(run.as_ref(), c.out()?);
        }
        Command::PerturbQueries(c) => {
            for (path, n) in commands::perturb_queries(&c.run_config()?, c.out()?)? {
                println!("{n} queries -> {}", path.display());
            }
        }
        Command::Evaluate(c) => {
            let report = commands::evaluate(&c.run_config()?, c.out()?)?;
            for (metric, values) in &report.metrics {
                println!("{metric}\t{:.4}\t(n = {})", values.mean, values.n);
            }
        }
        Command::Compare { reports, tsv, out } => {
            let table = commands::compare(&reports, tsv)?;
            print!("{table}");
            if let Some(path) = out {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

