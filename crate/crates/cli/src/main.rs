use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use esrf::experiment::{run_experiment, ExperimentConfig, FoldSelection, ModelChoice, Sweep};
use esrf::synthetic::{planted, write_dataset, PlantedConfig};

#[derive(Parser)]
#[command(name = "esrf", version, about = "Adversarial motif-based social recommendation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NoMotif,
    NoDenoise,
    NoAttention,
    NoAdversarial,
}

impl Ablation {
    fn name(self) -> &'static str {
        match self {
            Ablation::NoMotif => "no-motif",
            Ablation::NoDenoise => "no-denoise",
            Ablation::NoAttention => "no-attention",
            Ablation::NoAdversarial => "no-adversarial",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Model {
    Esrf,
    Bpr,
    Lightgcn,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate as described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, conflicts_with = "all_folds")]
        fold: Option<usize>,
        #[arg(long)]
        all_folds: bool,
        #[arg(long)]
        cold_start: bool,
        /// May be repeated.
        #[arg(long, value_enum)]
        ablation: Vec<Ablation>,
        #[arg(long, value_enum)]
        model: Option<Model>,
        /// `key=v1,v2,...` or `key=a..b[:step]`.
        #[arg(long)]
        sweep: Option<String>,
        #[arg(long)]
        export_diagnostics: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        deterministic: bool,
        /// Any config key, `key=value`; may be repeated.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Overrides `output_dir`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a planted-community toy dataset (`ratings.tsv`, `trust.tsv`).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 60)]
        users: usize,
        #[arg(long, default_value_t = 80)]
        items: usize,
        #[arg(long, default_value_t = 4)]
        communities: usize,
        #[arg(long, default_value_t = 10)]
        items_per_user: usize,
        #[arg(long, default_value_t = 4)]
        friends_per_user: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run {
            config,
            fold,
            all_folds,
            cold_start,
            ablation,
            model,
            sweep,
            export_diagnostics,
            seed,
            deterministic,
            overrides,
            output,
        } => {
            let mut c = ExperimentConfig::load(&config)?;
            for o in &overrides {
                let (k, v) = o
                    .split_once('=')
                    .with_context(|| format!("--set {o:?} is not key=value"))?;
                c.set(k.trim(), v.trim())?;
            }
            if let Some(f) = fold {
                c.fold = FoldSelection::One(f);
            }
            if all_folds {
                c.fold = FoldSelection::All;
            }
            c.cold_start |= cold_start;
            for a in ablation {
                c.add_ablation(a.name())?;
            }
            if let Some(m) = model {
                c.model = match m {
                    Model::Esrf => ModelChoice::Esrf,
                    Model::Bpr => ModelChoice::Bpr,
                    Model::Lightgcn => ModelChoice::LightGcn,
                    Model::Random => ModelChoice::Random,
                };
            }
            if let Some(s) = sweep {
                c.sweep = Some(Sweep::parse(&s)?);
            }
            c.export_diagnostics |= export_diagnostics;
            if let Some(s) = seed {
                c.training.seed = s;
            }
            c.deterministic |= deterministic;
            if let Some(o) = output {
                c.output_dir = o;
            }
            let outcome = run_experiment(&c)?;
            for r in &outcome.results {
                println!(
                    "{}\t{}\tfold {}\tPrec@10 {:.3}%\tRecall@10 {:.3}%\tNDCG@10 {:.5}",
                    r.model,
                    r.metrics.mode,
                    r.fold,
                    100.0 * r.metrics.precision_at_n,
                    100.0 * r.metrics.recall_at_n,
                    r.metrics.ndcg_at_n
                );
            }
            for o in &outcome.overlaps {
                println!("alternative/explicit overlap {o:.2}%");
            }
            println!("artifacts in {}", outcome.output_dir.display());
        }
        Command::Generate {
            out,
            users,
            items,
            communities,
            items_per_user,
            friends_per_user,
            noise,
            seed,
        } => {
            let data = planted(&PlantedConfig {
                users,
                items,
                communities,
                items_per_user,
                friends_per_user,
                noise,
                seed,
                ..PlantedConfig::default()
            })?;
            write_dataset(&data, &out)?;
            println!(
                "{} interactions and {} relations written to {}",
                data.feedback.len(),
                data.social.s.nnz(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
