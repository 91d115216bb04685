//! Experiment pipeline for unsupervised correlation analysis: dataset
//! preparation, adversarial run ensembles, consensus selection, supervised
//! baselines and metric tables.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure, 5 degenerate selection.

use clap::{Parser, Subcommand};
use uca_cli::commands;
use uca_cli::config::{self, DatasetBuilder, Overrides};
use std::path::PathBuf;
use uca_core::trainer::Variant;
use uca_core::UcaError;

#[derive(Parser)]
#[command(name = "uca", version, about = "Unsupervised correlation analysis experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON experiment configuration; flags below override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed for the whole experiment.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for ensemble training (0 = all CPUs).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Training variant: all-uca, cyc-uca, latent-uca, sup-uca, direct-gan.
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,

    /// Number of runs in the ensemble.
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Shared-space dimensionality.
    #[arg(long = "latent-dim", global = true)]
    latent_dim: Option<usize>,

    /// 1-based principal component used by consensus selection.
    #[arg(long, global = true)]
    component: Option<usize>,

    /// Allow `full` to overwrite an existing experiment directory.
    #[arg(long, global = true)]
    force: bool,

    /// Dataset builder: mnist-flipped, mnist-halves, feature-tables.
    #[arg(long, global = true, value_parser = parse_dataset)]
    dataset: Option<DatasetBuilder>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the two training views and the evaluation alignment files.
    Prepare,
    /// Train the k-run ensemble and write per-run artifacts.
    Train,
    /// Consensus-select the best run among the trained artifacts.
    Select,
    /// Compute correlation/AUC reports and the summary table.
    Eval,
    /// Fit the enabled supervised/adversarial baselines.
    Baseline,
    /// prepare -> train -> select -> baseline -> eval.
    Full,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    match s {
        "all-uca" => Ok(Variant::AllUca),
        "cyc-uca" => Ok(Variant::CycUca),
        "latent-uca" => Ok(Variant::LatentUca),
        "sup-uca" => Ok(Variant::SupUca),
        "direct-gan" => Ok(Variant::DirectGan),
        other => Err(format!(
            "unknown variant '{other}' (expected all-uca, cyc-uca, latent-uca, sup-uca or direct-gan)"
        )),
    }
}

fn parse_dataset(s: &str) -> Result<DatasetBuilder, String> {
    s.parse()
}

fn exit_code(err: &UcaError) -> i32 {
    match err {
        UcaError::Data(_) | UcaError::Io { .. } => 3,
        UcaError::Numeric(_) => 4,
        UcaError::Selection(_) => 5,
        UcaError::Precondition(_) | UcaError::Dim { .. } => 2,
    }
}

fn main() {
    let cli = Cli::parse();
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
        workers: cli.workers,
        variant: cli.variant,
        k: cli.k,
        latent_dim: cli.latent_dim,
        component: cli.component,
        dataset: cli.dataset.clone(),
    };
    let config = match config::resolve(cli.config.as_deref(), &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("configuration error: {e}");
            std::process::exit(2);
        }
    };

    let result = match cli.command {
        Command::Prepare => commands::cmd_prepare(&config),
        Command::Train => commands::cmd_train(&config),
        Command::Select => commands::cmd_select(&config),
        Command::Eval => commands::cmd_eval(&config),
        Command::Baseline => commands::cmd_baseline(&config),
        Command::Full => commands::cmd_full(&config, cli.force),
    };

    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}
