//! `umcnp` command-line driver.
//!
//! ```text
//! umcnp meta-train   [--env point|cartpole] [--preset P] [--config F] [--seed N] [--threads N] [--out DIR]
//! umcnp cnp-train    [same flags] [--variant plain|adv|both]
//! umcnp meta-test    [same flags]
//! umcnp export-plots [--out DIR]
//! umcnp run          [same flags]
//! ```

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use umcnp::cnp::CnpVariant;
use umcnp::envs::EnvKind;
use umcnp::harness::aggregate::summary_table;
use umcnp::harness::config::{ExperimentConfig, Preset};
use umcnp::harness::{self, export};

#[derive(Parser)]
#[command(name = "umcnp", version, about = "Meta-training, dynamics-model training and reward-free meta-testing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train; writes meta checkpoints, metrics and offline datasets.
    MetaTrain(Common),
    /// Train dynamics models on the offline datasets.
    CnpTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = VariantArg::Both)]
        variant: VariantArg,
    },
    /// Adapt and evaluate every configured arm on the test tasks.
    MetaTest(Common),
    /// Write figure CSVs from meta-test records.
    ExportPlots {
        /// Run directory.
        #[arg(long, default_value = "runs/point-desk")]
        out: PathBuf,
    },
    /// All phases in order.
    Run(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum, default_value_t = EnvArg::Point)]
    env: EnvArg,
    #[arg(long, default_value = "desk")]
    preset: Preset,
    /// TOML file merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvArg {
    Point,
    Cartpole,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Plain,
    Adv,
    Both,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let env = match self.env {
            EnvArg::Point => EnvKind::Point,
            EnvArg::Cartpole => EnvKind::Cartpole,
        };
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p, env, self.preset).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::preset(env, self.preset),
        };
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::MetaTrain(c) => {
            let cfg = c.resolve()?;
            for s in harness::run_meta_train(&cfg)? {
                println!(
                    "seed {}: {} iterations, final post-update return {:.3}, dataset {} transitions",
                    s.seed, s.iterations, s.final_post_return, s.dataset_transitions
                );
            }
        }
        Command::CnpTrain { common, variant } => {
            let cfg = common.resolve()?;
            let variants = match variant {
                VariantArg::Plain => vec![CnpVariant::Plain],
                VariantArg::Adv => vec![CnpVariant::Adv],
                VariantArg::Both => vec![CnpVariant::Plain, CnpVariant::Adv],
            };
            for s in harness::run_cnp_train(&cfg, &variants)? {
                println!(
                    "seed {} {}: smoothed loss {:.4} -> {:.4}",
                    s.seed,
                    harness::variant_name(s.variant),
                    s.initial_smoothed,
                    s.final_smoothed
                );
            }
        }
        Command::MetaTest(c) => {
            let cfg = c.resolve()?;
            let (records, summary) = harness::run_meta_test(&cfg)?;
            println!("{} records\n{}", records.len(), summary_table(&summary));
        }
        Command::ExportPlots { out } => {
            for p in export::export_plots(&out)? {
                println!("{}", p.display());
            }
        }
        Command::Run(c) => {
            let cfg = c.resolve()?;
            let summary = harness::run_all(&cfg)?;
            println!("{}", summary_table(&summary));
        }
    }
    Ok(())
}
