use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cloudgp::experiment::{compare_scenarios, run_experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "cloudgp", version, about = "Networked LoG-GP tracking control simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write steps.csv, summary.json and events.log.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run several scenarios sharing plant and seed and print a summary table.
    Compare {
        #[arg(required = true, num_args = 2..)]
        configs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Print the default configuration.
    DefaultConfig,
}

#[derive(Args)]
struct Common {
    /// Override the seed of every config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Accept intervals shorter than M̄/B + 2T_d.
    #[arg(long)]
    override_network_check: bool,
}

fn load(path: &Path, common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if common.override_network_check {
        cfg.network.override_check = true;
    }
    if cfg.name == ExperimentConfig::default().name {
        if let Some(stem) = path.file_stem() {
            cfg.name = stem.to_string_lossy().into_owned();
        }
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, common } => {
            let cfg = load(&config, &common)?;
            let record = run_experiment(&cfg).with_context(|| format!("running {}", cfg.name))?;
            record.write_outputs(&common.out_dir)?;
            println!("{}", serde_json::to_string_pretty(&record.summary)?);
        }
        Command::Compare { configs, common } => {
            let cfgs = configs.iter().map(|p| load(p, &common)).collect::<Result<Vec<_>>>()?;
            let cmp = compare_scenarios(&cfgs)?;
            for rec in &cmp.records {
                rec.write_outputs(&common.out_dir.join(&rec.summary.name))?;
            }
            print!("{}", cmp.table());
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(())
}
