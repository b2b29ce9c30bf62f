//! Command-line workflow: gen, build-bank, train, score, eval, ablate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fod::bank::BankKind;
use fod::config::RunConfig;
use fod::error::{Error, Result};
use fod::model::Level;
use fod::pipeline::{
    cmd_gen, eval_line, evaluate, load_banks, load_dataset, load_models, run_ablate, save_banks,
    save_models, train_from_dataset, write_ablate_csv, write_eval_report, write_history_csv,
    write_score_maps, TrainedModels,
};
use fod::scoring::Criterion;
use fod::training::OptMode;

#[derive(Parser)]
#[command(
    name = "fod",
    version,
    about = "Anomaly detection by intra-/inter-correlation learning on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (train/ and test/ under --out)
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build reference banks from a dataset's training images
    BuildBank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bank: Option<String>,
    },
    /// Train the per-level models; writes model.fodt, bank.fodt and loss CSVs
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        bank: Option<String>,
        /// Reuse previously built banks instead of rebuilding
        #[arg(long)]
        bank_file: Option<PathBuf>,
        #[arg(long)]
        entropy: Option<String>,
        #[arg(long)]
        opt: Option<String>,
    },
    /// Score a test set with a trained run; writes scores.csv and maps.fodt
    Score {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Directory produced by `train`
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        criterion: Option<String>,
    },
    /// Evaluate a trained run; prints `image_auroc=.. pixel_auroc=..` last
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        criterion: Option<String>,
        /// Optional directory for the CSV report
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation grid and write one CSV row per cell
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_run(cfg: &RunConfig, run: &Path) -> Result<TrainedModels> {
    let banks = load_banks(&run.join("bank.fodt"))?;
    load_models(cfg, &run.join("model.fodt"), banks)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            cmd_gen(&cfg, &out)?;
            println!("dataset written to {}", out.display());
        }
        Command::BuildBank {
            config,
            data,
            out,
            seed,
            bank,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(b) = bank {
                cfg.bank = BankKind::parse(&b)?;
            }
            let ds = load_dataset(&data)?;
            let features = fod::pipeline::extract_set(&ds.train, cfg.seed, cfg.feature_dim)?;
            let banks = fod::pipeline::build_banks(&cfg, cfg.bank, &features)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("bank.fodt");
            save_banks(&banks, &path)?;
            println!("bank written to {}", path.display());
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            bank,
            bank_file,
            entropy,
            opt,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(b) = bank {
                cfg.bank = BankKind::parse(&b)?;
            }
            if let Some(e) = entropy {
                cfg.entropy = match e.as_str() {
                    "on" => true,
                    "off" => false,
                    other => {
                        return Err(Error::Usage(format!(
                            "--entropy expects on/off, got {other}"
                        )))
                    }
                };
            }
            if let Some(o) = opt {
                cfg.opt = OptMode::parse(&o)?;
            }
            let ds = load_dataset(&data)?;
            std::fs::create_dir_all(&out)?;
            let settings = cfg.train_settings();
            let models = match bank_file {
                Some(path) => {
                    let features =
                        fod::pipeline::extract_set(&ds.train, cfg.seed, cfg.feature_dim)?;
                    let banks = load_banks(&path)?;
                    fod::pipeline::train_models(&cfg, &features, banks, &settings)?
                }
                None => train_from_dataset(&cfg, &ds, &settings, cfg.bank)?,
            };
            save_models(&models, &cfg, &out.join("model.fodt"))?;
            let banks: Vec<(Level, fod::bank::BankSource)> = models
                .levels
                .iter()
                .map(|rt| (rt.level, rt.bank.clone()))
                .collect();
            save_banks(&banks, &out.join("bank.fodt"))?;
            for (level, history) in &models.histories {
                write_history_csv(&out.join(format!("loss_{}.csv", level.label())), history)?;
            }
            println!("run written to {}", out.display());
        }
        Command::Score {
            config,
            data,
            run,
            out,
            seed,
            criterion,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(c) = criterion {
                cfg.criterion = Criterion::parse(&c)?;
            }
            let ds = load_dataset(&data)?;
            let models = load_run(&cfg, &run)?;
            let outcome = evaluate(&cfg, &models, &ds.test, cfg.criterion)?;
            std::fs::create_dir_all(&out)?;
            write_eval_report(&out.join("scores.csv"), &outcome)?;
            write_score_maps(&out.join("maps.fodt"), &outcome)?;
            println!("scores written to {}", out.display());
        }
        Command::Eval {
            config,
            data,
            run,
            seed,
            criterion,
            out,
        } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(c) = criterion {
                cfg.criterion = Criterion::parse(&c)?;
            }
            let ds = load_dataset(&data)?;
            let models = load_run(&cfg, &run)?;
            let outcome = evaluate(&cfg, &models, &ds.test, cfg.criterion)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_eval_report(&dir.join("report.csv"), &outcome)?;
            }
            println!("{}", eval_line(&outcome));
        }
        Command::Ablate {
            config,
            data,
            out,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let ds = load_dataset(&data)?;
            let rows = run_ablate(&cfg, &ds)?;
            write_ablate_csv(&out, &rows)?;
            println!(
                "ablation grid ({} rows) written to {}",
                rows.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
