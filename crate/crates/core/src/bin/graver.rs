use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use graver::adapt::{save_state, Adapter};
use graver::align::raw_input;
use graver::harness::{
    case_study, prepare, run_seed, sample_episode, support_samples, sweep, write_results, LoadedConfig, RunConfig,
    evaluate_prepared,
};
use graver::pretrain::{load_checkpoint, pretrain, save_checkpoint, Checkpoint};
use graver::seed;
use graver::theory::check_bound;
use graver::vocab::save_bank;

#[derive(Parser)]
#[command(name = "graver", version, about = "Graph vocabulary pre-training and few-shot adaptation")]
struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train on the configured sources and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract vocabularies with a checkpoint and write the graphon bank.
    BuildBank {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune on one sampled episode of the target and write the adapted state.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Which run's episode to use.
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Run the episodic evaluation and write results.csv.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
    },
    /// Matched vs mismatched motif fine-tuning curves.
    CaseStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Accuracy over a (lambda, mu) grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        lambda: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        mu: Vec<f64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Check the transferability bound on controlled node pairs.
    CheckBounds {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 100)]
        pairs: usize,
        /// Graph source; the built-in motif benchmark when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<LoadedConfig> {
    let loaded = RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?;
    for k in &loaded.unknown_keys {
        eprintln!("warning: unknown config key `{k}` ignored");
    }
    Ok(loaded)
}

fn config_json(cfg: &RunConfig) -> serde_json::Value {
    serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null)
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Pretrain { config, out } => {
            let LoadedConfig { config: cfg, base_dir, .. } = load_config(&config)?;
            let sources = cfg.load_sources(&base_dir)?;
            let pcfg = cfg.pretrain_config();
            let (model, log) = pretrain(&sources, &pcfg)?;
            save_checkpoint(&Checkpoint::new(model, pcfg.lambda, config_json(&cfg)), &out)?;
            println!(
                "pre-trained {} epochs (best {:?}), checkpoint {}",
                log.losses.len(),
                log.best_epoch,
                out.display()
            );
        }
        Command::BuildBank { config, ckpt, out } => {
            let LoadedConfig { config: mut cfg, base_dir, .. } = load_config(&config)?;
            cfg.checkpoint = Some(std::path::absolute(&ckpt)?);
            cfg.bank = None;
            let prep = prepare(&cfg, &base_dir)?;
            save_bank(&prep.bank, &out)?;
            println!("bank with {} entries written to {}", prep.bank.len(), out.display());
        }
        Command::Finetune { config, ckpt, bank, out, run } => {
            let LoadedConfig { config: mut cfg, base_dir, .. } = load_config(&config)?;
            cfg.checkpoint = Some(std::path::absolute(&ckpt)?);
            cfg.bank = Some(std::path::absolute(&bank)?);
            let prep = prepare(&cfg, &base_dir)?;
            let g = &prep.target;
            let episode = sample_episode(g, cfg.task, cfg.m, run_seed(cfg.seed, run))?;
            let support = support_samples(&cfg, g, &episode, g)?;
            let adapter = Adapter::new(
                &prep.model,
                &prep.bank,
                g.domain(),
                &raw_input(g)?,
                cfg.finetune_config(seed::derive(episode.seed, 31)),
            )?;
            let (state, log) = adapter.finetune(g.domain(), &support)?;
            save_state(&state, config_json(&cfg), &out)?;
            println!(
                "fine-tuned {} episodes (converged at {}), state {}",
                log.losses.len(),
                log.episodes_to_converge,
                out.display()
            );
        }
        Command::Eval { config, ckpt, bank, out } => {
            let LoadedConfig { config: mut cfg, base_dir, .. } = load_config(&config)?;
            if let Some(c) = ckpt {
                cfg.checkpoint = Some(std::path::absolute(c)?);
            }
            if let Some(b) = bank {
                cfg.bank = Some(std::path::absolute(b)?);
            }
            let prep = prepare(&cfg, &base_dir)?;
            let report = evaluate_prepared(&cfg, &prep)?;
            write_results(&report.rows, &out)?;
            println!(
                "accuracy {:.4} ± {:.4} over {} runs, {}",
                report.metrics.mean,
                report.metrics.std,
                report.rows.len(),
                out.display()
            );
        }
        Command::CaseStudy { config, out_dir } => {
            let LoadedConfig { config: cfg, base_dir, .. } = load_config(&config)?;
            let prep = prepare(&cfg, &base_dir)?;
            let report = case_study(&cfg, &cfg.case_study, &prep, &base_dir)?;
            let files = report.write(&out_dir)?;
            println!(
                "matched >= mismatched on {}/{} seeds; wrote {} files to {}",
                report.matched_wins(),
                report.matched.len(),
                files.len(),
                out_dir.display()
            );
        }
        Command::Sweep { config, lambda, mu, out_dir } => {
            let LoadedConfig { config: cfg, base_dir, .. } = load_config(&config)?;
            let report = sweep(&cfg, &base_dir, &lambda, &mu)?;
            report.write(&out_dir)?;
            print!("{}", report.to_csv());
        }
        Command::CheckBounds { ckpt, pairs, config, out } => {
            let (cfg, base_dir) = match config {
                Some(p) => {
                    let l = load_config(&p)?;
                    (l.config, l.base_dir)
                }
                None => {
                    let mut c = RunConfig::default();
                    c.apply_env()?;
                    (c, PathBuf::from("."))
                }
            };
            let model = load_checkpoint(&ckpt)?.model;
            let sources = cfg.load_sources(&base_dir)?;
            let Some(g) = sources.iter().find(|g| model.aligner.contains(g.domain())) else {
                bail!("no configured source domain is registered in {}", ckpt.display());
            };
            let x_hat = model.aligned_features(g)?;
            let report = check_bound(&model.encoder, g, &x_hat, pairs, seed::derive(cfg.seed, 400))?;
            if let Some(path) = out {
                report.write_csv(&path)?;
            } else {
                print!("{}", report.to_csv());
            }
            println!("{}/{} pairs within the bound", report.pass_count(), report.pairs.len());
            if report.pass_count() != report.pairs.len() {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}
