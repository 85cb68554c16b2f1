use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use unitok::data::{gen_synthetic, load_binary, load_jsonl, save_jsonl};
use unitok::metrics::{evaluate, theorem_report_with_progress};
use unitok::train::{train_baseline_with_progress, train_with_progress, EpochStats};
use unitok::{Dataset, ModelState, SyntheticConfig, TrainConfig};

/// Unified multi-domain item tokenizer.
#[derive(Parser)]
#[command(name = "unitok", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-domain embedding dataset as JSONL.
    GenData {
        #[arg(long, default_value_t = 4)]
        domains: usize,
        /// Items per domain.
        #[arg(long, default_value_t = 500)]
        items: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 4.0)]
        separation: f64,
        #[arg(long, default_value_t = 0.3)]
        intra_std: f64,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Draw fresh items from the same domain distributions (defaults to --seed).
        #[arg(long)]
        item_seed: Option<u64>,
        /// Added to every domain label, e.g. to mark cloned domains as unseen.
        #[arg(long, default_value_t = 0)]
        label_offset: i64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a tokenizer and write the model and training report.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// JSON config; omitted keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Train the single-codebook comparison model instead.
        #[arg(long)]
        baseline: bool,
    },
    /// Write one token per item as JSONL.
    Tokenize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained model on a dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Train UniTok and the single-codebook baseline and compare them.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
}

fn load_data(path: &Path) -> Result<Dataset> {
    let ds = if path.extension().is_some_and(|e| e == "bin") {
        load_binary(path)?
    } else {
        load_jsonl(path)?
    };
    Ok(ds)
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("invalid config {}", p.display()))
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn print_epoch(e: &EpochStats) {
    println!(
        "epoch {:>4}  total {:.6}  rec {:.6}  rq {:.6}  mi {:.6}  var_hsic {:.3e}  resets {}",
        e.epoch + 1,
        e.total,
        e.rec,
        e.rq,
        e.mi,
        e.mi_variance,
        e.dead_code_resets
    );
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            domains,
            items,
            dim,
            separation,
            intra_std,
            clusters,
            seed,
            item_seed,
            label_offset,
            out,
        } => {
            let cfg = SyntheticConfig {
                domains,
                items_per_domain: items,
                dim,
                separation,
                intra_std,
                clusters,
                seed,
            };
            let ds = match item_seed {
                None => gen_synthetic(&cfg)?,
                Some(s) => {
                    let mut rows = Vec::with_capacity(domains * items);
                    for k in 0..domains {
                        for (i, x) in unitok::data::gen_domain(&cfg, k, s)?.into_iter().enumerate() {
                            rows.push((k as i64, format!("d{k}-{i:05}"), x));
                        }
                    }
                    Dataset::from_labeled(rows)?
                }
            };
            let ds = if label_offset != 0 {
                let rows = ds
                    .records()
                    .iter()
                    .map(|r| (ds.domain_labels()[r.domain] + label_offset, r.item_id.clone(), r.embedding.clone()))
                    .collect();
                Dataset::from_labeled(rows)?
            } else {
                ds
            };
            save_jsonl(&ds, &out)?;
            println!("wrote {} items in {} domains to {}", ds.len(), ds.num_domains(), out.display());
        }
        Command::Train {
            data,
            config,
            out,
            report,
            baseline,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            println!("training on {} items, {} domains, dim {}", ds.len(), ds.num_domains(), ds.dim());
            let (model, rep) = if baseline {
                train_baseline_with_progress(&ds, &cfg, print_epoch)?
            } else {
                train_with_progress(&ds, &cfg, print_epoch)?
            };
            model.save(&out)?;
            if let Some(path) = report {
                write(&path, &rep.to_json()?)?;
            }
            println!("model written to {}", out.display());
        }
        Command::Tokenize { model, data, out } => {
            let model = ModelState::load(&model)?;
            let ds = load_data(&data)?;
            let table = model.tokenize_dataset(&ds)?;
            table.save_jsonl(&out)?;
            println!(
                "tokenized {} items, collision rate {:.4}",
                table.rows.len(),
                table.collision_rate()
            );
        }
        Command::Eval { model, data, report } => {
            let model = ModelState::load(&model)?;
            let ds = load_data(&data)?;
            let rep = evaluate(&model, &ds)?;
            write(&report, &rep.to_json()?)?;
            print!("{}", rep.to_table());
        }
        Command::Compare { data, config, report } => {
            let cfg = load_config(config.as_deref())?;
            let ds = load_data(&data)?;
            let rep = theorem_report_with_progress(&ds, &cfg, |m| println!("{m}"))?;
            write(&report, &rep.to_json()?)?;
            print!("{}", rep.to_table());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<unitok::Error>())
        .any(unitok::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
