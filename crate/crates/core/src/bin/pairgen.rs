//! Operator entry point for the paired-diffusion pipeline.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use pairgen::checkpoint;
use pairgen::config::ExperimentConfig;
use pairgen::dataset::{self, ExportProvenance};
use pairgen::diffusion::SampleMode;
use pairgen::generator::Variant;
use pairgen::pipeline;
use pairgen::report;
use pairgen::segmentation;
use pairgen::selection::{self, ScoreSamplerConfig, SelectionStrategy};
use pairgen::superres;
use pairgen::train;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pairgen",
    about = "Joint image+mask diffusion synthesis, super-resolution, and downstream evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config file (.json or .toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a paired generator flavor on the configured dataset.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Architecture flavor: concat, shared_encoder, or two_encoder.
        #[arg(long)]
        flavor: Option<String>,
        /// Train adversarially with the time-conditioned discriminator.
        #[arg(long)]
        with_discriminator: bool,
        /// Resume from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample pairs from a trained run and export them as a dataset.
    Sample {
        #[command(flatten)]
        common: CommonOpts,
        /// Generator run directory (contains ckpt_* subdirectories).
        #[arg(long)]
        run: PathBuf,
        /// Checkpoint selection strategy.
        #[arg(long, default_value = "final_epoch")]
        strategy: String,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value = "ddim")]
        mode: String,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Also write a contact-sheet PNG of the first samples.
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Super-resolve an exported low-resolution dataset.
    Superres {
        #[command(flatten)]
        common: CommonOpts,
        /// SR run directory (contains ckpt_* subdirectories).
        #[arg(long)]
        run: PathBuf,
        /// Input dataset directory (images/ + masks/).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score checkpoints and print the selection table.
    Select {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "min_mean_jsd")]
        strategy: String,
        /// Compute mean JSD for checkpoints that lack it.
        #[arg(long)]
        score: bool,
    },
    /// Train the downstream segmenter on an exported dataset.
    Segtrain {
        #[command(flatten)]
        common: CommonOpts,
        /// Training dataset directory (images/ + masks/).
        #[arg(long)]
        data: PathBuf,
        /// Continue from an existing model directory instead of scratch.
        #[arg(long)]
        finetune_from: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a segmentation model on a dataset; prints Dice/IoU.
    Segeval {
        #[command(flatten)]
        common: CommonOpts,
        /// Model directory (config.json + weights.bin).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Append rows to this CSV (method,phase,dice,iou).
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value = "segmenter")]
        method: String,
        #[arg(long, default_value = "eval")]
        phase: String,
    },
    /// Run the full staged pipeline end to end.
    Pipeline {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        flavor: Option<String>,
        #[arg(long)]
        with_discriminator: bool,
    },
    /// Render a contact sheet from an exported dataset.
    Report {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sheet: PathBuf,
        #[arg(long, default_value_t = 8)]
        cols: usize,
    },
}

/// Errors that indicate misuse rather than runtime failure.
fn is_usage_error(e: &anyhow::Error) -> bool {
    matches!(
        e.downcast_ref::<pairgen::Error>(),
        Some(pairgen::Error::Config { .. }) | Some(pairgen::Error::InvalidArg(_))
    )
}

fn load_config(common: &CommonOpts) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => {
            let out = common.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            ExperimentConfig::toy("toy", &out)
        }
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
        if let Some(st) = cfg.sr_train.as_mut() {
            st.seed = seed;
        }
    }
    if let Some(out) = &common.out {
        cfg.output_root = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_flavor(cfg: &mut ExperimentConfig, flavor: &Option<String>, with_disc: bool) -> anyhow::Result<()> {
    if let Some(f) = flavor {
        cfg.generator.variant = f.parse::<Variant>()?;
    }
    if with_disc {
        cfg.train.use_discriminator = true;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { common, flavor, with_discriminator, resume } => {
            let mut cfg = load_config(&common)?;
            apply_flavor(&mut cfg, &flavor, with_discriminator)?;
            cfg.validate()?;
            let data = pipeline::prepare_datasets(&cfg)?;
            let factor = cfg.sr.high_size / cfg.sr.low_size;
            let mut low = pipeline::to_low_res(&data.hi_train, factor)?;
            low.extend(pipeline::to_low_res(&data.hi_val, factor)?);
            let run_dir = cfg.output_root.join(&cfg.name).join("run_gen");
            let outcome = train::train_paired(
                &low,
                &cfg.generator,
                &cfg.discriminator,
                &cfg.train,
                &run_dir,
                resume.as_deref(),
            )?;
            println!(
                "trained {} epochs, {} checkpoints under {}",
                cfg.train.epochs,
                outcome.records.len(),
                run_dir.display()
            );
            for row in outcome.log.iter().rev().take(1) {
                println!(
                    "final epoch {}: train_mse {:.6} val_mse {:.6}",
                    row.epoch, row.train_mse, row.val_mse
                );
            }
            Ok(())
        }
        Command::Sample { common, run, strategy, n, mode, steps, grid } => {
            let cfg = load_config(&common)?;
            let strategy: SelectionStrategy = strategy.parse()?;
            let mode: SampleMode = mode.parse()?;
            let records = checkpoint::list_checkpoints(&run)?;
            let chosen = selection::select_weights(&records, strategy)?;
            let ckpt = chosen.dir().to_path_buf();
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let pairs = pipeline::sample_pairs_from_checkpoint(&ckpt, n, mode, steps, seed)?;
            let out = common
                .out
                .unwrap_or_else(|| cfg.output_root.join(&cfg.name).join("samples"));
            dataset::export_generated(
                &pairs,
                &out,
                0.5,
                &ExportProvenance {
                    checkpoint: Some(ckpt.display().to_string()),
                    sampler_mode: Some(mode.to_string()),
                    sampler_steps: Some(steps),
                    seed: Some(seed),
                },
            )?;
            if let Some(sheet) = grid {
                report::contact_sheet(&pairs[..pairs.len().min(8)], &sheet, 8)?;
            }
            println!("exported {} pairs to {}", pairs.len(), out.display());
            Ok(())
        }
        Command::Superres { common, run, input, mode, steps } => {
            let cfg = load_config(&common)?;
            let ckpt = pipeline::latest_checkpoint(&run)?;
            let (model, _) = train::load_sr_checkpoint(&ckpt)?;
            let mode = match mode {
                Some(m) => m.parse()?,
                None => model.config.infer_mode,
            };
            let steps = steps.unwrap_or(model.config.steps_infer);
            let loaded = dataset::load_dataset(&input)?;
            if loaded.pairs.is_empty() {
                anyhow::bail!("no pairs under {}", input.display());
            }
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let mut upscaled = Vec::new();
            for (i, chunk) in loaded.pairs.chunks(64).enumerate() {
                upscaled.extend(superres::super_resolve_with(
                    &model,
                    chunk,
                    mode,
                    steps,
                    seed.wrapping_add(i as u64),
                )?);
            }
            let out = common
                .out
                .unwrap_or_else(|| input.with_file_name("samples_sr"));
            dataset::export_generated(
                &upscaled,
                &out,
                0.5,
                &ExportProvenance {
                    checkpoint: Some(ckpt.display().to_string()),
                    sampler_mode: Some(mode.to_string()),
                    sampler_steps: Some(steps),
                    seed: Some(seed),
                },
            )?;
            println!("super-resolved {} pairs to {}", upscaled.len(), out.display());
            Ok(())
        }
        Command::Select { common, run, strategy, score } => {
            let cfg = load_config(&common)?;
            let strategy: SelectionStrategy = strategy.parse()?;
            let mut records = checkpoint::list_checkpoints(&run)?;
            if records.is_empty() {
                anyhow::bail!("no checkpoints under {}", run.display());
            }
            if score {
                let data = pipeline::prepare_datasets(&cfg)?;
                let factor = cfg.sr.high_size / cfg.sr.low_size;
                let low_train = pipeline::to_low_res(&data.hi_train, factor)?;
                let hist = selection::dataset_histogram(&low_train, cfg.selection.bins)?;
                for rec in &mut records {
                    if rec.mean_jsd.is_none() {
                        let s = selection::score_checkpoint(
                            rec.dir(),
                            &hist,
                            &ScoreSamplerConfig {
                                mode: cfg.selection.score_mode,
                                steps: cfg.selection.score_steps,
                                seed: cfg.train.seed ^ 0x5c02e,
                                bins: cfg.selection.bins,
                                n_samples: cfg.selection.n_samples,
                            },
                        )?;
                        rec.mean_jsd = Some(s);
                    }
                }
            }
            println!("{:<8} {:>12} {:>12}", "epoch", "val_loss", "mean_jsd");
            for r in &records {
                let jsd = r
                    .mean_jsd
                    .map(|v| format!("{v:.6}"))
                    .unwrap_or_else(|| "-".into());
                println!("{:<8} {:>12.6} {:>12}", r.epoch, r.val_loss, jsd);
            }
            let chosen = selection::select_weights(&records, strategy)?;
            println!("selected: {}", chosen.dir().display());
            Ok(())
        }
        Command::Segtrain { common, data, finetune_from, epochs } => {
            let cfg = load_config(&common)?;
            let loaded = dataset::load_dataset(&data)?;
            if loaded.pairs.is_empty() {
                anyhow::bail!("no pairs under {}", data.display());
            }
            let out = common
                .out
                .unwrap_or_else(|| cfg.output_root.join(&cfg.name).join("segmodel"));
            let seed = common.seed.unwrap_or(cfg.train.seed);
            let model = match finetune_from {
                Some(from) => {
                    let mut model = pipeline::load_segmenter(&from)?;
                    let e = epochs.unwrap_or(cfg.finetune_epochs.max(1));
                    segmentation::finetune(&mut model, &loaded.pairs, e, seed)?;
                    model
                }
                None => {
                    let mut seg_cfg = cfg.segmentation.clone();
                    if let Some(e) = epochs {
                        seg_cfg.epochs = e;
                    }
                    segmentation::train_segmenter(&loaded.pairs, &seg_cfg, seed)?
                }
            };
            pipeline::save_segmenter(&model, &out)?;
            println!("segmentation model written to {}", out.display());
            Ok(())
        }
        Command::Segeval { common, model, data, threshold, csv, method, phase } => {
            let _ = load_config(&common)?;
            let model = pipeline::load_segmenter(&model)?;
            let loaded = dataset::load_dataset(&data)?;
            if loaded.pairs.is_empty() {
                anyhow::bail!("no pairs under {}", data.display());
            }
            let metrics = segmentation::evaluate(&model, &loaded.pairs, threshold)?;
            println!(
                "dice {:.4} iou {:.4} (per-image means: dice {:.4} iou {:.4}, n = {})",
                metrics.dice,
                metrics.iou,
                metrics.dice_mean_per_image,
                metrics.iou_mean_per_image,
                metrics.per_image.len()
            );
            if let Some(path) = csv {
                let mut rows = if path.exists() {
                    report::read_metrics_csv(&path)?
                } else {
                    Vec::new()
                };
                rows.push(report::MetricsRow {
                    method,
                    phase,
                    dice: metrics.dice,
                    iou: metrics.iou,
                });
                report::write_metrics_csv(&path, &rows)?;
            }
            Ok(())
        }
        Command::Pipeline { common, flavor, with_discriminator } => {
            let mut cfg = load_config(&common)?;
            apply_flavor(&mut cfg, &flavor, with_discriminator)?;
            cfg.validate()?;
            let artifacts = pipeline::run_pipeline(&cfg)?;
            println!("metrics: {}", artifacts.metrics_csv.display());
            for row in &artifacts.rows {
                println!(
                    "{},{},{:.4},{:.4}",
                    row.method, row.phase, row.dice, row.iou
                );
            }
            Ok(())
        }
        Command::Report { common, data, sheet, cols } => {
            let _ = load_config(&common)?;
            let loaded = dataset::load_dataset(&data)?;
            if loaded.pairs.is_empty() {
                anyhow::bail!("no pairs under {}", data.display());
            }
            let take = loaded.pairs.len().min(cols);
            report::contact_sheet(&loaded.pairs[..take], &sheet, cols)?;
            println!("wrote {}", sheet.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
