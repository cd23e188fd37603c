//! Staged end-to-end orchestration: train the paired generator, select
//! weights, sample a synthetic dataset, super-resolve it, train a
//! downstream segmenter, and evaluate on held-out real pairs. Every stage
//! records a manifest under `stages/` and is skipped when already complete
//! for the same config hash, so interrupted runs resume at the last
//! finished stage.

use crate::checkpoint::{self, CheckpointRecord};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::dataset::{self, ExportProvenance, ImageMaskPair};
use crate::diffusion::sample_loop;
use crate::error::{Error, Result};
use crate::report::{self, MetricsRow};
use crate::segmentation::{self, SegModel};
use crate::selection::{self, ScoreSamplerConfig};
use crate::superres;
use crate::train::{self};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: String,
    pub config_hash: String,
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

fn stage_path(out_root: &Path, stage: &str) -> PathBuf {
    out_root.join("stages").join(format!("{stage}.json"))
}

/// A completed stage manifest, if present, hash-compatible, and with all
/// recorded artifacts still on disk.
pub fn stage_done(out_root: &Path, stage: &str, config_hash: &str) -> Option<StageManifest> {
    let path = stage_path(out_root, stage);
    let body = std::fs::read_to_string(path).ok()?;
    let manifest: StageManifest = serde_json::from_str(&body).ok()?;
    if manifest.config_hash != config_hash {
        return None;
    }
    if manifest.artifacts.values().any(|p| !p.exists()) {
        return None;
    }
    Some(manifest)
}

fn mark_stage(
    out_root: &Path,
    stage: &str,
    config_hash: &str,
    artifacts: BTreeMap<String, PathBuf>,
    metrics: serde_json::Value,
) -> Result<StageManifest> {
    let manifest = StageManifest {
        stage: stage.to_string(),
        config_hash: config_hash.to_string(),
        artifacts,
        metrics,
    };
    let dir = out_root.join("stages");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io_at(&dir, e))?;
    dataset::write_json_atomic(&stage_path(out_root, stage), &manifest)?;
    Ok(manifest)
}

/// The resolved datasets a pipeline runs over: high-resolution train and
/// validation splits plus a held-out evaluation set.
pub struct PipelineData {
    pub hi_train: Vec<ImageMaskPair>,
    pub hi_val: Vec<ImageMaskPair>,
    pub hi_test: Vec<ImageMaskPair>,
}

pub fn prepare_datasets(cfg: &ExperimentConfig) -> Result<PipelineData> {
    match cfg.dataset.kind {
        DatasetKind::Toy => {
            let all = dataset::make_toy_dataset(
                cfg.dataset.toy_count,
                cfg.dataset.toy_size,
                cfg.train.seed,
            );
            let (hi_train, hi_val) = train::split_dataset(&all, cfg.train.split_ratio, cfg.train.seed)?;
            let hi_test = dataset::make_toy_dataset(
                cfg.dataset.toy_test.max(1),
                cfg.dataset.toy_size,
                cfg.train.seed ^ 0x7e57_7e57,
            );
            Ok(PipelineData { hi_train, hi_val, hi_test })
        }
        DatasetKind::Dir => {
            let root = cfg.dataset.root.as_ref().expect("validated");
            let loaded = dataset::load_dataset(root)?;
            if loaded.pairs.is_empty() {
                return Err(Error::Dataset(format!("no pairs under {root:?}")));
            }
            let (hi_train, hi_val) =
                train::split_dataset(&loaded.pairs, cfg.train.split_ratio, cfg.train.seed)?;
            let hi_test = match &cfg.dataset.test_root {
                Some(t) => {
                    let l = dataset::load_dataset(t)?;
                    if l.pairs.is_empty() {
                        return Err(Error::Dataset(format!("no pairs under {t:?}")));
                    }
                    l.pairs
                }
                None => hi_val.clone(),
            };
            Ok(PipelineData { hi_train, hi_val, hi_test })
        }
    }
}

/// Downsample high-resolution pairs to the generator's training size.
pub fn to_low_res(pairs: &[ImageMaskPair], factor: usize) -> Result<Vec<ImageMaskPair>> {
    pairs.iter().map(|p| dataset::downsample_pair(p, factor)).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SrQuality {
    pub sr_mae: f64,
    pub bilinear_mae: f64,
    pub mask_agreement: f64,
}

pub struct PipelineArtifacts {
    pub out_root: PathBuf,
    pub method: String,
    pub gen_run: PathBuf,
    pub selected_ckpt: PathBuf,
    pub sr_run: PathBuf,
    pub samples_low: PathBuf,
    pub samples_sr: PathBuf,
    pub metrics_csv: PathBuf,
    pub rows: Vec<MetricsRow>,
    pub sr_quality: SrQuality,
}

fn method_name(cfg: &ExperimentConfig) -> String {
    if cfg.train.use_discriminator {
        format!("{}_disc", cfg.generator.variant)
    } else {
        cfg.generator.variant.to_string()
    }
}

/// Generate pairs from a checkpoint in bounded batches.
pub fn sample_pairs_from_checkpoint(
    ckpt_dir: &Path,
    count: usize,
    mode: crate::diffusion::SampleMode,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageMaskPair>> {
    let (gen, sched, _) = train::load_generator_checkpoint(ckpt_dir)?;
    let mut out = Vec::with_capacity(count);
    let chunk = 64usize;
    let mut produced = 0usize;
    let mut batch_idx = 0u64;
    while produced < count {
        let n = chunk.min(count - produced);
        let state = sample_loop(&gen, &sched, mode, steps, seed.wrapping_add(batch_idx), n)?;
        let pairs = dataset::state_to_pairs(&state, &format!("gen_{batch_idx:03}_"), 0.5);
        out.extend(pairs);
        produced += n;
        batch_idx += 1;
    }
    Ok(out)
}

/// Run every stage; returns the artifact paths and downstream metrics.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<PipelineArtifacts> {
    cfg.validate().map_err(|e| Error::Stage { stage: "config".into(), msg: e.to_string() })?;
    let out_root = cfg.output_root.join(&cfg.name);
    std::fs::create_dir_all(&out_root).map_err(|e| Error::io_at(&out_root, e))?;
    let hash = cfg.hash();
    cfg.save(&out_root.join("config.json"))?;
    let method = method_name(cfg);

    let data = prepare_datasets(cfg)?;
    let factor = cfg.sr.high_size / cfg.sr.low_size;
    let low_train = to_low_res(&data.hi_train, factor)?;
    let low_all: Vec<ImageMaskPair> = {
        // the generator trains on the full (train + val) low-res set and
        // re-splits internally with the same seed
        let mut v = low_train.clone();
        v.extend(to_low_res(&data.hi_val, factor)?);
        v
    };

    // stage: train_generator
    let gen_run = out_root.join("run_gen");
    let stage = "train_generator";
    if stage_done(&out_root, stage, &hash).is_none() {
        let existing = checkpoint::list_checkpoints(&gen_run)?;
        let resume = existing
            .iter()
            .filter(|r| r.epoch < cfg.train.epochs)
            .next_back()
            .filter(|_| existing.iter().all(|r| r.epoch < cfg.train.epochs))
            .map(|r| r.dir().to_path_buf());
        train::train_paired(
            &low_all,
            &cfg.generator,
            &cfg.discriminator,
            &cfg.train,
            &gen_run,
            resume.as_deref(),
        )
        .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("run_dir".into(), gen_run.clone());
        mark_stage(&out_root, stage, &hash, artifacts, serde_json::Value::Null)?;
    }
    println!("[stage] {stage}: done");

    // stage: select_weights
    let stage = "select_weights";
    let selected_ckpt: PathBuf;
    if let Some(m) = stage_done(&out_root, stage, &hash) {
        selected_ckpt = m.artifacts.get("checkpoint").expect("recorded").clone();
    } else {
        let records = checkpoint::list_checkpoints(&gen_run)?;
        if records.is_empty() {
            return Err(Error::Stage { stage: stage.into(), msg: "no checkpoints".into() });
        }
        let train_hist = selection::dataset_histogram(&low_train, cfg.selection.bins)
            .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        let mut scored = Vec::new();
        for rec in &records {
            let dir = rec.dir();
            let score = match rec.mean_jsd {
                Some(s) => s,
                None => selection::score_checkpoint(
                    dir,
                    &train_hist,
                    &ScoreSamplerConfig {
                        mode: cfg.selection.score_mode,
                        steps: cfg.selection.score_steps,
                        seed: cfg.train.seed ^ 0x5c02e,
                        bins: cfg.selection.bins,
                        n_samples: cfg.selection.n_samples,
                    },
                )
                .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?,
            };
            scored.push(CheckpointRecord { mean_jsd: Some(score), ..rec.clone() });
        }
        let chosen = selection::select_weights(&scored, cfg.selection.strategy)
            .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        selected_ckpt = chosen.dir().to_path_buf();
        let mut artifacts = BTreeMap::new();
        artifacts.insert("checkpoint".into(), selected_ckpt.clone());
        mark_stage(
            &out_root,
            stage,
            &hash,
            artifacts,
            serde_json::json!({
                "strategy": cfg.selection.strategy.to_string(),
                "epoch": chosen.epoch,
            }),
        )?;
    }
    println!("[stage] {stage}: done ({selected_ckpt:?})");

    // stage: sample
    let stage = "sample";
    let samples_low = out_root.join("samples_low");
    if stage_done(&out_root, stage, &hash).is_none() {
        let pairs = sample_pairs_from_checkpoint(
            &selected_ckpt,
            cfg.sample.count,
            cfg.sample.mode,
            cfg.sample.steps,
            cfg.train.seed ^ 0x5a3b1e,
        )
        .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        dataset::export_generated(
            &pairs,
            &samples_low,
            0.5,
            &ExportProvenance {
                checkpoint: Some(selected_ckpt.display().to_string()),
                sampler_mode: Some(cfg.sample.mode.to_string()),
                sampler_steps: Some(cfg.sample.steps),
                seed: Some(cfg.train.seed ^ 0x5a3b1e),
            },
        )?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("dataset".into(), samples_low.clone());
        mark_stage(&out_root, stage, &hash, artifacts, serde_json::Value::Null)?;
    }
    println!("[stage] {stage}: done");

    // stage: train_sr (on real high-resolution pairs)
    let stage = "train_sr";
    let sr_run = out_root.join("run_sr");
    let sr_train_cfg = cfg.sr_train_config();
    if stage_done(&out_root, stage, &hash).is_none() {
        let mut all_hi = data.hi_train.clone();
        all_hi.extend(data.hi_val.iter().cloned());
        train::train_sr(&all_hi, &cfg.sr, &sr_train_cfg, &sr_run)
            .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("run_dir".into(), sr_run.clone());
        mark_stage(&out_root, stage, &hash, artifacts, serde_json::Value::Null)?;
    }
    println!("[stage] {stage}: done");
    let sr_records = checkpoint::list_checkpoints(&sr_run)?;
    let sr_ckpt = sr_records
        .last()
        .ok_or_else(|| Error::Stage { stage: stage.into(), msg: "no SR checkpoints".into() })?
        .dir()
        .to_path_buf();

    // stage: superres (apply to the sampled dataset)
    let stage = "superres";
    let samples_sr = out_root.join("samples_sr");
    if stage_done(&out_root, stage, &hash).is_none() {
        let (model, _) = train::load_sr_checkpoint(&sr_ckpt)?;
        let loaded = dataset::load_dataset(&samples_low)?;
        let mut upscaled = Vec::with_capacity(loaded.pairs.len());
        for (i, chunk) in loaded.pairs.chunks(64).enumerate() {
            let sr = superres::super_resolve_with(
                &model,
                chunk,
                cfg.sr.infer_mode,
                cfg.sr.steps_infer,
                cfg.train.seed ^ (0x50_51 + i as u64),
            )
            .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
            upscaled.extend(sr);
        }
        dataset::export_generated(
            &upscaled,
            &samples_sr,
            0.5,
            &ExportProvenance {
                checkpoint: Some(sr_ckpt.display().to_string()),
                sampler_mode: Some(cfg.sr.infer_mode.to_string()),
                sampler_steps: Some(cfg.sr.steps_infer),
                seed: Some(cfg.train.seed ^ 0x50_51),
            },
        )?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("dataset".into(), samples_sr.clone());
        mark_stage(&out_root, stage, &hash, artifacts, serde_json::Value::Null)?;
    }
    println!("[stage] {stage}: done");

    // stage: sr_quality (validation-split check against bilinear baseline)
    let stage = "sr_quality";
    let sr_quality: SrQuality;
    if let Some(m) = stage_done(&out_root, stage, &hash) {
        sr_quality = serde_json::from_value(m.metrics)?;
    } else {
        let (model, _) = train::load_sr_checkpoint(&sr_ckpt)?;
        let probe: Vec<ImageMaskPair> = data.hi_val.iter().take(16).cloned().collect();
        let probe = if probe.is_empty() {
            data.hi_train.iter().take(16).cloned().collect()
        } else {
            probe
        };
        let lows = to_low_res(&probe, factor)?;
        let sr = superres::super_resolve(&model, &lows, cfg.train.seed ^ 0x5a71)?;
        let mut sr_mae = 0.0;
        let mut bil_mae = 0.0;
        let mut agree = 0.0;
        for ((gt, low), sr_pair) in probe.iter().zip(lows.iter()).zip(sr.iter()) {
            let up = superres::upsample_pair(low, factor)?;
            sr_mae += dataset::image_mae(&sr_pair.image, &gt.image);
            bil_mae += dataset::image_mae(&up.image, &gt.image);
            agree += dataset::mask_agreement(&sr_pair.mask, &up.mask);
        }
        let n = probe.len() as f64;
        sr_quality = SrQuality {
            sr_mae: sr_mae / n,
            bilinear_mae: bil_mae / n,
            mask_agreement: agree / n,
        };
        mark_stage(
            &out_root,
            stage,
            &hash,
            BTreeMap::new(),
            serde_json::to_value(&sr_quality)?,
        )?;
    }
    println!("[stage] {stage}: done ({sr_quality:?})");

    // stage: train_segmenter on the super-resolved synthetic dataset
    let stage = "train_segmenter";
    let seg_dir = out_root.join("segmodel");
    if stage_done(&out_root, stage, &hash).is_none() {
        let synth = dataset::load_dataset(&samples_sr)?;
        let model = segmentation::train_segmenter(&synth.pairs, &cfg.segmentation, cfg.train.seed)
            .map_err(|e| Error::Stage { stage: stage.into(), msg: e.to_string() })?;
        save_segmenter(&model, &seg_dir)?;
        let mut artifacts = BTreeMap::new();
        artifacts.insert("model".into(), seg_dir.clone());
        mark_stage(&out_root, stage, &hash, artifacts, serde_json::Value::Null)?;
    }
    println!("[stage] {stage}: done");

    // stage: evaluate (synthetic-only, plus optional fine-tuned phase)
    let stage = "evaluate";
    let metrics_csv = out_root.join("metrics.csv");
    let rows: Vec<MetricsRow>;
    if stage_done(&out_root, stage, &hash).is_some() {
        rows = report::read_metrics_csv(&metrics_csv)?;
    } else {
        let mut model = load_segmenter(&seg_dir)?;
        let metrics = segmentation::evaluate(&model, &data.hi_test, 0.5)?;
        let mut out_rows = vec![MetricsRow {
            method: method.clone(),
            phase: "synthetic_only".into(),
            dice: metrics.dice,
            iou: metrics.iou,
        }];
        if cfg.finetune_epochs > 0 {
            segmentation::finetune(&mut model, &data.hi_train, cfg.finetune_epochs, cfg.train.seed ^ 0xf17e)?;
            save_segmenter(&model, &out_root.join("segmodel_finetuned"))?;
            let m2 = segmentation::evaluate(&model, &data.hi_test, 0.5)?;
            out_rows.push(MetricsRow {
                method: method.clone(),
                phase: "finetuned".into(),
                dice: m2.dice,
                iou: m2.iou,
            });
        }
        report::write_metrics_csv(&metrics_csv, &out_rows)?;
        // contact sheet of the first super-resolved samples
        let sheet_pairs = dataset::load_dataset(&samples_sr)?;
        if !sheet_pairs.pairs.is_empty() {
            report::contact_sheet(
                &sheet_pairs.pairs[..sheet_pairs.pairs.len().min(8)],
                &out_root.join("report").join("samples.png"),
                8,
            )?;
        }
        let mut artifacts = BTreeMap::new();
        artifacts.insert("metrics".into(), metrics_csv.clone());
        mark_stage(
            &out_root,
            stage,
            &hash,
            artifacts,
            serde_json::to_value(&out_rows)?,
        )?;
        rows = out_rows;
    }
    println!("[stage] {stage}: done");

    Ok(PipelineArtifacts {
        out_root,
        method,
        gen_run,
        selected_ckpt,
        sr_run,
        samples_low,
        samples_sr,
        metrics_csv,
        rows,
        sr_quality,
    })
}

/// Persist a segmentation model as `config.json` + `weights.bin`.
pub fn save_segmenter(model: &SegModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    dataset::write_json_atomic(&dir.join("config.json"), &model.config)?;
    checkpoint::save_weights(&dir.join("weights.bin"), &model.store, None)?;
    Ok(())
}

pub fn load_segmenter(dir: &Path) -> Result<SegModel> {
    let cfg_path = dir.join("config.json");
    let body = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io_at(&cfg_path, e))?;
    let cfg: crate::segmentation::SegConfig = serde_json::from_str(&body)?;
    let mut model = segmentation::build_segmenter(&cfg, 0)?;
    let (loaded, _) = checkpoint::load_weights(&dir.join("weights.bin"))?;
    model.store.load_values_from(&loaded)?;
    Ok(model)
}

/// Convenience: the most recent checkpoint under a run directory.
pub fn latest_checkpoint(run_dir: &Path) -> Result<PathBuf> {
    let records = checkpoint::list_checkpoints(run_dir)?;
    records
        .last()
        .map(|r| r.dir().to_path_buf())
        .ok_or_else(|| Error::Checkpoint(format!("no checkpoints under {run_dir:?}")))
}
