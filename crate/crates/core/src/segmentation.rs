//! Downstream segmentation: the consumer-side check of synthesized data.
//! A small U-Net (conv encoder, inverted decoder) trains on generated
//! pairs with Dice+BCE loss and is scored with Dice/IoU on held-out data.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::dataset::ImageMaskPair;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, Sgd};
use crate::rng::{self, Stream};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegConfig {
    /// Encoder stage widths; the decoder mirrors them in reverse.
    pub encoder_widths: Vec<usize>,
    pub lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub image_channels: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        SegConfig {
            encoder_widths: vec![16, 32, 64, 128],
            lr: 0.01,
            momentum: 0.0,
            epochs: 50,
            batch_size: 16,
            image_channels: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_widths.is_empty() {
            return Err(Error::invalid("need at least one encoder stage"));
        }
        if self.batch_size == 0 || self.image_channels == 0 {
            return Err(Error::invalid("batch_size and channels must be positive"));
        }
        Ok(())
    }
}

struct ConvBlock {
    conv1: Conv2d,
    norm1: GroupNorm,
    conv2: Conv2d,
    norm2: GroupNorm,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, rng: &mut impl rand::Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        ConvBlock {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1),
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), c_out),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), c_out),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.conv1.forward(tape, store, x);
        let h = self.norm1.forward(tape, store, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h);
        let h = self.norm2.forward(tape, store, h);
        tape.silu(h)
    }
}

/// Segmentation U-Net producing one logit channel at input resolution.
pub struct SegModel {
    pub config: SegConfig,
    pub store: ParamStore,
    enc: Vec<ConvBlock>,
    downs: Vec<Conv2d>,
    dec: Vec<ConvBlock>,
    ups: Vec<Conv2d>,
    head: Conv2d,
}

pub fn build_segmenter(config: &SegConfig, seed: u64) -> Result<SegModel> {
    config.validate()?;
    let mut rng = rng::derive(seed, Stream::ParamInit, 2);
    let mut store = ParamStore::new();
    let widths = &config.encoder_widths;
    let mut enc = Vec::new();
    let mut downs = Vec::new();
    let mut c_in = config.image_channels;
    for (i, &w) in widths.iter().enumerate() {
        enc.push(ConvBlock::new(&mut store, &mut rng, &format!("enc{i}"), c_in, w));
        if i + 1 < widths.len() {
            downs.push(Conv2d::new(&mut store, &mut rng, &format!("down{i}"), w, widths[i + 1], 3, 2, 1));
            c_in = widths[i + 1];
        }
    }
    let mut dec = Vec::new();
    let mut ups = Vec::new();
    for i in (0..widths.len() - 1).rev() {
        // upsample from widths[i+1] to widths[i], concat the skip, refine
        ups.push(Conv2d::new(&mut store, &mut rng, &format!("up{i}"), widths[i + 1], widths[i], 3, 1, 1));
        dec.push(ConvBlock::new(&mut store, &mut rng, &format!("dec{i}"), 2 * widths[i], widths[i]));
    }
    let head = Conv2d::new(&mut store, &mut rng, "head", widths[0], 1, 3, 1, 1);
    Ok(SegModel { config: config.clone(), store, enc, downs, dec, ups, head })
}

impl SegModel {
    /// Record the logit map `(B, 1, H, W)` for an image batch.
    pub fn logits_nodes(&self, tape: &mut Tape, images: NodeId) -> NodeId {
        let store = &self.store;
        let mut h = images;
        let mut skips = Vec::new();
        for i in 0..self.enc.len() {
            h = self.enc[i].forward(tape, store, h);
            if i + 1 < self.enc.len() {
                skips.push(h);
                h = self.downs[i].forward(tape, store, h);
            }
        }
        for (j, skip) in skips.into_iter().rev().enumerate() {
            h = tape.upsample_nearest_2x(h);
            h = self.ups[j].forward(tape, store, h);
            h = tape.concat_channels(&[h, skip]);
            h = self.dec[j].forward(tape, store, h);
        }
        self.head.forward(tape, store, h)
    }

    /// Foreground probabilities `(B, 1, H, W)`; pure inference.
    pub fn predict_probs(&self, images: &Array4<f64>) -> Array4<f64> {
        let mut tape = Tape::inference();
        let x = tape.constant4(images.clone());
        let logits = self.logits_nodes(&mut tape, x);
        let probs = tape.sigmoid(logits);
        tape.value(probs)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned()
    }
}

/// Smoothed soft-dice loss (`1 - dice`) over a probability map, batch
/// global with smoothing 1.0 in numerator and denominator.
pub fn soft_dice_loss_node(tape: &mut Tape, probs: NodeId, target: &Array4<f64>) -> NodeId {
    let t = tape.constant4(target.clone());
    let inter = tape.mul(probs, t);
    let inter = tape.sum_all(inter);
    let ps = tape.sum_all(probs);
    let ts = tape.sum_all(t);
    let num = tape.affine(inter, 2.0, 1.0);
    let den0 = tape.add(ps, ts);
    let den = tape.affine(den0, 1.0, 1.0);
    let dice = tape.div(num, den);
    tape.affine(dice, -1.0, 1.0)
}

/// Dice + BCE training objective on logits.
pub fn seg_loss_node(tape: &mut Tape, logits: NodeId, target: &Array4<f64>) -> NodeId {
    let bce = tape.bce_with_logits(logits, &target.clone().into_dyn());
    let probs = tape.sigmoid(logits);
    let dice = soft_dice_loss_node(tape, probs, target);
    tape.add(dice, bce)
}

/// `2|A n B| / (|A| + |B|)`; 1 when both masks are empty.
pub fn dice_score(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let (i, a, b) = confusion(pred, gt)?;
    Ok(if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 })
}

/// `|A n B| / |A u B|`; 1 when both masks are empty.
pub fn iou_score(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<f64> {
    let (i, a, b) = confusion(pred, gt)?;
    let union = a + b - i;
    Ok(if union == 0 { 1.0 } else { i as f64 / union as f64 })
}

fn confusion(pred: &Array2<f64>, gt: &Array2<f64>) -> Result<(usize, usize, usize)> {
    if pred.dim() != gt.dim() {
        return Err(Error::shape(format!("{:?} vs {:?}", pred.dim(), gt.dim())));
    }
    if pred.iter().chain(gt.iter()).any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::invalid("masks must be binary"));
    }
    let mut inter = 0;
    let mut na = 0;
    let mut nb = 0;
    for (p, g) in pred.iter().zip(gt.iter()) {
        if *p == 1.0 {
            na += 1;
        }
        if *g == 1.0 {
            nb += 1;
        }
        if *p == 1.0 && *g == 1.0 {
            inter += 1;
        }
    }
    Ok((inter, na, nb))
}

/// Dice/IoU summary: per-image means and the aggregate over summed
/// confusion counts (the headline number).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
    pub dice_mean_per_image: f64,
    pub iou_mean_per_image: f64,
    pub per_image: Vec<(String, f64, f64)>,
}

/// Deterministic mini-batch trainer with SGD and Dice+BCE loss. Images in
/// `[0, 1]`, masks strictly binary. Aborts on non-finite loss.
pub fn train_segmenter(
    train_pairs: &[ImageMaskPair],
    cfg: &SegConfig,
    seed: u64,
) -> Result<SegModel> {
    let mut model = build_segmenter(cfg, seed)?;
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum);
    finetune_with(&mut model, &mut opt, train_pairs, cfg.epochs, seed)?;
    Ok(model)
}

/// Continue training an existing model on new pairs with the same loss.
/// Zero epochs returns the model unchanged.
pub fn finetune(
    model: &mut SegModel,
    real_pairs: &[ImageMaskPair],
    epochs: usize,
    seed: u64,
) -> Result<()> {
    let cfg = model.config.clone();
    let mut opt = Sgd::new(&model.store, cfg.lr, cfg.momentum);
    finetune_with(model, &mut opt, real_pairs, epochs, seed)
}

fn finetune_with(
    model: &mut SegModel,
    opt: &mut Sgd,
    pairs: &[ImageMaskPair],
    epochs: usize,
    seed: u64,
) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Dataset("empty segmentation dataset".into()));
    }
    let mut order_rng = rng::derive(seed, Stream::BatchSample, 7);
    let bs = model.config.batch_size.min(pairs.len());
    for epoch in 0..epochs {
        let mut idx: Vec<usize> = (0..pairs.len()).collect();
        idx.shuffle(&mut order_rng);
        for chunk in idx.chunks(bs) {
            let batch: Vec<&ImageMaskPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (images, masks) = batch_tensors(&batch, model.config.image_channels)?;
            let mut tape = Tape::new();
            let x = tape.constant4(images);
            let logits = model.logits_nodes(&mut tape, x);
            let loss = seg_loss_node(&mut tape, logits, &masks);
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite segmentation loss at epoch {epoch}"
                )));
            }
            tape.backward(loss);
            model.store.zero_grads();
            tape.accumulate_param_grads(&mut model.store);
            opt.step(&mut model.store);
        }
    }
    Ok(())
}

fn batch_tensors(batch: &[&ImageMaskPair], channels: usize) -> Result<(Array4<f64>, Array4<f64>)> {
    let (h, w, c) = batch[0].image.dim();
    if c != channels {
        return Err(Error::shape(format!("expected {channels} channels, got {c}")));
    }
    let mut images = Array4::<f64>::zeros((batch.len(), c, h, w));
    let mut masks = Array4::<f64>::zeros((batch.len(), 1, h, w));
    for (bi, pair) in batch.iter().enumerate() {
        pair.validate()?;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    images[[bi, ch, y, x]] = pair.image[[y, x, ch]];
                }
                masks[[bi, 0, y, x]] = pair.mask[[y, x]];
            }
        }
    }
    Ok((images, masks))
}

/// Binarize predictions at `threshold` (ties foreground) and report both
/// mean-per-image and aggregate Dice/IoU.
pub fn evaluate(model: &SegModel, test_pairs: &[ImageMaskPair], threshold: f64) -> Result<SegMetrics> {
    if test_pairs.is_empty() {
        return Err(Error::Dataset("empty test set".into()));
    }
    let mut per_image = Vec::new();
    let (mut inter_sum, mut a_sum, mut b_sum) = (0usize, 0usize, 0usize);
    for pair in test_pairs {
        let batch = [pair];
        let (images, _) = batch_tensors(&batch, model.config.image_channels)?;
        let probs = model.predict_probs(&images);
        let (h, w) = pair.mask.dim();
        let mut pred = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for x in 0..w {
                pred[[y, x]] = if probs[[0, 0, y, x]] >= threshold { 1.0 } else { 0.0 };
            }
        }
        let (i, a, b) = confusion(&pred, &pair.mask)?;
        inter_sum += i;
        a_sum += a;
        b_sum += b;
        let d = if a + b == 0 { 1.0 } else { 2.0 * i as f64 / (a + b) as f64 };
        let u = a + b - i;
        let j = if u == 0 { 1.0 } else { i as f64 / u as f64 };
        per_image.push((pair.id.clone(), d, j));
    }
    let n = per_image.len() as f64;
    let dice_mean = per_image.iter().map(|(_, d, _)| d).sum::<f64>() / n;
    let iou_mean = per_image.iter().map(|(_, _, j)| j).sum::<f64>() / n;
    let dice_agg = if a_sum + b_sum == 0 {
        1.0
    } else {
        2.0 * inter_sum as f64 / (a_sum + b_sum) as f64
    };
    let union = a_sum + b_sum - inter_sum;
    let iou_agg = if union == 0 { 1.0 } else { inter_sum as f64 / union as f64 };
    Ok(SegMetrics {
        dice: dice_agg,
        iou: iou_agg,
        dice_mean_per_image: dice_mean,
        iou_mean_per_image: iou_mean,
        per_image,
    })
}
