//! Conditional super-resolution: an image-to-image diffusion model that
//! maps low-resolution pairs to pairs at twice the resolution. The
//! low-resolution pair is resized (bilinear image / nearest mask) to each
//! level's spatial size and concatenated before every down-sampling and
//! up-sampling block; conditioning channels are inputs only.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::dataset::{self, ImageMaskPair};
use crate::diffusion::{sample_loop, NoisePredictor, NoiseSchedule, SampleMode};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, GroupNorm, ResBlock, TimeEmbedding};
use crate::resize;
use crate::rng::{self, Stream};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SRConfig {
    pub low_size: usize,
    /// Must equal `2 * low_size`.
    pub high_size: usize,
    /// Diffusion steps the model trains with.
    pub steps_train: usize,
    pub steps_infer: usize,
    pub infer_mode: SampleMode,
    pub beta_start: f64,
    pub beta_end: f64,
    pub image_channels: usize,
    pub base_channels: usize,
    pub depth: usize,
    #[serde(default = "default_sr_time_dim")]
    pub time_embed_dim: usize,
}

fn default_sr_time_dim() -> usize {
    32
}

impl Default for SRConfig {
    fn default() -> Self {
        SRConfig {
            low_size: 16,
            high_size: 32,
            steps_train: 1000,
            steps_infer: 100,
            infer_mode: SampleMode::Ddim,
            beta_start: 1e-4,
            beta_end: 0.02,
            image_channels: 3,
            base_channels: 16,
            depth: 2,
            time_embed_dim: default_sr_time_dim(),
        }
    }
}

impl SRConfig {
    pub fn validate(&self) -> Result<()> {
        if self.high_size != 2 * self.low_size {
            return Err(Error::invalid(format!(
                "high_size {} must be exactly twice low_size {}",
                self.high_size, self.low_size
            )));
        }
        if self.depth == 0 || self.high_size % (1 << self.depth) != 0 {
            return Err(Error::invalid(format!(
                "high_size {} not divisible by 2^depth = {}",
                self.high_size,
                1 << self.depth
            )));
        }
        if self.steps_train == 0 || self.steps_infer == 0 || self.steps_infer > self.steps_train {
            return Err(Error::invalid("need 1 <= steps_infer <= steps_train"));
        }
        if self.base_channels == 0 || self.image_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        Ok(())
    }

    fn pair_channels(&self) -> usize {
        self.image_channels + 1
    }

    fn level_width(&self, l: usize) -> usize {
        self.base_channels << l
    }

    fn level_size(&self, l: usize) -> usize {
        self.high_size >> l
    }
}

/// Upscale a pair by an integer factor: bilinear for the image, nearest
/// neighbor for the mask (stays exactly binary).
pub fn upsample_pair(pair: &ImageMaskPair, factor: usize) -> Result<ImageMaskPair> {
    if factor == 0 {
        return Err(Error::invalid("factor must be >= 1"));
    }
    let (h, w, _c) = pair.image.dim();
    Ok(ImageMaskPair {
        id: pair.id.clone(),
        image: resize::bilinear(&pair.image, h * factor, w * factor),
        mask: resize::nearest(&pair.mask, h * factor, w * factor),
    })
}

/// Denoiser over the high-resolution pair state with per-level
/// conditioning concatenation.
pub struct SRModel {
    pub config: SRConfig,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    temb: TimeEmbedding,
    conv_in: Conv2d,
    down_blocks: Vec<ResBlock>,
    pools: Vec<Conv2d>,
    mid1: ResBlock,
    mid2: ResBlock,
    expands: Vec<Conv2d>,
    up_blocks: Vec<ResBlock>,
    head_norm: GroupNorm,
    head_conv: Conv2d,
}

pub fn build_sr_model(config: &SRConfig, seed: u64) -> Result<SRModel> {
    config.validate()?;
    let schedule = NoiseSchedule::linear(config.steps_train, config.beta_start, config.beta_end)?;
    let mut rng = rng::derive(seed, Stream::ParamInit, 3);
    let mut store = ParamStore::new();
    let tdim = config.time_embed_dim;
    let pc = config.pair_channels();
    let temb = TimeEmbedding::new(&mut store, &mut rng, "temb", tdim, tdim);
    let conv_in = Conv2d::new(&mut store, &mut rng, "in", pc, config.base_channels, 3, 1, 1);
    let mut down_blocks = Vec::new();
    let mut pools = Vec::new();
    for l in 0..config.depth {
        let w = config.level_width(l);
        // conditioning is concatenated ahead of each down block
        down_blocks.push(ResBlock::new(&mut store, &mut rng, &format!("down{l}.block"), w + pc, w, tdim));
        pools.push(Conv2d::new(&mut store, &mut rng, &format!("down{l}.pool"), w, config.level_width(l + 1), 3, 2, 1));
    }
    let wb = config.level_width(config.depth);
    let mid1 = ResBlock::new(&mut store, &mut rng, "mid1", wb, wb, tdim);
    let mid2 = ResBlock::new(&mut store, &mut rng, "mid2", wb, wb, tdim);
    let mut expands = Vec::new();
    let mut up_blocks = Vec::new();
    for l in (0..config.depth).rev() {
        let w_hi = config.level_width(l + 1);
        let w = config.level_width(l);
        expands.push(Conv2d::new(&mut store, &mut rng, &format!("up{l}.expand"), w_hi, w, 3, 1, 1));
        // input: upsampled feature + own skip + conditioning
        up_blocks.push(ResBlock::new(&mut store, &mut rng, &format!("up{l}.block"), 2 * w + pc, w, tdim));
    }
    let head_norm = GroupNorm::new(&mut store, "head.norm", config.base_channels);
    let head_conv = Conv2d::new(&mut store, &mut rng, "head.conv", config.base_channels, pc, 3, 1, 1);
    Ok(SRModel {
        config: config.clone(),
        store,
        schedule,
        temb,
        conv_in,
        down_blocks,
        pools,
        mid1,
        mid2,
        expands,
        up_blocks,
        head_norm,
        head_conv,
    })
}

/// Per-level conditioning tensors in `[-1, 1]`: the low-res pairs resized
/// to each level's spatial size (bilinear image / nearest mask).
pub fn conditioning_levels(
    config: &SRConfig,
    lowres: &[&ImageMaskPair],
) -> Result<Vec<Array4<f64>>> {
    if lowres.is_empty() {
        return Err(Error::Dataset("empty conditioning batch".into()));
    }
    let c = config.image_channels;
    for p in lowres {
        let (h, w, pc) = p.image.dim();
        if (h, w) != (config.low_size, config.low_size) || pc != c {
            let want = config.low_size;
            return Err(Error::shape(format!(
                "conditioning pair `{}` is {h}x{w}x{pc}, expected {want}x{want}x{c}",
                p.id
            )));
        }
    }
    let mut levels = Vec::new();
    for l in 0..=config.depth {
        let s = config.level_size(l);
        let mut cond = Array4::<f64>::zeros((lowres.len(), c + 1, s, s));
        for (bi, p) in lowres.iter().enumerate() {
            let img = resize::bilinear(&p.image, s, s);
            let mask = resize::nearest(&p.mask, s, s);
            for y in 0..s {
                for x in 0..s {
                    for ch in 0..c {
                        cond[[bi, ch, y, x]] = img[[y, x, ch]] * 2.0 - 1.0;
                    }
                    cond[[bi, c, y, x]] = mask[[y, x]] * 2.0 - 1.0;
                }
            }
        }
        levels.push(cond);
    }
    Ok(levels)
}

impl SRModel {
    /// Record the noise prediction for a high-res state batch given
    /// per-level conditioning nodes (index = level).
    pub fn forward_nodes(
        &self,
        tape: &mut Tape,
        x_t: NodeId,
        ts: &[usize],
        cond: &[NodeId],
    ) -> NodeId {
        let store = &self.store;
        let temb = self.temb.forward(tape, store, ts);
        let mut h = self.conv_in.forward(tape, store, x_t);
        let mut skips = Vec::new();
        for l in 0..self.config.depth {
            h = tape.concat_channels(&[h, cond[l]]);
            h = self.down_blocks[l].forward(tape, store, h, temb);
            skips.push(h);
            h = self.pools[l].forward(tape, store, h);
        }
        h = self.mid1.forward(tape, store, h, temb);
        h = self.mid2.forward(tape, store, h, temb);
        for i in 0..self.config.depth {
            let l = self.config.depth - 1 - i;
            h = tape.upsample_nearest_2x(h);
            h = self.expands[i].forward(tape, store, h);
            h = tape.concat_channels(&[h, skips[l], cond[l]]);
            h = self.up_blocks[i].forward(tape, store, h, temb);
        }
        let h = self.head_norm.forward(tape, store, h);
        let h = tape.silu(h);
        self.head_conv.forward(tape, store, h)
    }

    /// Predict noise on the high-res state conditioned on low-res pairs.
    pub fn sr_forward(
        &self,
        x_t_high: &Array4<f64>,
        ts: &[usize],
        lowres: &[&ImageMaskPair],
    ) -> Result<Array4<f64>> {
        let conds = conditioning_levels(&self.config, lowres)?;
        self.sr_forward_conds(x_t_high, ts, &conds)
    }

    fn sr_forward_conds(
        &self,
        x_t_high: &Array4<f64>,
        ts: &[usize],
        conds: &[Array4<f64>],
    ) -> Result<Array4<f64>> {
        let (b, c1, h, w) = x_t_high.dim();
        if c1 != self.config.pair_channels()
            || h != self.config.high_size
            || w != self.config.high_size
        {
            return Err(Error::shape(format!(
                "state {:?} does not match configured {}x{} pair",
                x_t_high.dim(),
                self.config.high_size,
                self.config.high_size
            )));
        }
        if conds[0].dim().0 != b || ts.len() != b {
            return Err(Error::invalid(
                "conditioning batch and timesteps must match the state batch",
            ));
        }
        let mut tape = Tape::inference();
        let x = tape.constant4(x_t_high.clone());
        let cond_nodes: Vec<NodeId> = conds.iter().map(|c| tape.constant4(c.clone())).collect();
        let eps = self.forward_nodes(&mut tape, x, ts, &cond_nodes);
        Ok(tape
            .value(eps)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap()
            .to_owned())
    }
}

struct ConditionedSr<'a> {
    model: &'a SRModel,
    conds: Vec<Array4<f64>>,
}

impl NoisePredictor for ConditionedSr<'_> {
    fn state_shape(&self) -> (usize, usize, usize) {
        (
            self.model.config.pair_channels(),
            self.model.config.high_size,
            self.model.config.high_size,
        )
    }

    fn predict(&self, x_t: &Array4<f64>, t: usize) -> Array4<f64> {
        let ts = vec![t; x_t.dim().0];
        self.model
            .sr_forward_conds(x_t, &ts, &self.conds)
            .expect("conditioning prepared for this batch")
    }
}

/// Super-resolve pairs with the model's configured sampler. Output images
/// are clamped to `[0, 1]` and masks binarized at 0.5.
pub fn super_resolve(
    model: &SRModel,
    lowres: &[ImageMaskPair],
    seed: u64,
) -> Result<Vec<ImageMaskPair>> {
    super_resolve_with(
        model,
        lowres,
        model.config.infer_mode,
        model.config.steps_infer,
        seed,
    )
}

/// Super-resolve with an explicit sampler mode and step count.
pub fn super_resolve_with(
    model: &SRModel,
    lowres: &[ImageMaskPair],
    mode: SampleMode,
    steps: usize,
    seed: u64,
) -> Result<Vec<ImageMaskPair>> {
    if lowres.is_empty() {
        return Err(Error::Dataset("no pairs to super-resolve".into()));
    }
    let refs: Vec<&ImageMaskPair> = lowres.iter().collect();
    let conds = conditioning_levels(&model.config, &refs)?;
    let predictor = ConditionedSr { model, conds };
    let state = sample_loop(&predictor, &model.schedule, mode, steps, seed, lowres.len())?;
    let mut out = dataset::state_to_pairs(&state, "sr_", 0.5);
    for (o, src) in out.iter_mut().zip(lowres.iter()) {
        o.id = src.id.clone();
    }
    Ok(out)
}
