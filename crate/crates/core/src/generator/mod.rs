//! The paired image+mask noise-prediction networks.
//!
//! Three variants share one backbone vocabulary (residual blocks with time
//! conditioning at every level, stride-2 down transitions, nearest-up
//! transitions, own down-path skips concatenated on the way up):
//!
//! - `TwoEncoder`: two full U-Nets, one per modality, exchanging features
//!   at every down and up transition through a configurable skip fusion,
//!   and coupled by self- then cross-attention at the bottleneck.
//! - `SharedEncoder`: one shared encoder+bottleneck applied to image and
//!   mask independently (the 1-channel mask is lifted to image width by a
//!   learned 1x1 conv), followed by two decoders linked the same way.
//! - `Concat`: a single U-Net over the channel-stacked pair; cross-branch
//!   fusion does not apply and its internal skips concatenate directly.

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, GroupNorm, ResBlock, TimeEmbedding};
use crate::rng::{self, Stream};
use ndarray::{Array4, ArrayD, Axis};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TwoEncoder,
    SharedEncoder,
    Concat,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_encoder" => Ok(Variant::TwoEncoder),
            "shared_encoder" => Ok(Variant::SharedEncoder),
            "concat" => Ok(Variant::Concat),
            other => Err(Error::invalid(format!("unknown variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Variant::TwoEncoder => "two_encoder",
            Variant::SharedEncoder => "shared_encoder",
            Variant::Concat => "concat",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipFusion {
    Direct,
    ZeroConv,
    ScaleU,
}

impl std::str::FromStr for SkipFusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SkipFusion::Direct),
            "zero_conv" => Ok(SkipFusion::ZeroConv),
            "scale_u" => Ok(SkipFusion::ScaleU),
            other => Err(Error::invalid(format!("unknown skip fusion `{other}`"))),
        }
    }
}

impl std::fmt::Display for SkipFusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SkipFusion::Direct => "direct",
            SkipFusion::ZeroConv => "zero_conv",
            SkipFusion::ScaleU => "scale_u",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairedGeneratorConfig {
    pub variant: Variant,
    pub skip_fusion: SkipFusion,
    pub base_channels: usize,
    /// Number of down/up levels; the bottleneck sits at `input_size / 2^depth`.
    pub depth: usize,
    pub attention_heads: usize,
    pub image_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_time_dim")]
    pub time_embed_dim: usize,
    #[serde(default = "default_blocks_per_level")]
    pub blocks_per_level: usize,
}

fn default_time_dim() -> usize {
    32
}

fn default_blocks_per_level() -> usize {
    2
}

impl Default for PairedGeneratorConfig {
    fn default() -> Self {
        PairedGeneratorConfig {
            variant: Variant::TwoEncoder,
            skip_fusion: SkipFusion::ScaleU,
            base_channels: 16,
            depth: 2,
            attention_heads: 2,
            image_channels: 3,
            input_size: 16,
            time_embed_dim: default_time_dim(),
            blocks_per_level: default_blocks_per_level(),
        }
    }
}

impl PairedGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.base_channels == 0 || self.input_size == 0 {
            return Err(Error::invalid(
                "depth, base_channels, input_size must be positive",
            ));
        }
        if self.input_size % (1 << self.depth) != 0 {
            return Err(Error::invalid(format!(
                "input_size {} not divisible by 2^depth = {}",
                self.input_size,
                1 << self.depth
            )));
        }
        let bottleneck = self.base_channels << self.depth;
        if self.attention_heads == 0 || bottleneck % self.attention_heads != 0 {
            return Err(Error::invalid(format!(
                "bottleneck width {bottleneck} must split across {} heads",
                self.attention_heads
            )));
        }
        if self.image_channels == 0 {
            return Err(Error::invalid("image_channels must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        if self.blocks_per_level == 0 {
            return Err(Error::invalid("blocks_per_level must be positive"));
        }
        Ok(())
    }

    fn level_width(&self, l: usize) -> usize {
        self.base_channels << l
    }
}

/// Skip fusion: concatenate a backbone with incoming skip features,
/// moderated per mode. Output channel count equals the plain concatenation
/// width for every mode, so modes are interchangeable in an architecture.
#[derive(Debug, Clone)]
pub struct FuseSkip {
    pub mode: SkipFusion,
    zero_convs: Vec<Conv2d>,
    backbone_scale: Option<ParamId>,
    skip_scales: Vec<ParamId>,
}

impl FuseSkip {
    /// Fusion parameters are zero-initialized (ZeroConv weights, ScaleU
    /// scale vectors) and consume no RNG draws, so swapping modes never
    /// shifts the initialization stream of the surrounding network.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        mode: SkipFusion,
        backbone_ch: usize,
        skip_chs: &[usize],
    ) -> Self {
        let mut zero_convs = Vec::new();
        let mut skip_scales = Vec::new();
        let mut backbone_scale = None;
        match mode {
            SkipFusion::Direct => {}
            SkipFusion::ZeroConv => {
                for (i, &c) in skip_chs.iter().enumerate() {
                    zero_convs.push(Conv2d::new_zero(store, &format!("{name}.zconv{i}"), c, c));
                }
            }
            SkipFusion::ScaleU => {
                backbone_scale = Some(store.add(
                    format!("{name}.backbone_scale"),
                    ArrayD::zeros(ndarray::IxDyn(&[backbone_ch])),
                ));
                for (i, &c) in skip_chs.iter().enumerate() {
                    skip_scales.push(store.add(
                        format!("{name}.skip_scale{i}"),
                        ArrayD::zeros(ndarray::IxDyn(&[c])),
                    ));
                }
            }
        }
        FuseSkip { mode, zero_convs, backbone_scale, skip_scales }
    }

    /// Fused tensor with `backbone_ch + sum(skip_chs)` channels.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        backbone: NodeId,
        skips: &[NodeId],
    ) -> NodeId {
        match self.mode {
            SkipFusion::Direct => {
                let mut parts = vec![backbone];
                parts.extend_from_slice(skips);
                tape.concat_channels(&parts)
            }
            SkipFusion::ZeroConv => {
                let mut parts = vec![backbone];
                for (conv, &s) in self.zero_convs.iter().zip(skips.iter()) {
                    parts.push(conv.forward(tape, store, s));
                }
                tape.concat_channels(&parts)
            }
            SkipFusion::ScaleU => {
                let bs = tape.param(store, self.backbone_scale.expect("scale present"));
                let mut parts = vec![tape.channel_scale_one_plus(backbone, bs)];
                for (&sid, &s) in self.skip_scales.iter().zip(skips.iter()) {
                    let sv = tape.param(store, sid);
                    parts.push(tape.channel_scale_one_plus(s, sv));
                }
                tape.concat_channels(&parts)
            }
        }
    }
}

/// Bottleneck coupling: each branch self-attends over its own tokens, then
/// cross-attends with queries from its own branch and keys/values from the
/// other, with residuals around both. The two branches share one parameter
/// set, so equal inputs produce equal outputs.
#[derive(Debug, Clone)]
pub struct PairAttention {
    self_attn: Attention,
    cross_attn: Attention,
}

impl PairAttention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Self {
        PairAttention {
            self_attn: Attention::new(store, rng, &format!("{name}.self"), channels, heads),
            cross_attn: Attention::new(store, rng, &format!("{name}.cross"), channels, heads),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        y: NodeId,
    ) -> (NodeId, NodeId) {
        let sh: Vec<usize> = tape.shape(x).to_vec();
        let (h, w) = (sh[2], sh[3]);
        let xt = crate::nn::to_tokens(tape, x);
        let yt = crate::nn::to_tokens(tape, y);
        let xs = self.self_attn.forward(tape, store, xt, xt);
        let x1 = tape.add(xt, xs);
        let ys = self.self_attn.forward(tape, store, yt, yt);
        let y1 = tape.add(yt, ys);
        let xc = self.cross_attn.forward(tape, store, x1, y1);
        let x2 = tape.add(x1, xc);
        let yc = self.cross_attn.forward(tape, store, y1, x1);
        let y2 = tape.add(y1, yc);
        (
            crate::nn::from_tokens(tape, x2, h, w),
            crate::nn::from_tokens(tape, y2, h, w),
        )
    }
}

/// Encoder half of a U-Net column: per-level residual blocks, optional
/// cross-branch fusion feeding each stride-2 transition, and the first
/// bottleneck block.
#[derive(Debug, Clone)]
struct Encoder {
    conv_in: Conv2d,
    blocks: Vec<Vec<ResBlock>>,
    fuse: Vec<Option<FuseSkip>>,
    pools: Vec<Conv2d>,
    mid: ResBlock,
}

fn build_encoder(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    cfg: &PairedGeneratorConfig,
    name: &str,
    in_ch: usize,
    cross: bool,
) -> Encoder {
    let tdim = cfg.time_embed_dim;
    let conv_in = Conv2d::new(store, rng, &format!("{name}.in"), in_ch, cfg.base_channels, 3, 1, 1);
    let mut blocks = Vec::new();
    let mut fuse = Vec::new();
    let mut pools = Vec::new();
    for l in 0..cfg.depth {
        let w = cfg.level_width(l);
        blocks.push(
            (0..cfg.blocks_per_level)
                .map(|i| ResBlock::new(store, rng, &format!("{name}.down{l}.block{i}"), w, w, tdim))
                .collect(),
        );
        fuse.push(cross.then(|| {
            FuseSkip::new(store, &format!("{name}.down{l}.fuse"), cfg.skip_fusion, w, &[w])
        }));
        let fused = if cross { 2 * w } else { w };
        pools.push(Conv2d::new(
            store,
            rng,
            &format!("{name}.down{l}.pool"),
            fused,
            cfg.level_width(l + 1),
            3,
            2,
            1,
        ));
    }
    let wb = cfg.level_width(cfg.depth);
    let mid = ResBlock::new(store, rng, &format!("{name}.mid_in"), wb, wb, tdim);
    Encoder { conv_in, blocks, fuse, pools, mid }
}

/// Decoder half: second bottleneck block, per-step cross fusion feeding
/// each up transition, own-skip concatenation, residual blocks, and head.
#[derive(Debug, Clone)]
struct Decoder {
    mid: ResBlock,
    fuse: Vec<Option<FuseSkip>>,
    expands: Vec<Conv2d>,
    blocks: Vec<Vec<ResBlock>>,
    head_norm: GroupNorm,
    head_conv: Conv2d,
}

fn build_decoder(
    store: &mut ParamStore,
    rng: &mut ChaCha12Rng,
    cfg: &PairedGeneratorConfig,
    name: &str,
    out_ch: usize,
    cross: bool,
) -> Decoder {
    let tdim = cfg.time_embed_dim;
    let wb = cfg.level_width(cfg.depth);
    let mid = ResBlock::new(store, rng, &format!("{name}.mid_out"), wb, wb, tdim);
    let mut fuse = Vec::new();
    let mut expands = Vec::new();
    let mut blocks = Vec::new();
    for l in (0..cfg.depth).rev() {
        let w_hi = cfg.level_width(l + 1);
        let w = cfg.level_width(l);
        fuse.push(cross.then(|| {
            FuseSkip::new(store, &format!("{name}.up{l}.fuse"), cfg.skip_fusion, w_hi, &[w_hi])
        }));
        let fused = if cross { 2 * w_hi } else { w_hi };
        expands.push(Conv2d::new(
            store,
            rng,
            &format!("{name}.up{l}.expand"),
            fused,
            w,
            3,
            1,
            1,
        ));
        let mut lvl = Vec::new();
        for i in 0..cfg.blocks_per_level {
            let c_in = if i == 0 { 2 * w } else { w };
            lvl.push(ResBlock::new(store, rng, &format!("{name}.up{l}.block{i}"), c_in, w, tdim));
        }
        blocks.push(lvl);
    }
    let head_norm = GroupNorm::new(store, &format!("{name}.head.norm"), cfg.base_channels);
    let head_conv = Conv2d::new(
        store,
        rng,
        &format!("{name}.head.conv"),
        cfg.base_channels,
        out_ch,
        3,
        1,
        1,
    );
    Decoder { mid, fuse, expands, blocks, head_norm, head_conv }
}

fn run_blocks(
    tape: &mut Tape,
    store: &ParamStore,
    blocks: &[ResBlock],
    mut h: NodeId,
    temb: NodeId,
) -> NodeId {
    for b in blocks {
        h = b.forward(tape, store, h, temb);
    }
    h
}

impl Encoder {
    /// Single-branch encode (no cross features). Returns the bottleneck
    /// feature and the per-level skips.
    fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        temb: NodeId,
    ) -> (NodeId, Vec<NodeId>) {
        let mut h = self.conv_in.forward(tape, store, x);
        let mut skips = Vec::new();
        for l in 0..self.blocks.len() {
            h = run_blocks(tape, store, &self.blocks[l], h, temb);
            skips.push(h);
            h = self.pools[l].forward(tape, store, h);
        }
        let h = self.mid.forward(tape, store, h, temb);
        (h, skips)
    }
}

impl Decoder {
    fn head(&self, tape: &mut Tape, store: &ParamStore, h: NodeId) -> NodeId {
        let h = self.head_norm.forward(tape, store, h);
        let h = tape.silu(h);
        self.head_conv.forward(tape, store, h)
    }

    /// Single-branch decode (no cross features).
    fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        bottleneck: NodeId,
        temb: NodeId,
        skips: &[NodeId],
    ) -> NodeId {
        let depth = self.expands.len();
        let mut h = self.mid.forward(tape, store, bottleneck, temb);
        for i in 0..depth {
            let l = depth - 1 - i;
            h = tape.upsample_nearest_2x(h);
            h = self.expands[i].forward(tape, store, h);
            h = tape.concat_channels(&[h, skips[l]]);
            h = run_blocks(tape, store, &self.blocks[i], h, temb);
        }
        self.head(tape, store, h)
    }
}

/// Run two decoders in lockstep so each up transition can fuse the twin
/// branch's same-stage feature.
#[allow(clippy::too_many_arguments)]
fn decode_pair(
    tape: &mut Tape,
    store: &ParamStore,
    dx: &Decoder,
    dy: &Decoder,
    bx: NodeId,
    by: NodeId,
    temb: NodeId,
    skips_x: &[NodeId],
    skips_y: &[NodeId],
    sever: bool,
) -> (NodeId, NodeId) {
    let depth = dx.expands.len();
    let mut hx = dx.mid.forward(tape, store, bx, temb);
    let mut hy = dy.mid.forward(tape, store, by, temb);
    for i in 0..depth {
        let l = depth - 1 - i;
        let cross_x = if sever { tape.zeros_like(hy) } else { hy };
        let cross_y = if sever { tape.zeros_like(hx) } else { hx };
        let fx = dx.fuse[i].as_ref().expect("dual decoder").forward(tape, store, hx, &[cross_x]);
        let fy = dy.fuse[i].as_ref().expect("dual decoder").forward(tape, store, hy, &[cross_y]);
        let ux = tape.upsample_nearest_2x(fx);
        let uy = tape.upsample_nearest_2x(fy);
        hx = dx.expands[i].forward(tape, store, ux);
        hy = dy.expands[i].forward(tape, store, uy);
        hx = tape.concat_channels(&[hx, skips_x[l]]);
        hy = tape.concat_channels(&[hy, skips_y[l]]);
        hx = run_blocks(tape, store, &dx.blocks[i], hx, temb);
        hy = run_blocks(tape, store, &dy.blocks[i], hy, temb);
    }
    (dx.head(tape, store, hx), dy.head(tape, store, hy))
}

#[derive(Clone)]
enum Arch {
    Two {
        enc_x: Encoder,
        enc_y: Encoder,
        attn: PairAttention,
        dec_x: Decoder,
        dec_y: Decoder,
    },
    Shared {
        mask_lift: Conv2d,
        encoder: Encoder,
        attn: PairAttention,
        dec_x: Decoder,
        dec_y: Decoder,
    },
    Concat {
        encoder: Encoder,
        attn: Attention,
        decoder: Decoder,
    },
}

/// A built paired generator: configuration, parameters, and wiring.
pub struct PairedGenerator {
    pub config: PairedGeneratorConfig,
    pub store: ParamStore,
    temb: TimeEmbedding,
    arch: Arch,
}

/// Options for a forward pass; `sever_cross_skips` replaces every incoming
/// cross-branch feature with zeros (used by fusion equivalence checks).
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub sever_cross_skips: bool,
}

/// Deterministically initialize a generator from a config and seed.
pub fn build_generator(config: &PairedGeneratorConfig, seed: u64) -> Result<PairedGenerator> {
    config.validate()?;
    let mut rng = rng::derive(seed, Stream::ParamInit, 0);
    let mut store = ParamStore::new();
    let tdim = config.time_embed_dim;
    let temb = TimeEmbedding::new(&mut store, &mut rng, "temb", tdim, tdim);
    let c = config.image_channels;
    let wb = config.level_width(config.depth);
    let arch = match config.variant {
        Variant::TwoEncoder => {
            let enc_x = build_encoder(&mut store, &mut rng, config, "gx", c, true);
            let dec_x = build_decoder(&mut store, &mut rng, config, "gx", c, true);
            let enc_y = build_encoder(&mut store, &mut rng, config, "gy", 1, true);
            let dec_y = build_decoder(&mut store, &mut rng, config, "gy", 1, true);
            let attn = PairAttention::new(&mut store, &mut rng, "attn", wb, config.attention_heads);
            Arch::Two { enc_x, enc_y, attn, dec_x, dec_y }
        }
        Variant::SharedEncoder => {
            let mask_lift = Conv2d::new(&mut store, &mut rng, "mask_lift", 1, c, 1, 1, 0);
            let encoder = build_encoder(&mut store, &mut rng, config, "enc", c, false);
            let attn = PairAttention::new(&mut store, &mut rng, "attn", wb, config.attention_heads);
            let dec_x = build_decoder(&mut store, &mut rng, config, "dx", c, true);
            let dec_y = build_decoder(&mut store, &mut rng, config, "dy", 1, true);
            Arch::Shared { mask_lift, encoder, attn, dec_x, dec_y }
        }
        Variant::Concat => {
            let encoder = build_encoder(&mut store, &mut rng, config, "net", c + 1, false);
            let attn = Attention::new(&mut store, &mut rng, "attn.self", wb, config.attention_heads);
            let decoder = build_decoder(&mut store, &mut rng, config, "net", c + 1, false);
            Arch::Concat { encoder, attn, decoder }
        }
    };
    Ok(PairedGenerator { config: config.clone(), store, temb, arch })
}

impl PairedGenerator {
    /// Total diffusion state channels (image + mask).
    pub fn state_channels(&self) -> usize {
        self.config.image_channels + 1
    }

    /// Record the noise-prediction graph for an image/mask batch at
    /// per-element timesteps. Returns `(eps_x, eps_y)` node ids.
    pub fn predict_noise_nodes(
        &self,
        tape: &mut Tape,
        x_t: NodeId,
        y_t: NodeId,
        ts: &[usize],
        opts: ForwardOpts,
    ) -> (NodeId, NodeId) {
        let store = &self.store;
        let temb = self.temb.forward(tape, store, ts);
        let sever = opts.sever_cross_skips;
        match &self.arch {
            Arch::Two { enc_x, enc_y, attn, dec_x, dec_y } => {
                // lockstep down path: both branches advance level by level
                // so each pool sees the other's same-level features
                let mut hx = enc_x.conv_in.forward(tape, store, x_t);
                let mut hy = enc_y.conv_in.forward(tape, store, y_t);
                let mut skips_x = Vec::new();
                let mut skips_y = Vec::new();
                for l in 0..self.config.depth {
                    hx = run_blocks(tape, store, &enc_x.blocks[l], hx, temb);
                    hy = run_blocks(tape, store, &enc_y.blocks[l], hy, temb);
                    skips_x.push(hx);
                    skips_y.push(hy);
                    let cross_x = if sever { tape.zeros_like(hy) } else { hy };
                    let cross_y = if sever { tape.zeros_like(hx) } else { hx };
                    let fx = enc_x.fuse[l]
                        .as_ref()
                        .expect("dual encoder")
                        .forward(tape, store, hx, &[cross_x]);
                    let fy = enc_y.fuse[l]
                        .as_ref()
                        .expect("dual encoder")
                        .forward(tape, store, hy, &[cross_y]);
                    hx = enc_x.pools[l].forward(tape, store, fx);
                    hy = enc_y.pools[l].forward(tape, store, fy);
                }
                hx = enc_x.mid.forward(tape, store, hx, temb);
                hy = enc_y.mid.forward(tape, store, hy, temb);
                let (ax, ay) = attn.forward(tape, store, hx, hy);
                decode_pair(tape, store, dec_x, dec_y, ax, ay, temb, &skips_x, &skips_y, sever)
            }
            Arch::Shared { mask_lift, encoder, attn, dec_x, dec_y } => {
                let y_lifted = mask_lift.forward(tape, store, y_t);
                let (x_l, skips_x) = encoder.encode(tape, store, x_t, temb);
                let (y_l, skips_y) = encoder.encode(tape, store, y_lifted, temb);
                let (ax, ay) = attn.forward(tape, store, x_l, y_l);
                decode_pair(tape, store, dec_x, dec_y, ax, ay, temb, &skips_x, &skips_y, sever)
            }
            Arch::Concat { encoder, attn, decoder } => {
                let stacked = tape.concat_channels(&[x_t, y_t]);
                let (h, skips) = encoder.encode(tape, store, stacked, temb);
                let sh: Vec<usize> = tape.shape(h).to_vec();
                let tok = crate::nn::to_tokens(tape, h);
                let at = attn.forward(tape, store, tok, tok);
                let tok = tape.add(tok, at);
                let h = crate::nn::from_tokens(tape, tok, sh[2], sh[3]);
                let out = decoder.decode(tape, store, h, temb, &skips);
                let c = self.config.image_channels;
                let ex = tape.slice_channels(out, 0, c);
                let ey = tape.slice_channels(out, c, c + 1);
                (ex, ey)
            }
        }
    }

    /// Predict per-branch noise for an image/mask batch; pure inference.
    pub fn predict_noise(
        &self,
        x_t: &Array4<f64>,
        y_t: &Array4<f64>,
        ts: &[usize],
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        self.predict_noise_opts(x_t, y_t, ts, ForwardOpts::default())
    }

    pub fn predict_noise_opts(
        &self,
        x_t: &Array4<f64>,
        y_t: &Array4<f64>,
        ts: &[usize],
        opts: ForwardOpts,
    ) -> Result<(Array4<f64>, Array4<f64>)> {
        let (bx, cx, hx, wx) = x_t.dim();
        let (by, cy, hy, wy) = y_t.dim();
        if bx != by || (hx, wx) != (hy, wy) {
            return Err(Error::shape(format!(
                "paired inputs disagree: image {:?} vs mask {:?}",
                x_t.dim(),
                y_t.dim()
            )));
        }
        if cx != self.config.image_channels || cy != 1 {
            return Err(Error::shape(format!(
                "expected {}+1 channels, got {cx}+{cy}",
                self.config.image_channels
            )));
        }
        if ts.len() != bx {
            return Err(Error::invalid("one timestep per batch element"));
        }
        let mut tape = Tape::inference();
        let xn = tape.constant4(x_t.clone());
        let yn = tape.constant4(y_t.clone());
        let (ex, ey) = self.predict_noise_nodes(&mut tape, xn, yn, ts, opts);
        let ex = tape.value(ex).view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
        let ey = tape.value(ey).view().into_dimensionality::<ndarray::Ix4>().unwrap().to_owned();
        Ok((ex, ey))
    }

    /// Scalar parameter counts grouped by top-level name prefix.
    pub fn parameter_groups(&self) -> Vec<(String, usize)> {
        let mut groups: std::collections::BTreeMap<String, usize> = Default::default();
        for p in self.store.iter() {
            let prefix = p.name.split('.').next().unwrap_or("").to_string();
            *groups.entry(prefix).or_default() += p.value.len();
        }
        groups.into_iter().collect()
    }
}

impl NoisePredictor for PairedGenerator {
    fn state_shape(&self) -> (usize, usize, usize) {
        (
            self.state_channels(),
            self.config.input_size,
            self.config.input_size,
        )
    }

    fn predict(&self, x_t: &Array4<f64>, t: usize) -> Array4<f64> {
        let c = self.config.image_channels;
        let img = x_t.slice_axis(Axis(1), ndarray::Slice::from(0..c)).to_owned();
        let mask = x_t.slice_axis(Axis(1), ndarray::Slice::from(c..c + 1)).to_owned();
        let ts = vec![t; x_t.dim().0];
        let (ex, ey) = self.predict_noise(&img, &mask, &ts).expect("shape-checked state");
        ndarray::concatenate(Axis(1), &[ex.view(), ey.view()])
            .expect("concat eps")
            .as_standard_layout()
            .to_owned()
    }
}

#[cfg(test)]
mod tests;
