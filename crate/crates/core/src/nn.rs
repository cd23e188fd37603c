//! Network building blocks over the autodiff tape, plus the optimizers.
//! Blocks own [`ParamId`]s into a [`ParamStore`]; a forward pass binds them
//! on the tape, so sharing a block between two inputs shares (and jointly
//! trains) its weights.

use crate::autodiff::{NodeId, ParamId, ParamStore, Tape};
use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_distr::StandardNormal;

/// Smallest group count dividing `c` with group size at most 32.
pub fn norm_groups(c: usize) -> usize {
    for g in 1..=c {
        if c % g == 0 && c / g <= 32 {
            return g;
        }
    }
    c
}

fn he_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> ArrayD<f64> {
    let std = (2.0 / fan_in as f64).sqrt();
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

fn xavier_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> ArrayD<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_simple_fn(ndarray::IxDyn(shape), || {
        let z: f64 = rng.sample(StandardNormal);
        z * std
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            he_normal(rng, &[c_out, c_in, k, k], c_in * k * k),
        );
        let b = store.add(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[c_out])));
        Conv2d { w, b, stride, pad }
    }

    /// Zero-initialized 1x1 convolution; contributes nothing until trained.
    pub fn new_zero(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            ArrayD::zeros(ndarray::IxDyn(&[c_out, c_in, 1, 1])),
        );
        let b = store.add(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[c_out])));
        Conv2d { w, b, stride: 1, pad: 0 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        f_in: usize,
        f_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.w"),
            xavier_normal(rng, &[f_out, f_in], f_in, f_out),
        );
        let b =
            bias.then(|| store.add(format!("{name}.b"), ArrayD::zeros(ndarray::IxDyn(&[f_out]))));
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = tape.param(store, self.w);
        let b = self.b.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[c]), 1.0),
        );
        let beta = store.add(format!("{name}.beta"), ArrayD::zeros(ndarray::IxDyn(&[c])));
        GroupNorm { gamma, beta, groups: norm_groups(c) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        tape.group_norm(x, gamma, beta, self.groups, 1e-5)
    }
}

/// Sinusoidal embedding of integer timesteps, shape `(B, dim)`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((ts.len(), dim));
    for (row, &t) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = if half > 1 {
                (-(10_000f64.ln()) * i as f64 / (half - 1) as f64).exp()
            } else {
                1.0
            };
            let arg = t as f64 * freq;
            out[[row, i]] = arg.sin();
            out[[row, half + i]] = arg.cos();
        }
    }
    out
}

/// Two-layer MLP over the sinusoidal embedding; every residual block then
/// projects the result into its own channel width.
#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    pub dim: usize,
    pub out_dim: usize,
    l1: Linear,
    l2: Linear,
}

impl TimeEmbedding {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        out_dim: usize,
    ) -> Self {
        let l1 = Linear::new(store, rng, &format!("{name}.l1"), dim, out_dim, true);
        let l2 = Linear::new(store, rng, &format!("{name}.l2"), out_dim, out_dim, true);
        TimeEmbedding { dim, out_dim, l1, l2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ts: &[usize]) -> NodeId {
        let emb = tape.constant2(sinusoidal_embedding(ts, self.dim));
        let h = self.l1.forward(tape, store, emb);
        let h = tape.silu(h);
        self.l2.forward(tape, store, h)
    }
}

/// Pre-activation residual block with time conditioning, the standard
/// diffusion backbone unit: `gn -> silu -> conv -> (+ t proj) -> gn ->
/// silu -> conv`, plus a 1x1 shortcut when the channel count changes.
#[derive(Debug, Clone)]
pub struct ResBlock {
    gn1: GroupNorm,
    conv1: Conv2d,
    temb_proj: Linear,
    gn2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        temb_dim: usize,
    ) -> Self {
        ResBlock {
            gn1: GroupNorm::new(store, &format!("{name}.gn1"), c_in),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1),
            temb_proj: Linear::new(store, rng, &format!("{name}.temb"), temb_dim, c_out, true),
            gn2: GroupNorm::new(store, &format!("{name}.gn2"), c_out),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1),
            shortcut: (c_in != c_out)
                .then(|| Conv2d::new(store, rng, &format!("{name}.skip"), c_in, c_out, 1, 1, 0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, temb: NodeId) -> NodeId {
        let h = self.gn1.forward(tape, store, x);
        let h = tape.silu(h);
        let h = self.conv1.forward(tape, store, h);
        let te = tape.silu(temb);
        let te = self.temb_proj.forward(tape, store, te);
        let h = tape.add_channel_bias(h, te);
        let h = self.gn2.forward(tape, store, h);
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h);
        let sc = match &self.shortcut {
            Some(conv) => conv.forward(tape, store, x),
            None => x,
        };
        tape.add(h, sc)
    }
}

/// `(B, C, H, W) -> (B, H*W, C)` token view for attention.
pub fn to_tokens(tape: &mut Tape, x: NodeId) -> NodeId {
    let sh: Vec<usize> = tape.shape(x).to_vec();
    let (b, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    let p = tape.permute(x, &[0, 2, 3, 1]);
    tape.reshape(p, &[b, h * w, c])
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tape: &mut Tape, x: NodeId, h: usize, w: usize) -> NodeId {
    let sh: Vec<usize> = tape.shape(x).to_vec();
    let (b, _n, c) = (sh[0], sh[1], sh[2]);
    let r = tape.reshape(x, &[b, h, w, c]);
    tape.permute(r, &[0, 3, 1, 2])
}

/// Multi-head scaled dot-product attention over token sequences. Queries
/// come from `q_in`, keys and values from `kv_in`; projections carry no
/// bias. Self-attention is the `q_in == kv_in` case.
#[derive(Debug, Clone)]
pub struct Attention {
    pub heads: usize,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
}

impl Attention {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        channels: usize,
        heads: usize,
    ) -> Self {
        assert!(channels % heads == 0, "channels must split across heads");
        Attention {
            heads,
            wq: Linear::new(store, rng, &format!("{name}.wq"), channels, channels, false),
            wk: Linear::new(store, rng, &format!("{name}.wk"), channels, channels, false),
            wv: Linear::new(store, rng, &format!("{name}.wv"), channels, channels, false),
            wo: Linear::new(store, rng, &format!("{name}.wo"), channels, channels, false),
        }
    }

    fn project(&self, tape: &mut Tape, store: &ParamStore, x: NodeId, which: &Linear) -> NodeId {
        let sh: Vec<usize> = tape.shape(x).to_vec();
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let flat = tape.reshape(x, &[b * n, c]);
        let y = which.forward(tape, store, flat);
        let y = tape.reshape(y, &[b, n, self.heads, c / self.heads]);
        let y = tape.permute(y, &[0, 2, 1, 3]);
        tape.reshape(y, &[b * self.heads, n, c / self.heads])
    }

    /// Attended tokens `(B, N, C)`; the caller adds any residual.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q_in: NodeId,
        kv_in: NodeId,
    ) -> NodeId {
        let sh: Vec<usize> = tape.shape(q_in).to_vec();
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let d = c / self.heads;
        let q = self.project(tape, store, q_in, &self.wq);
        let k = self.project(tape, store, kv_in, &self.wk);
        let v = self.project(tape, store, kv_in, &self.wv);
        let scores = tape.bmm_nt(q, k);
        let scores = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
        let attn = tape.softmax_last(scores);
        let out = tape.bmm(attn, v);
        let out = tape.reshape(out, &[b, self.heads, n, d]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[b * n, c]);
        let out = self.wo.forward(tape, store, out);
        tape.reshape(out, &[b, n, c])
    }
}

/// Adam with bias correction; moment buffers are serialized with
/// checkpoints so resumed runs continue exactly.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
            v: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.step_count += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step_count as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step_count as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).clone();
            let m = &mut self.m[idx];
            let b1 = self.beta1;
            m.zip_mut_with(&g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            let v = &mut self.v[idx];
            let b2 = self.beta2;
            v.zip_mut_with(&g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let (lr, eps) = (self.lr, self.eps);
            let mref = self.m[idx].view();
            let vref = self.v[idx].view();
            let value = store.value_mut(id);
            ndarray::Zip::from(value).and(&mref).and(&vref).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Plain SGD, momentum-free unless configured otherwise.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: store.iter().map(|p| ArrayD::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.ids().collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let g = store.grad(id).clone();
            let upd = if self.momentum != 0.0 {
                let v = &mut self.velocity[idx];
                let mu = self.momentum;
                v.zip_mut_with(&g, |v, &g| *v = mu * *v + g);
                v.clone()
            } else {
                g
            };
            let lr = self.lr;
            store.value_mut(id).zip_mut_with(&upd, |p, &u| *p -= lr * u);
        }
    }
}

/// Scale all gradients so their global L2 norm does not exceed `max_norm`;
/// returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for p in store.iter() {
        sq += p.grad.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            store.grad_mut(id).mapv_inplace(|v| v * scale);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_param_grad, relative_error};
    use crate::rng::{self, Stream};

    #[test]
    fn norm_group_sizes_bounded() {
        assert_eq!(norm_groups(8), 1);
        assert_eq!(norm_groups(32), 1);
        assert_eq!(norm_groups(64), 2);
        for c in [3usize, 8, 12, 16, 24, 32, 40, 64, 96, 128] {
            let g = norm_groups(c);
            assert_eq!(c % g, 0);
            assert!(c / g <= 32);
        }
    }

    #[test]
    fn sinusoidal_embedding_shape_and_range() {
        let e = sinusoidal_embedding(&[0, 1, 500], 16);
        assert_eq!(e.dim(), (3, 16));
        assert!(e.iter().all(|v| v.abs() <= 1.0));
        // t = 0 embeds as all sin = 0, cos = 1
        assert!(e.row(0).iter().take(8).all(|&v| v == 0.0));
        assert!(e.row(0).iter().skip(8).all(|&v| v == 1.0));
    }

    #[test]
    fn resblock_and_attention_gradients_match_finite_differences() {
        let mut rng = rng::derive(3, Stream::ParamInit, 9);
        let mut store = ParamStore::new();
        let temb = TimeEmbedding::new(&mut store, &mut rng, "temb", 8, 12);
        let block = ResBlock::new(&mut store, &mut rng, "rb", 4, 6, 12);
        let attn = Attention::new(&mut store, &mut rng, "attn", 6, 2);
        let x = rng::randn::<ndarray::Ix4, _>(&mut rng, (2, 4, 4, 4));

        let eval = |st: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let xn = tape.constant4(x.clone());
            let te = temb.forward(&mut tape, st, &[3, 7]);
            let h = block.forward(&mut tape, st, xn, te);
            let tok = to_tokens(&mut tape, h);
            let at = attn.forward(&mut tape, st, tok, tok);
            let back = from_tokens(&mut tape, at, 4, 4);
            let sq = tape.mul(back, back);
            let l = tape.mean_all(sq);
            tape.scalar(l)
        };

        let mut tape = Tape::new();
        let xn = tape.constant4(x.clone());
        let te = temb.forward(&mut tape, &store, &[3, 7]);
        let h = block.forward(&mut tape, &store, xn, te);
        let tok = to_tokens(&mut tape, h);
        let at = attn.forward(&mut tape, &store, tok, tok);
        let back = from_tokens(&mut tape, at, 4, 4);
        let sq = tape.mul(back, back);
        let l = tape.mean_all(sq);
        tape.backward(l);
        store.zero_grads();
        tape.accumulate_param_grads(&mut store);

        let mut rng2 = rng::derive(4, Stream::Validation, 9);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let n = store.value(id).len();
            let e = rng2.random_range(0..n);
            let analytic = store.grad(id).as_slice().unwrap()[e];
            let fd = finite_diff_param_grad(&mut store, id, e, 1e-5, |st| eval(st));
            let err = relative_error(analytic, fd);
            assert!(
                err < 1e-3,
                "{} elem {e}: analytic {analytic} fd {fd} rel {err}",
                store.name(id)
            );
        }
    }

    #[test]
    fn adam_matches_hand_computed_first_step() {
        let mut store = ParamStore::new();
        let id = store.add("p", ndarray::arr1(&[1.0]).into_dyn());
        let mut opt = Adam::new(&store, 0.1);
        store.grad_mut(id).fill(0.5);
        opt.step(&mut store);
        let m = 0.1 * 0.5;
        let v = 0.001 * 0.25;
        let mhat = m / 0.1;
        let vhat: f64 = v / 0.001;
        let expect = 1.0 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((store.value(id)[[0]] - expect).abs() < 1e-12);
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut rng = rng::derive(8, Stream::ParamInit, 10);
        let mut store = ParamStore::new();
        let id = store.add(
            "p",
            rng::randn::<ndarray::IxDyn, _>(&mut rng, ndarray::IxDyn(&[4])),
        );
        let before = store.value(id).clone();
        store.grad_mut(id).fill(1.0);
        let mut opt = Sgd::new(&store, 0.0, 0.0);
        opt.step(&mut store);
        assert_eq!(&before, store.value(id));
    }
}
