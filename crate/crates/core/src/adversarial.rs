//! Adversarial refinement: a time-conditioned discriminator over
//! concatenated pair states, the ramp limiting which timesteps it sees
//! early in training, priority sampling of newly exposed steps, and the
//! binary cross-entropy losses for both players.

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, GroupNorm, Linear, TimeEmbedding};
use crate::rng::{self, Stream};
use ndarray::{Array1, Array4, ArrayD};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Parameters of the maximum-timestep ramp
/// `t_max(s) = min(T, sigma * (s / alpha) + i0)` plus the epoch before
/// which high timesteps are priority-sampled.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorSchedule {
    /// Total diffusion steps `T`.
    pub t_total: usize,
    /// Step size of the ramp.
    pub sigma: f64,
    /// Epochs per ramp step.
    pub alpha_epochs: f64,
    /// Initial maximum timestep.
    pub i0: usize,
    /// Priority sampling applies while `epoch < priority_until_epoch`.
    pub priority_until_epoch: usize,
}

impl Default for DiscriminatorSchedule {
    fn default() -> Self {
        DiscriminatorSchedule {
            t_total: 1000,
            sigma: 20.0,
            alpha_epochs: 10.0,
            i0: 20,
            priority_until_epoch: 500,
        }
    }
}

impl DiscriminatorSchedule {
    /// Maximum timestep exposed to the discriminator at step counter `s`.
    pub fn t_max(&self, s: usize) -> usize {
        let ramp = self.sigma * (s as f64 / self.alpha_epochs) + self.i0 as f64;
        (ramp.floor() as usize).min(self.t_total).max(1)
    }
}

/// Draw a batch of timesteps in `[1, t_max]`. Before the priority cutoff
/// epoch, half the batch (rounded up) comes uniformly from the top quarter
/// `[ceil(0.75 t_max), t_max]` and the rest uniformly from the full range;
/// afterwards the whole batch is uniform.
pub fn sample_timesteps(
    batch: usize,
    epoch: usize,
    sched: &DiscriminatorSchedule,
    rng: &mut impl Rng,
) -> Vec<usize> {
    assert!(batch >= 1, "batch must be >= 1");
    let t_max = sched.t_max(epoch);
    let mut out = Vec::with_capacity(batch);
    if epoch < sched.priority_until_epoch && t_max > 1 {
        let top_lo = (0.75 * t_max as f64).ceil().max(1.0) as usize;
        let n_top = batch.div_ceil(2);
        for _ in 0..n_top {
            out.push(rng.random_range(top_lo..=t_max));
        }
        for _ in n_top..batch {
            out.push(rng.random_range(1..=t_max));
        }
    } else {
        for _ in 0..batch {
            out.push(rng.random_range(1..=t_max));
        }
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    /// Pair channels (image channels + 1).
    pub in_channels: usize,
    pub base_channels: usize,
    pub input_size: usize,
    #[serde(default = "default_disc_time_dim")]
    pub time_embed_dim: usize,
}

fn default_disc_time_dim() -> usize {
    32
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_power_of_two() {
            return Err(Error::invalid(
                "discriminator input_size must be a power of two >= 8",
            ));
        }
        if self.in_channels == 0 || self.base_channels == 0 {
            return Err(Error::invalid("channel counts must be positive"));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::invalid("time_embed_dim must be even and >= 2"));
        }
        Ok(())
    }
}

struct DiscBlock {
    conv: Conv2d,
    temb_proj: Linear,
    norm: GroupNorm,
}

/// Strided conv stack halving resolution down to 4x4 with the time
/// embedding added per block, then global average pooling and a linear
/// head. The sigmoid keeps outputs strictly inside (0, 1).
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub store: ParamStore,
    temb: TimeEmbedding,
    blocks: Vec<DiscBlock>,
    head: Linear,
}

/// Deterministically initialize a discriminator.
pub fn build_discriminator(config: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    config.validate()?;
    let mut rng = rng::derive(seed, Stream::ParamInit, 1);
    let mut store = ParamStore::new();
    let tdim = config.time_embed_dim;
    let temb = TimeEmbedding::new(&mut store, &mut rng, "temb", tdim, tdim);
    let mut blocks = Vec::new();
    let mut ch = config.in_channels;
    let mut size = config.input_size;
    let mut width = config.base_channels;
    let mut i = 0;
    while size > 4 {
        blocks.push(DiscBlock {
            conv: Conv2d::new(&mut store, &mut rng, &format!("block{i}.conv"), ch, width, 3, 2, 1),
            temb_proj: Linear::new(&mut store, &mut rng, &format!("block{i}.temb"), tdim, width, true),
            norm: GroupNorm::new(&mut store, &format!("block{i}.norm"), width),
        });
        ch = width;
        width *= 2;
        size /= 2;
        i += 1;
    }
    let head = Linear::new(&mut store, &mut rng, "head", ch, 1, true);
    Ok(Discriminator { config: config.clone(), store, temb, blocks, head })
}

impl Discriminator {
    /// Record logits `(B,)` for a pair-state batch at per-element timesteps.
    pub fn logits_nodes(&self, tape: &mut Tape, state: NodeId, ts: &[usize]) -> NodeId {
        let store = &self.store;
        let temb = self.temb.forward(tape, store, ts);
        let mut h = state;
        for block in &self.blocks {
            h = block.conv.forward(tape, store, h);
            let te = tape.silu(temb);
            let te = block.temb_proj.forward(tape, store, te);
            h = tape.add_channel_bias(h, te);
            h = block.norm.forward(tape, store, h);
            h = tape.silu(h);
        }
        let pooled = tape.global_avg_pool(h);
        let logit = self.head.forward(tape, store, pooled);
        let b = ts.len();
        tape.reshape(logit, &[b])
    }

    /// Probability that each pair is real, strictly inside (0, 1).
    pub fn prob(&self, state: &Array4<f64>, ts: &[usize]) -> Result<Array1<f64>> {
        if state.dim().0 != ts.len() {
            return Err(Error::invalid("one timestep per batch element"));
        }
        let mut tape = Tape::inference();
        let s = tape.constant4(state.clone());
        let logits = self.logits_nodes(&mut tape, s, ts);
        let p = tape.sigmoid(logits);
        Ok(tape
            .value(p)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned())
    }
}

/// Discriminator BCE on a real batch (target 1) and a detached fake batch
/// (target 0), averaged evenly across the two halves.
pub fn discriminator_loss_node(
    disc: &Discriminator,
    tape: &mut Tape,
    real: NodeId,
    fake: NodeId,
    ts: &[usize],
) -> NodeId {
    let b = ts.len();
    let real_logits = disc.logits_nodes(tape, real, ts);
    let fake_logits = disc.logits_nodes(tape, fake, ts);
    let ones = ArrayD::from_elem(ndarray::IxDyn(&[b]), 1.0);
    let zeros = ArrayD::zeros(ndarray::IxDyn(&[b]));
    let lr = tape.bce_with_logits(real_logits, &ones);
    let lf = tape.bce_with_logits(fake_logits, &zeros);
    let sum = tape.add(lr, lf);
    tape.affine(sum, 0.5, 0.0)
}

/// One optimization step of the discriminator on real/fake pair batches at
/// the same timesteps; the fake batch enters detached, so gradients flow
/// only into discriminator parameters. Returns `loss_d`.
pub fn discriminator_step(
    disc: &mut Discriminator,
    opt: &mut Adam,
    real_pair_tminus1: &Array4<f64>,
    fake_pair_tminus1: &Array4<f64>,
    ts: &[usize],
) -> Result<f64> {
    if real_pair_tminus1.dim().0 == 0 {
        return Err(Error::invalid("empty real batch"));
    }
    if real_pair_tminus1.dim() != fake_pair_tminus1.dim() {
        return Err(Error::shape(format!(
            "real {:?} vs fake {:?}",
            real_pair_tminus1.dim(),
            fake_pair_tminus1.dim()
        )));
    }
    if ts.len() != real_pair_tminus1.dim().0 {
        return Err(Error::invalid(
            "timestep mismatch between real and fake batches",
        ));
    }
    let mut tape = Tape::new();
    let real = tape.constant4(real_pair_tminus1.clone());
    let fake = tape.constant4(fake_pair_tminus1.clone());
    let loss = discriminator_loss_node(disc, &mut tape, real, fake, ts);
    let value = tape.scalar(loss);
    tape.backward(loss);
    disc.store.zero_grads();
    tape.accumulate_param_grads(&mut disc.store);
    opt.step(&mut disc.store);
    Ok(value)
}

/// Non-saturating generator objective: BCE of the discriminator's output on
/// fakes against target 1. `fake` may be graph-connected to the generator;
/// the discriminator is held frozen by simply not stepping its parameters.
pub fn generator_adversarial_loss_node(
    disc: &Discriminator,
    tape: &mut Tape,
    fake: NodeId,
    ts: &[usize],
) -> NodeId {
    let logits = disc.logits_nodes(tape, fake, ts);
    let ones = ArrayD::from_elem(ndarray::IxDyn(&[ts.len()]), 1.0);
    tape.bce_with_logits(logits, &ones)
}

/// Evaluate the generator adversarial loss on a plain batch.
pub fn generator_adversarial_loss(
    disc: &Discriminator,
    fake_pair_tminus1: &Array4<f64>,
    ts: &[usize],
) -> Result<f64> {
    if ts.len() != fake_pair_tminus1.dim().0 {
        return Err(Error::invalid("one timestep per batch element"));
    }
    let mut tape = Tape::new();
    let fake = tape.constant4(fake_pair_tminus1.clone());
    let loss = generator_adversarial_loss_node(disc, &mut tape, fake, ts);
    Ok(tape.scalar(loss))
}

/// The generator's total objective: diffusion MSE plus the weighted
/// adversarial term.
pub fn combine_losses(mse: f64, adversarial: f64, adv_weight: f64) -> f64 {
    mse + adv_weight * adversarial
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(t_total: usize, sigma: f64, alpha: f64, i0: usize) -> DiscriminatorSchedule {
        DiscriminatorSchedule {
            t_total,
            sigma,
            alpha_epochs: alpha,
            i0,
            priority_until_epoch: 500,
        }
    }

    #[test]
    fn t_max_formula_oracle_values() {
        assert_eq!(sched(1000, 20.0, 10.0, 50).t_max(0), 50);
        assert_eq!(sched(1000, 10.0, 5.0, 50).t_max(100), 250);
        assert_eq!(sched(1000, 10.0, 5.0, 50).t_max(10_000_000), 1000);
    }

    #[test]
    fn t_max_monotone_and_capped() {
        let s = sched(200, 7.0, 3.0, 5);
        let mut prev = 0;
        for e in 0..2000 {
            let t = s.t_max(e);
            assert!(t >= prev, "non-decreasing");
            assert!(t <= 200);
            prev = t;
        }
        // reaches T for all s >= alpha (T - i0) / sigma
        let cross = (s.alpha_epochs * (200.0 - 5.0) / s.sigma).ceil() as usize;
        assert_eq!(s.t_max(cross), 200);
    }

    #[test]
    fn uniform_sampling_after_priority_cutoff() {
        let s = sched(4, 1.0, 1.0, 4);
        let mut rng = rng::derive(5, Stream::Timesteps, 0);
        let n = 100_000;
        let draws = sample_timesteps(n, 600, &s, &mut rng);
        let mut counts = [0usize; 5];
        for d in draws {
            assert!((1..=4).contains(&d));
            counts[d] += 1;
        }
        for t in 1..=4 {
            let f = counts[t] as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "t={t}: {f}");
        }
    }

    #[test]
    fn degenerate_t_max_one() {
        let s = sched(1000, 0.0, 1.0, 1);
        let mut rng = rng::derive(6, Stream::Timesteps, 0);
        assert!(sample_timesteps(64, 0, &s, &mut rng).iter().all(|&t| t == 1));
    }

    #[test]
    fn priority_sampling_concentrates_on_top_quarter() {
        let s = sched(100, 0.0, 1.0, 100);
        let mut rng = rng::derive(7, Stream::Timesteps, 0);
        let n = 100_000;
        let draws = sample_timesteps(n, 10, &s, &mut rng);
        let top = draws.iter().filter(|&&t| (76..=100).contains(&t)).count();
        assert!(top as f64 / n as f64 >= 0.5, "top mass {}", top as f64 / n as f64);
        assert!(draws.iter().all(|&t| (1..=100).contains(&t)));
    }

    fn tiny_disc(seed: u64) -> Discriminator {
        build_discriminator(
            &DiscriminatorConfig {
                in_channels: 4,
                base_channels: 8,
                input_size: 8,
                time_embed_dim: 8,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn output_strictly_inside_unit_interval() {
        let disc = tiny_disc(1);
        let mut rng = rng::derive(2, Stream::DiffusionNoise, 70);
        for scale in [1.0, 1e3] {
            let state = rng::randn::<ndarray::Ix4, _>(&mut rng, (3, 4, 8, 8)) * scale;
            let p = disc.prob(&state, &[1, 50, 999]).unwrap();
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0), "{p:?}");
        }
    }

    #[test]
    fn indifferent_discriminator_scores_ln2() {
        let mut disc = tiny_disc(3);
        // zero the head so every logit is exactly 0 -> p = 0.5
        let w = disc.store.id_by_name("head.w").unwrap();
        disc.store.value_mut(w).fill(0.0);
        let b = disc.store.id_by_name("head.b").unwrap();
        disc.store.value_mut(b).fill(0.0);
        let mut rng = rng::derive(4, Stream::DiffusionNoise, 71);
        let real = rng::randn::<ndarray::Ix4, _>(&mut rng, (4, 4, 8, 8));
        let fake = rng::randn::<ndarray::Ix4, _>(&mut rng, (4, 4, 8, 8));
        let ts = [3usize, 9, 27, 81];
        let mut tape = Tape::new();
        let r = tape.constant4(real.clone());
        let f = tape.constant4(fake.clone());
        let ld = discriminator_loss_node(&disc, &mut tape, r, f, &ts);
        assert!((tape.scalar(ld) - std::f64::consts::LN_2).abs() < 1e-12);
        let lg = generator_adversarial_loss(&disc, &fake, &ts).unwrap();
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn one_step_decreases_loss_on_fixed_batch() {
        let mut disc = tiny_disc(5);
        let mut rng = rng::derive(6, Stream::DiffusionNoise, 72);
        let real = rng::randn::<ndarray::Ix4, _>(&mut rng, (8, 4, 8, 8)) * 0.3;
        let fake = rng::randn::<ndarray::Ix4, _>(&mut rng, (8, 4, 8, 8)) * 0.3 + 0.5;
        let ts = vec![5usize; 8];
        let mut opt = Adam::new(&disc.store, 1e-3);
        let l0 = discriminator_step(&mut disc, &mut opt, &real, &fake, &ts).unwrap();
        let l1 = discriminator_step(&mut disc, &mut opt, &real, &fake, &ts).unwrap();
        assert!(l1 < l0, "descent: {l1} !< {l0}");
    }

    #[test]
    fn rejects_empty_and_mismatched_batches() {
        let mut disc = tiny_disc(7);
        let mut opt = Adam::new(&disc.store, 1e-3);
        let empty = Array4::<f64>::zeros((0, 4, 8, 8));
        let some = Array4::<f64>::zeros((2, 4, 8, 8));
        assert!(discriminator_step(&mut disc, &mut opt, &empty, &empty, &[]).is_err());
        let other = Array4::<f64>::zeros((3, 4, 8, 8));
        assert!(discriminator_step(&mut disc, &mut opt, &some, &other, &[1, 2]).is_err());
        assert!(discriminator_step(&mut disc, &mut opt, &some, &some, &[1]).is_err());
    }

    #[test]
    fn combined_loss_weighted_sum() {
        assert!((combine_losses(0.4, 0.8, 0.25) - 0.6).abs() < 1e-15);
    }
}
