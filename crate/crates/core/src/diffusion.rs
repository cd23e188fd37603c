//! Noise schedules, the forward corruption process, and the DDPM/DDIM
//! reverse samplers. Everything here is network-agnostic: samplers see the
//! model only through [`NoisePredictor`].
//!
//! Timestep convention: `t` runs over `[1, T]` externally while the schedule
//! arrays are zero-based internally, and `alpha_bar(0) == 1` so that step
//! `t=0` denotes the clean signal.

use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use ndarray::{Array, Array4, Array1, Dimension};
use rand::Rng;
use rand_distr::StandardNormal;

/// Per-step noise variances and their cumulative products for a `T`-step
/// diffusion. Immutable once built and freely shareable.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Array1<f64>,
    alphas: Array1<f64>,
    alpha_bars: Array1<f64>,
}

impl NoiseSchedule {
    /// Linear `beta` ramp from `beta_start` to `beta_end` over `t_steps`.
    pub fn linear(t_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(beta_start > 0.0) || beta_end < beta_start {
            return Err(Error::invalid(format!(
                "beta range must satisfy 0 < start <= end, got [{beta_start}, {beta_end}]"
            )));
        }
        if beta_end >= 1.0 {
            return Err(Error::invalid(format!("beta_end must be < 1, got {beta_end}")));
        }
        let betas = if t_steps == 1 {
            Array1::from_elem(1, beta_start)
        } else {
            Array1::linspace(beta_start, beta_end, t_steps)
        };
        let alphas = betas.mapv(|b| 1.0 - b);
        let mut alpha_bars = alphas.clone();
        let mut prod = 1.0;
        for v in alpha_bars.iter_mut() {
            prod *= *v;
            *v = prod;
        }
        Ok(NoiseSchedule { betas, alphas, alpha_bars })
    }

    /// Total number of steps `T`.
    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// `beta_t` for `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t` for `t` in `[1, T]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product of alphas for `t` in `[0, T]`, with
    /// `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    pub fn betas(&self) -> &Array1<f64> {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &Array1<f64> {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t < 1 || t > self.len() {
            return Err(Error::invalid(format!(
                "timestep {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }
}

fn check_shapes<D: Dimension>(a: &Array<f64, D>, b: &Array<f64, D>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// One step of the forward chain:
/// `x_t = sqrt(1 - beta_t) * x_{t-1} + sqrt(beta_t) * noise`.
pub fn forward_diffuse_step<D: Dimension>(
    x_prev: &Array<f64, D>,
    t: usize,
    noise: &Array<f64, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_t(t)?;
    check_shapes(x_prev, noise, "forward_diffuse_step")?;
    let b = sched.beta(t);
    Ok(x_prev * (1.0 - b).sqrt() + noise * b.sqrt())
}

/// Closed form of the forward chain from the clean signal:
/// `x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise`.
/// Accepts `t = 0` (returns `x0` exactly).
pub fn forward_diffuse<D: Dimension>(
    x0: &Array<f64, D>,
    t: usize,
    noise: &Array<f64, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    if t > sched.len() {
        return Err(Error::invalid(format!(
            "timestep {t} outside [0, {}]",
            sched.len()
        )));
    }
    check_shapes(x0, noise, "forward_diffuse")?;
    let ab = sched.alpha_bar(t);
    Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
}

/// DDPM reverse step with posterior variance `sigma_t^2 = beta_t`:
/// `(1/sqrt(alpha_t)) * (x_t - beta_t/sqrt(1 - alpha_bar_t) * eps) + sigma_t * z`.
///
/// `fresh_noise` must be zero at `t = 1`; the final step is deterministic.
pub fn ddpm_reverse_step<D: Dimension>(
    eps_pred: &Array<f64, D>,
    x_t: &Array<f64, D>,
    t: usize,
    fresh_noise: &Array<f64, D>,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_t(t)?;
    check_shapes(eps_pred, x_t, "ddpm_reverse_step eps/x")?;
    check_shapes(fresh_noise, x_t, "ddpm_reverse_step noise/x")?;
    if t == 1 && fresh_noise.iter().any(|&v| v != 0.0) {
        return Err(Error::invalid("fresh_noise must be zero at t = 1"));
    }
    let beta = sched.beta(t);
    let alpha = sched.alpha(t);
    let ab_t = sched.alpha_bar(t);
    let mean = (x_t - &(eps_pred * (beta / (1.0 - ab_t).sqrt()))) / alpha.sqrt();
    let sigma = if t == 1 { 0.0 } else { beta.sqrt() };
    Ok(mean + fresh_noise * sigma)
}

/// Deterministic DDIM step (`eta = 0`) from `t` to `t_prev < t`.
/// Predicts `x0_hat` and re-noises it to level `t_prev`; `t_prev = 0`
/// returns `x0_hat` itself.
pub fn ddim_reverse_step<D: Dimension>(
    eps_pred: &Array<f64, D>,
    x_t: &Array<f64, D>,
    t: usize,
    t_prev: usize,
    sched: &NoiseSchedule,
) -> Result<Array<f64, D>> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(Error::invalid(format!("t_prev {t_prev} must be < t {t}")));
    }
    check_shapes(eps_pred, x_t, "ddim_reverse_step")?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let x0_hat = (x_t - &(eps_pred * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    Ok(&x0_hat * ab_prev.sqrt() + eps_pred * (1.0 - ab_prev).sqrt())
}

/// Strided DDPM step over a coarse sub-chain, with the coarse analogue of
/// `sigma_t^2 = beta_t`: `sigma^2 = 1 - alpha_bar_t / alpha_bar_prev`.
/// Reduces exactly to [`ddpm_reverse_step`] semantics when the stride is 1.
fn ddpm_strided_step(
    eps_pred: &Array4<f64>,
    x_t: &Array4<f64>,
    t: usize,
    t_prev: usize,
    fresh_noise: &Array4<f64>,
    sched: &NoiseSchedule,
) -> Result<Array4<f64>> {
    sched.check_t(t)?;
    let ab_t = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t_prev);
    let sigma2 = (1.0 - ab_t / ab_prev).max(0.0);
    let sigma2 = sigma2.min(1.0 - ab_prev);
    let x0_hat = (x_t - &(eps_pred * (1.0 - ab_t).sqrt())) / ab_t.sqrt();
    let dir = (1.0 - ab_prev - sigma2).max(0.0).sqrt();
    let sigma = if t_prev == 0 { 0.0 } else { sigma2.sqrt() };
    Ok(&x0_hat * ab_prev.sqrt() + eps_pred * dir + fresh_noise * sigma)
}

/// Sampler mode for [`sample_loop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleMode {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SampleMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SampleMode::Ddpm),
            "ddim" => Ok(SampleMode::Ddim),
            other => Err(Error::invalid(format!("unknown sampler mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for SampleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SampleMode::Ddpm => write!(f, "ddpm"),
            SampleMode::Ddim => write!(f, "ddim"),
        }
    }
}

/// A trained noise predictor: given the state batch at level `t`, predict
/// the noise that produced it. Implementations must be pure so samplers can
/// be seeded externally.
pub trait NoisePredictor {
    /// Per-sample state shape `(channels, height, width)`.
    fn state_shape(&self) -> (usize, usize, usize);
    /// Predict noise for a batch at a uniform timestep `t` in `[1, T]`.
    fn predict(&self, x_t: &Array4<f64>, t: usize) -> Array4<f64>;
}

/// Evenly spaced increasing timestep subsequence of `[1, T]` with both
/// endpoints included; `steps == T` yields every step.
pub fn ddim_timesteps(t_total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 1 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if steps > t_total {
        return Err(Error::invalid(format!(
            "steps {steps} exceeds schedule length {t_total}"
        )));
    }
    if steps == 1 {
        return Ok(vec![t_total]);
    }
    let span = (t_total - 1) as f64 / (steps - 1) as f64;
    Ok((0..steps)
        .map(|i| (1.0 + span * i as f64).round() as usize)
        .collect())
}

/// Iteratively denoise from a standard-normal start state.
///
/// Noise draw order is part of the contract (tests replay it): the start
/// state is drawn first in row-major order, then one fresh-noise batch per
/// DDPM step for `t > 1`. DDIM draws only the start state, so equal seeds
/// give bit-identical outputs. Output stays in model space; callers rescale
/// to `[0, 1]`.
pub fn sample_loop(
    model: &dyn NoisePredictor,
    sched: &NoiseSchedule,
    mode: SampleMode,
    steps: usize,
    seed: u64,
    batch: usize,
) -> Result<Array4<f64>> {
    if batch == 0 {
        return Err(Error::invalid("batch must be >= 1"));
    }
    let t_total = sched.len();
    if steps < 1 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    if steps > t_total {
        return Err(Error::invalid(format!(
            "steps {steps} exceeds schedule length {t_total}"
        )));
    }
    let (c, h, w) = model.state_shape();
    let mut rng = rng::derive(seed, Stream::Sampler, 0);
    let mut x: Array4<f64> = rng::randn(&mut rng, (batch, c, h, w));

    match mode {
        SampleMode::Ddim => {
            let mut ts = ddim_timesteps(t_total, steps)?;
            ts.reverse();
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
                let eps = model.predict(&x, t);
                x = ddim_reverse_step(&eps, &x, t, t_prev, sched)?;
            }
        }
        SampleMode::Ddpm if steps == t_total => {
            for t in (1..=t_total).rev() {
                let eps = model.predict(&x, t);
                let noise = if t > 1 {
                    rng::randn(&mut rng, x.raw_dim())
                } else {
                    Array4::zeros(x.raw_dim())
                };
                x = ddpm_reverse_step(&eps, &x, t, &noise, sched)?;
            }
        }
        SampleMode::Ddpm => {
            let mut ts = ddim_timesteps(t_total, steps)?;
            ts.reverse();
            for (i, &t) in ts.iter().enumerate() {
                let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
                let eps = model.predict(&x, t);
                let noise = if t_prev > 0 {
                    rng::randn(&mut rng, x.raw_dim())
                } else {
                    Array4::zeros(x.raw_dim())
                };
                x = ddpm_strided_step(&eps, &x, t, t_prev, &noise, sched)?;
            }
        }
    }
    Ok(x)
}

/// Draw a standard-normal batch the way [`sample_loop`] draws its start
/// state; exposed so tests can replay the sampler's noise stream.
pub fn sampler_start_state(seed: u64, batch: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let mut rng = rng::derive(seed, Stream::Sampler, 0);
    rng::randn(&mut rng, (batch, c, h, w))
}

/// Standard-normal array drawn from an explicit RNG, matching the sampler's
/// per-step fresh-noise draws.
pub fn draw_noise_like(rng: &mut impl Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
    Array4::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}
