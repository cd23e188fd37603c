use ndarray::Axis;
use pairgen::dataset::{self, make_toy_dataset};
use pairgen::diffusion::{ddim_reverse_step, ddim_timesteps, forward_diffuse, SampleMode};
use pairgen::rng::{self, Stream};
use pairgen::superres::{self, SRConfig};
use pairgen::train::{train_sr, TrainConfig};

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let hi = make_toy_dataset(600, 32, 42);
    let sr_cfg = SRConfig {
        low_size: 16, high_size: 32, steps_train: 200, steps_infer: 50,
        infer_mode: SampleMode::Ddim, beta_start: 1e-4, beta_end: 0.05,
        image_channels: 3, base_channels: 8, depth: 2, time_embed_dim: 16,
    };
    let cfg = TrainConfig {
        batch_size: 16, lr: 0.001, epochs, t_steps: 200, beta_start: 1e-4, beta_end: 0.05,
        adv_weight: 0.25, use_discriminator: false, crop_size: 32, train_size: 32,
        split_ratio: 0.8, seed: 42, steps_per_epoch: Some(30), checkpoint_every: Some(epochs),
        grad_clip: None, augment: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let (model, _) = train_sr(&hi, &sr_cfg, &cfg, dir.path()).unwrap();

    let probe: Vec<_> = hi[..4].to_vec();
    let lows: Vec<_> = probe.iter().map(|p| dataset::downsample_pair(p, 2).unwrap()).collect();
    let low_refs: Vec<_> = lows.iter().collect();
    let refs: Vec<_> = probe.iter().collect();
    let state0 = dataset::pairs_to_state(&refs);
    let sched = model.schedule.clone();

    // per-t eps error
    let mut rng = rng::derive(9, Stream::DiffusionNoise, 99);
    for t in [10usize, 50, 100, 150, 200] {
        let eps = rng::randn::<ndarray::Ix4, _>(&mut rng, state0.raw_dim());
        let x_t = forward_diffuse(&state0, t, &eps, &sched).unwrap();
        let pred = model.sr_forward(&x_t, &vec![t; 4], &low_refs).unwrap();
        let mse = pred.iter().zip(eps.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64;
        println!("t={t}: eps mse {mse:.4}");
    }

    // DDIM reconstruction from partially noised GT at t0
    for t0 in [60usize, 120, 200] {
        let eps = rng::randn::<ndarray::Ix4, _>(&mut rng, state0.raw_dim());
        let mut x = forward_diffuse(&state0, t0, &eps, &sched).unwrap();
        let ts: Vec<usize> = ddim_timesteps(200, 50).unwrap().into_iter().filter(|&t| t <= t0).rev().collect();
        for (i, &t) in ts.iter().enumerate() {
            let t_prev = if i + 1 < ts.len() { ts[i + 1] } else { 0 };
            let pred = model.sr_forward(&x, &vec![t; 4], &low_refs).unwrap();
            x = ddim_reverse_step(&pred, &x, t, t_prev, &sched).unwrap();
        }
        let mae = x.iter().zip(state0.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64;
        // also mask agreement after binarizing
        let c = 3;
        let mut agree = 0usize;
        let mut total = 0usize;
        for bi in 0..4 {
            let m = x.index_axis(Axis(0), bi);
            let m = m.index_axis(Axis(0), c);
            let g = state0.index_axis(Axis(0), bi);
            let g = g.index_axis(Axis(0), c);
            for (a, b) in m.iter().zip(g.iter()) {
                if (*a >= 0.0) == (*b >= 0.0) { agree += 1; }
                total += 1;
            }
        }
        println!("recon from t0={t0}: MAE(state) {mae:.4}, mask sign agree {:.3}", agree as f64 / total as f64);
    }
}
