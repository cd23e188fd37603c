use pairgen::dataset::{self, make_toy_dataset};
use pairgen::diffusion::SampleMode;
use pairgen::superres::{self, SRConfig};
use pairgen::train::{train_sr, TrainConfig};
use std::time::Instant;

fn main() {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let steps_pe: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(0.0006);
    let infer_steps: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(25);
    let hi = make_toy_dataset(600, 32, 42);
    let sr_cfg = SRConfig {
        low_size: 16,
        high_size: 32,
        steps_train: 200,
        steps_infer: infer_steps,
        infer_mode: SampleMode::Ddim,
        beta_start: 1e-4,
        beta_end: 0.05,
        image_channels: 3,
        base_channels: 8,
        depth: 2,
        time_embed_dim: 16,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        lr,
        epochs,
        t_steps: 200,
        beta_start: 1e-4,
        beta_end: 0.05,
        adv_weight: 0.25,
        use_discriminator: false,
        crop_size: 32,
        train_size: 32,
        split_ratio: 0.8,
        seed: 42,
        steps_per_epoch: Some(steps_pe),
        checkpoint_every: Some(epochs),
        grad_clip: None,
        augment: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let (model, out) = train_sr(&hi, &sr_cfg, &cfg, dir.path()).unwrap();
    let train_time = t0.elapsed().as_secs_f64();

    let probe: Vec<_> = hi[..16].to_vec();
    let lows: Vec<_> = probe.iter().map(|p| dataset::downsample_pair(p, 2).unwrap()).collect();
    let t1 = Instant::now();
    let sr = superres::super_resolve(&model, &lows, 7).unwrap();
    let sr_time = t1.elapsed().as_secs_f64();
    let mut sr_mae = 0.0;
    let mut bil_mae = 0.0;
    let mut agree = 0.0;
    for ((gt, low), s) in probe.iter().zip(lows.iter()).zip(sr.iter()) {
        let up = superres::upsample_pair(low, 2).unwrap();
        sr_mae += dataset::image_mae(&s.image, &gt.image);
        bil_mae += dataset::image_mae(&up.image, &gt.image);
        agree += dataset::mask_agreement(&s.mask, &up.mask);
    }
    let n = probe.len() as f64;
    println!(
        "SR {epochs}x{steps_pe} lr={lr}: train {train_time:.1}s ({:.0} ms/step), val mse {:.4}->{:.4} | infer(ddim-{infer_steps}) {:.2}s/16 = {:.0} ms/pair | MAE sr {:.4} vs bilinear {:.4} | mask agree {:.3}",
        train_time * 1000.0 / (epochs * steps_pe) as f64,
        out.log.first().unwrap().val_mse,
        out.log.last().unwrap().val_mse,
        sr_time,
        sr_time * 1000.0 / n,
        sr_mae / n,
        bil_mae / n,
        agree / n
    );
}
