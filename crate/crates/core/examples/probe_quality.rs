use pairgen::adversarial::DiscriminatorSchedule;
use pairgen::dataset::{self, make_toy_dataset};
use pairgen::diffusion::{sample_loop, SampleMode};
use pairgen::generator::{PairedGeneratorConfig, SkipFusion, Variant};
use pairgen::train::{load_generator_checkpoint, train_paired, TrainConfig};
use std::time::Instant;

fn main() {
    let variant: String = std::env::args().nth(1).unwrap_or_else(|| "concat".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(20);
    let steps_pe: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let base: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(8);
    let blocks: usize = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(2);
    let t_steps: usize = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(200);
    let sample_mode: String = std::env::args().nth(7).unwrap_or_else(|| "ddim".into());
    let sample_steps: usize = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(50);
    let lr: f64 = std::env::args().nth(9).and_then(|s| s.parse().ok()).unwrap_or(0.00021);

    // high-res 32 scenes downsampled to 16 for the generator
    let hi = make_toy_dataset(600, 32, 42);
    let low: Vec<_> = hi.iter().map(|p| dataset::downsample_pair(p, 2).unwrap()).collect();

    let gen_cfg = PairedGeneratorConfig {
        variant: variant.parse::<Variant>().unwrap(),
        skip_fusion: SkipFusion::ScaleU,
        base_channels: base,
        depth: 2,
        attention_heads: 2,
        image_channels: 3,
        input_size: 16,
        time_embed_dim: 16,
        blocks_per_level: blocks,
    };
    let cfg = TrainConfig {
        batch_size: 16,
        lr,
        epochs,
        t_steps,
        beta_start: 1e-4,
        beta_end: 0.05,
        adv_weight: 0.25,
        use_discriminator: false,
        crop_size: 16,
        train_size: 16,
        split_ratio: 0.8,
        seed: 42,
        steps_per_epoch: Some(steps_pe),
        checkpoint_every: Some(epochs),
        grad_clip: None,
        augment: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = train_paired(&low, &gen_cfg, &DiscriminatorSchedule::default(), &cfg, dir.path(), None).unwrap();
    let train_time = t0.elapsed().as_secs_f64();
    let first = out.log.first().unwrap().train_mse;
    let last = out.log.last().unwrap().train_mse;

    let (gen, sched, _) = load_generator_checkpoint(&dir.path().join(format!("ckpt_{epochs}"))).unwrap();
    let t1 = Instant::now();
    let mode: SampleMode = sample_mode.parse().unwrap();
    let state = sample_loop(&gen, &sched, mode, sample_steps, 77, 64).unwrap();
    let sample_time = t1.elapsed().as_secs_f64();
    let gen_pairs = dataset::state_to_pairs(&state, "g_", 0.5);

    // training foreground-fraction percentile band
    let fracs: Vec<f64> = low.iter().map(|p| p.foreground_fraction()).collect();
    let lo = dataset::percentile(&fracs, 5.0);
    let hi_p = dataset::percentile(&fracs, 95.0);
    let mut in_band = 0;
    let mut coherent = 0;
    for p in &gen_pairs {
        let f = p.foreground_fraction();
        if f >= lo && f <= hi_p {
            in_band += 1;
        }
        if let Some((inside, outside)) = p.intensity_split() {
            if inside > outside {
                coherent += 1;
            }
        }
    }
    let mut gfracs: Vec<f64> = gen_pairs.iter().map(|p| p.foreground_fraction()).collect();
    gfracs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let below = gfracs.iter().filter(|&&f| f < lo).count();
    let above = gfracs.iter().filter(|&&f| f > hi_p).count();
    println!(
        "  gen fracs: min {:.3} p25 {:.3} med {:.3} p75 {:.3} max {:.3} | below {below} above {above}",
        gfracs[0], gfracs[16], gfracs[32], gfracs[48], gfracs[63]
    );
    println!(
        "{variant} base={base} blocks={blocks} T={t_steps} {epochs}x{steps_pe} steps: train {train_time:.1}s mse {first:.3}->{last:.3} ({:.0}% drop) | sample({sample_mode}-{sample_steps}) {sample_time:.1}s | band[{lo:.3},{hi_p:.3}] hit {in_band}/64 | coherent {coherent}/64",
        100.0 * (1.0 - last / first)
    );
}
