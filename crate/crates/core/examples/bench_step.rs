use pairgen::adversarial::DiscriminatorSchedule;
use pairgen::dataset::make_toy_dataset;
use pairgen::generator::{PairedGeneratorConfig, SkipFusion, Variant};
use pairgen::train::{train_paired, TrainConfig};
use std::time::Instant;

fn main() {
    let variant: String = std::env::args().nth(1).unwrap_or_else(|| "concat".into());
    let steps: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let base: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(8);
    let batch: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let pairs = make_toy_dataset(100, 16, 1);
    let gen_cfg = PairedGeneratorConfig {
        variant: variant.parse::<Variant>().unwrap(),
        skip_fusion: SkipFusion::ScaleU,
        base_channels: base,
        depth: 2,
        attention_heads: 2,
        image_channels: 3,
        input_size: 16,
        time_embed_dim: 16,
        blocks_per_level: 2,
    };
    let cfg = TrainConfig {
        batch_size: batch,
        lr: 0.00021,
        epochs: 1,
        t_steps: 200,
        beta_start: 1e-4,
        beta_end: 0.05,
        adv_weight: 0.25,
        use_discriminator: std::env::args().nth(5).as_deref() == Some("disc"),
        crop_size: 16,
        train_size: 16,
        split_ratio: 0.8,
        seed: 1,
        steps_per_epoch: Some(steps),
        checkpoint_every: Some(1000),
        grad_clip: None,
        augment: true,
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = train_paired(&pairs, &gen_cfg, &DiscriminatorSchedule::default(), &cfg, dir.path(), None).unwrap();
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "{variant} base={base} batch={batch} steps={steps}: {:.2}s total, {:.1} ms/step, mse {:.4}",
        dt,
        dt * 1000.0 / steps as f64,
        out.log[0].train_mse
    );
}
