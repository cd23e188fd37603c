//! Checkpoint scoring and selection. Generated images are compared to the
//! training set through per-channel RGB histograms and the mean
//! Jensen-Shannon divergence (natural log, so values live in [0, ln 2]).

use crate::checkpoint::{self, CheckpointRecord};
use crate::dataset::ImageMaskPair;
use crate::diffusion::{sample_loop, SampleMode};
use crate::error::{Error, Result};
use crate::train::load_generator_checkpoint;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-channel probability vectors over `bins` equal-width cells of
/// `[0, 1]`; bin `b` covers `[b/bins, (b+1)/bins)` and the last bin is
/// closed at 1.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RGBHistogram {
    pub bins: usize,
    pub channels: [Vec<f64>; 3],
}

impl RGBHistogram {
    pub fn validate(&self) -> Result<()> {
        for ch in &self.channels {
            if ch.len() != self.bins {
                return Err(Error::invalid("histogram length disagrees with bins"));
            }
            let sum: f64 = ch.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || ch.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid("histogram channels must be distributions"));
            }
        }
        Ok(())
    }
}

/// Normalized per-channel histogram over all pixels of all images.
pub fn rgb_histogram(images: &[&Array3<f64>], bins: usize) -> Result<RGBHistogram> {
    if images.is_empty() {
        return Err(Error::Dataset("histogram of an empty image set".into()));
    }
    if bins < 2 {
        return Err(Error::invalid("bins must be >= 2"));
    }
    let mut counts = [vec![0u64; bins], vec![0u64; bins], vec![0u64; bins]];
    let mut total = 0u64;
    for img in images {
        let (h, w, c) = img.dim();
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    let v = img[[y, x, ch]];
                    if !(0.0..=1.0).contains(&v) {
                        return Err(Error::invalid(format!("pixel {v} outside [0, 1]")));
                    }
                    let b = ((v * bins as f64) as usize).min(bins - 1);
                    counts[ch][b] += 1;
                }
            }
        }
        total += (h * w) as u64;
    }
    let channels = counts.map(|ch| ch.into_iter().map(|n| n as f64 / total as f64).collect());
    Ok(RGBHistogram { bins, channels })
}

/// Jensen-Shannon divergence with natural log; `0 log(0/x) := 0`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::invalid(format!(
            "length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.iter().chain(q.iter()).any(|&v| v < 0.0) {
        return Err(Error::invalid("probability vectors must be non-negative"));
    }
    let check = |v: &[f64]| -> Result<()> {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("vector sums to {s}, expected 1")));
        }
        Ok(())
    };
    check(p)?;
    check(q)?;
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q.iter()) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            acc += 0.5 * b * (b / m).ln();
        }
    }
    Ok(acc.max(0.0))
}

/// Mean of the three per-channel divergences.
pub fn mean_rgb_jsd(a: &RGBHistogram, b: &RGBHistogram) -> Result<f64> {
    if a.bins != b.bins {
        return Err(Error::invalid("histograms use different bin counts"));
    }
    let mut acc = 0.0;
    for ch in 0..3 {
        acc += js_divergence(&a.channels[ch], &b.channels[ch])?;
    }
    Ok(acc / 3.0)
}

/// Sampler settings used when scoring a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreSamplerConfig {
    pub mode: SampleMode,
    pub steps: usize,
    pub seed: u64,
    pub bins: usize,
    pub n_samples: usize,
}

impl Default for ScoreSamplerConfig {
    fn default() -> Self {
        ScoreSamplerConfig {
            mode: SampleMode::Ddpm,
            steps: 0, // 0 means the full schedule
            seed: 0,
            bins: 256,
            n_samples: 64,
        }
    }
}

/// Generate `n_samples` pairs from a checkpoint, histogram their images,
/// and return the mean JSD against the training histogram. The result is
/// stored back into the checkpoint manifest as `mean_jsd`.
pub fn score_checkpoint(
    ckpt_dir: &Path,
    train_hist: &RGBHistogram,
    cfg: &ScoreSamplerConfig,
) -> Result<f64> {
    let (gen, sched, mut manifest) = load_generator_checkpoint(ckpt_dir)?;
    let steps = if cfg.steps == 0 { sched.len() } else { cfg.steps };
    let state = sample_loop(&gen, &sched, cfg.mode, steps, cfg.seed, cfg.n_samples)?;
    let pairs = crate::dataset::state_to_pairs(&state, "score_", 0.5);
    let images: Vec<&Array3<f64>> = pairs.iter().map(|p| &p.image).collect();
    let hist = rgb_histogram(&images, cfg.bins)?;
    let score = mean_rgb_jsd(train_hist, &hist)?;
    manifest.mean_jsd = Some(score);
    checkpoint::write_manifest(ckpt_dir, &manifest)?;
    Ok(score)
}

/// Histogram of a pair set's images.
pub fn dataset_histogram(pairs: &[ImageMaskPair], bins: usize) -> Result<RGBHistogram> {
    let images: Vec<&Array3<f64>> = pairs.iter().map(|p| &p.image).collect();
    rgb_histogram(&images, bins)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    BestValLoss,
    FinalEpoch,
    MinMeanJsd,
}

impl std::str::FromStr for SelectionStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "best_val_loss" => Ok(SelectionStrategy::BestValLoss),
            "final_epoch" => Ok(SelectionStrategy::FinalEpoch),
            "min_mean_jsd" => Ok(SelectionStrategy::MinMeanJsd),
            other => Err(Error::invalid(format!("unknown strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SelectionStrategy::BestValLoss => "best_val_loss",
            SelectionStrategy::FinalEpoch => "final_epoch",
            SelectionStrategy::MinMeanJsd => "min_mean_jsd",
        };
        write!(f, "{s}")
    }
}

/// Pick a checkpoint: argmin of the strategy's metric (or max epoch for
/// the final-epoch strategy), ties broken by the earliest epoch.
pub fn select_weights(
    records: &[CheckpointRecord],
    strategy: SelectionStrategy,
) -> Result<CheckpointRecord> {
    if records.is_empty() {
        return Err(Error::invalid("no checkpoints to select from"));
    }
    let mut sorted: Vec<&CheckpointRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.epoch);
    match strategy {
        SelectionStrategy::FinalEpoch => Ok((*sorted.last().unwrap()).clone()),
        SelectionStrategy::BestValLoss => {
            let mut best = sorted[0];
            for r in &sorted[1..] {
                if r.val_loss < best.val_loss {
                    best = r;
                }
            }
            Ok(best.clone())
        }
        SelectionStrategy::MinMeanJsd => {
            let mut best: Option<&CheckpointRecord> = None;
            for r in &sorted {
                let score = r.mean_jsd.ok_or_else(|| {
                    Error::invalid(format!("checkpoint epoch {} has no mean_jsd", r.epoch))
                })?;
                match best {
                    None => best = Some(r),
                    Some(b) => {
                        if score < b.mean_jsd.unwrap() {
                            best = Some(r);
                        }
                    }
                }
            }
            Ok(best.unwrap().clone())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rec(epoch: usize, val: f64, jsd: Option<f64>) -> CheckpointRecord {
        CheckpointRecord {
            epoch,
            weights_uri: PathBuf::from(format!("ckpt_{epoch}/weights.bin")),
            val_loss: val,
            mean_jsd: jsd,
        }
    }

    #[test]
    fn histogram_one_hot_for_black_images() {
        let img = Array3::<f64>::zeros((4, 4, 3));
        let h = rgb_histogram(&[&img], 8).unwrap();
        for ch in &h.channels {
            assert_eq!(ch[0], 1.0);
            assert!(ch[1..].iter().all(|&v| v == 0.0));
        }
        h.validate().unwrap();
    }

    #[test]
    fn histogram_splits_extremes_evenly() {
        let mut img = Array3::<f64>::zeros((2, 2, 3));
        img[[0, 0, 0]] = 1.0;
        img[[0, 1, 0]] = 1.0;
        for ch in 1..3 {
            img[[0, 0, ch]] = 1.0;
            img[[0, 1, ch]] = 1.0;
        }
        let h = rgb_histogram(&[&img], 2).unwrap();
        for ch in &h.channels {
            assert_eq!(ch, &vec![0.5, 0.5]);
        }
    }

    #[test]
    fn histogram_ramp_uniform_over_bins() {
        // 256 pixels ramping 0..1 fill 4 bins evenly
        let mut img = Array3::<f64>::zeros((16, 16, 3));
        for i in 0..256 {
            let v = i as f64 / 255.0;
            for ch in 0..3 {
                img[[i / 16, i % 16, ch]] = v;
            }
        }
        let h = rgb_histogram(&[&img], 4).unwrap();
        for ch in &h.channels {
            for &v in ch {
                assert!((v - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn histogram_rejects_empty_and_is_permutation_invariant() {
        assert!(rgb_histogram(&[], 4).is_err());
        let a = Array3::<f64>::from_elem((2, 2, 3), 0.2);
        let b = Array3::<f64>::from_elem((2, 2, 3), 0.7);
        let h1 = rgb_histogram(&[&a, &b], 16).unwrap();
        let h2 = rgb_histogram(&[&b, &a], 16).unwrap();
        for ch in 0..3 {
            assert_eq!(h1.channels[ch], h2.channels[ch]);
        }
    }

    #[test]
    fn jsd_identity_symmetry_disjoint() {
        let p = vec![0.25, 0.25, 0.5];
        assert_eq!(js_divergence(&p, &p).unwrap(), 0.0);
        let a = vec![1.0, 0.0];
        let b = vec![0.0, 1.0];
        assert!((js_divergence(&a, &b).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let q = vec![0.7, 0.1, 0.2];
        let d1 = js_divergence(&p, &q).unwrap();
        let d2 = js_divergence(&q, &p).unwrap();
        assert!((d1 - d2).abs() < 1e-15);
        assert!(d1 > 0.0 && d1 <= std::f64::consts::LN_2 + 1e-12);
        assert!(js_divergence(&p, &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[-0.1, 1.1], &[0.5, 0.5]).is_err());
        assert!(js_divergence(&[0.4, 0.4], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn near_disjoint_histograms_approach_ln2() {
        // all-black generation against data with no mass near 0
        let black = RGBHistogram {
            bins: 4,
            channels: [
                vec![1.0, 0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0],
                vec![1.0, 0.0, 0.0, 0.0],
            ],
        };
        let bright = RGBHistogram {
            bins: 4,
            channels: [
                vec![0.0, 0.1, 0.6, 0.3],
                vec![0.0, 0.2, 0.5, 0.3],
                vec![0.0, 0.3, 0.4, 0.3],
            ],
        };
        let d = mean_rgb_jsd(&black, &bright).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn selection_strategies_and_tie_breaks() {
        let one = [rec(3, 0.5, Some(0.2))];
        for s in [
            SelectionStrategy::BestValLoss,
            SelectionStrategy::FinalEpoch,
            SelectionStrategy::MinMeanJsd,
        ] {
            assert_eq!(select_weights(&one, s).unwrap().epoch, 3);
        }
        let recs = [rec(10, 0.3, None), rec(20, 0.1, None), rec(30, 0.2, None)];
        assert_eq!(
            select_weights(&recs, SelectionStrategy::BestValLoss).unwrap().epoch,
            20
        );
        assert_eq!(
            select_weights(&recs, SelectionStrategy::FinalEpoch).unwrap().epoch,
            30
        );
        // equal scores resolve to the earliest epoch
        let recs = [rec(200, 0.2, Some(0.4)), rec(100, 0.3, Some(0.4))];
        assert_eq!(
            select_weights(&recs, SelectionStrategy::MinMeanJsd).unwrap().epoch,
            100
        );
        let ties = [rec(5, 0.1, None), rec(9, 0.1, None)];
        assert_eq!(
            select_weights(&ties, SelectionStrategy::BestValLoss).unwrap().epoch,
            5
        );
        assert!(select_weights(&recs[..1], SelectionStrategy::MinMeanJsd).is_ok());
        assert!(select_weights(&[rec(1, 0.1, None)], SelectionStrategy::MinMeanJsd).is_err());
        assert!(select_weights(&[], SelectionStrategy::FinalEpoch).is_err());
    }

    #[test]
    fn argmin_invariant_under_monotone_rescaling() {
        let recs = [
            rec(10, 0.3, Some(0.31)),
            rec(20, 0.1, Some(0.11)),
            rec(30, 0.2, Some(0.27)),
        ];
        let base = select_weights(&recs, SelectionStrategy::MinMeanJsd).unwrap().epoch;
        let scaled: Vec<CheckpointRecord> = recs
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.mean_jsd = r.mean_jsd.map(|v| 3.0 * v + 1.0);
                r
            })
            .collect();
        assert_eq!(
            select_weights(&scaled, SelectionStrategy::MinMeanJsd).unwrap().epoch,
            base
        );
    }
}
