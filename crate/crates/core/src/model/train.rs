//! Dual-stream training loop at desk scale.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{dual_stream_loss_with_keep, DualStreamLoss};
use super::net::ToyNet;
use super::oracle::{AttentionView, ModelOracle};
use crate::corrupt::{corrupt_region, mtf_augment, CorruptedPair};
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Upper end of the per-example mask rate.
    pub mask_rate: f64,
    /// Lower end of the per-example mask rate; equal to `mask_rate` for a fixed rate.
    pub mask_rate_min: f64,
    pub noise_rate: f64,
    pub lambda_t2t: f64,
    /// Rounds of multi-turn forward augmentation; 0 disables it.
    pub mtf_rounds: usize,
    /// Fraction of examples that receive augmentation when enabled.
    pub mtf_prob: f64,
    /// Fraction of examples trained as a noise-only window over several
    /// blocks, matching the multi-block editing view.
    pub window_merge_prob: f64,
    /// Fraction of untouched positions in the corrupted region that the
    /// editing stream also supervises, with their own token as target.
    /// 0 supervises only masked and noised positions.
    pub keep_rate: f64,
    pub lr: f64,
    pub momentum: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            mask_rate: 1.0,
            mask_rate_min: 0.1,
            noise_rate: 0.15,
            lambda_t2t: 0.5,
            mtf_rounds: 0,
            mtf_prob: 0.25,
            window_merge_prob: 0.15,
            keep_rate: 0.0,
            lr: 0.05,
            momentum: 0.9,
            clip_norm: 1.0,
            batch_size: 16,
            steps: 500,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, v) in [
            ("mask_rate", self.mask_rate),
            ("mask_rate_min", self.mask_rate_min),
            ("noise_rate", self.noise_rate),
            ("lambda_t2t", self.lambda_t2t),
            ("mtf_prob", self.mtf_prob),
            ("window_merge_prob", self.window_merge_prob),
            ("keep_rate", self.keep_rate),
            ("momentum", self.momentum),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        if self.mask_rate_min > self.mask_rate {
            return bad("mask_rate_min exceeds mask_rate".into());
        }
        if self.mask_rate_min + self.noise_rate > 1.0 + 1e-12 {
            return Err(Error::RateOverflow);
        }
        if !(self.lr > 0.0) || self.clip_norm < 0.0 {
            return bad("lr must be positive and clip_norm non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub total: f64,
    pub m2t: f64,
    pub t2t: f64,
}

/// A corrupted training example and the attention view it is trained under.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub pair: CorruptedPair,
    pub view: AttentionView,
    /// Untouched positions supervised as identity in the editing stream.
    pub keep: Vec<usize>,
}

fn draw_keep(rng: &mut ChaCha8Rng, pair: &CorruptedPair, region: std::ops::Range<usize>, rate: f64) -> Vec<usize> {
    if rate <= 0.0 {
        return Vec::new();
    }
    region
        .filter(|&i| pair.corrupted[i] == pair.clean[i])
        .filter(|_| rng.gen::<f64>() < rate)
        .collect()
}

pub(crate) fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 33)).wrapping_mul(0xff51_afd7_ed55_8ccd);
    z ^ (z >> 33)
}

/// Draws one training sample: a random block of a random example is
/// corrupted with the preceding blocks left clean, as the decoder sees them.
pub fn draw_sample<M: ModelOracle + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    layout: &BlockLayout,
    examples: &[Vec<TokenId>],
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<TrainingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = &examples[rng.gen_range(0..examples.len())];
    let block = rng.gen_range(0..layout.num_blocks);
    let merge = block > 0 && rng.gen::<f64>() < schedule.window_merge_prob;
    if merge {
        let first = rng.gen_range(0..block);
        let view = AttentionView::Window { first, last: block };
        let region = layout.window_range(first, block);
        let noise = schedule.noise_rate.max(0.05);
        let pair = if schedule.mtf_rounds > 0 && rng.gen::<f64>() < schedule.mtf_prob {
            // the model's own fills as errors, as multi-block editing will see them
            let masked = corrupt_region(vocab, clean, region.clone(), 1.0 - noise, noise, rng.gen())?;
            mtf_augment(model, vocab, layout, &masked, schedule.mtf_rounds, rng.gen())?
        } else {
            corrupt_region(vocab, clean, region.clone(), 0.0, noise, rng.gen())?
        };
        let keep = draw_keep(&mut rng, &pair, region, schedule.keep_rate);
        return Ok(TrainingSample {
            pair,
            view,
            keep,
        });
    }
    let m = if schedule.mask_rate > schedule.mask_rate_min {
        rng.gen_range(schedule.mask_rate_min..=schedule.mask_rate)
    } else {
        schedule.mask_rate
    };
    let n = schedule.noise_rate.min(1.0 - m);
    let mut pair = corrupt_region(vocab, clean, layout.block_range(block), m, n, rng.gen())?;
    if schedule.mtf_rounds > 0 && rng.gen::<f64>() < schedule.mtf_prob {
        pair = mtf_augment(model, vocab, layout, &pair, schedule.mtf_rounds, rng.gen())?;
    }
    let keep = draw_keep(&mut rng, &pair, layout.block_range(block), schedule.keep_rate);
    Ok(TrainingSample {
        pair,
        view: AttentionView::BlockCausal,
        keep,
    })
}

/// Runs `schedule.steps` momentum-SGD steps on the dual-stream loss.
/// Deterministic in `schedule.seed` regardless of thread count.
pub fn train(
    net: &mut ToyNet,
    vocab: &Vocabulary,
    layout: &BlockLayout,
    examples: &[Vec<TokenId>],
    schedule: &TrainSchedule,
) -> Result<Vec<LossPoint>> {
    schedule.validate()?;
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    net.check_layout(layout)?;
    for e in examples {
        layout.check_len(e.len())?;
    }
    let mut velocity = vec![0.0; net.num_params()];
    let mut curve = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let frozen: &ToyNet = net;
        let results: Vec<Option<(DualStreamLoss, Vec<f64>)>> = (0..schedule.batch_size)
            .into_par_iter()
            .map(|b| -> Result<_> {
                let seed = mix_seed(schedule.seed, step as u64, b as u64);
                let sample = draw_sample(frozen, vocab, layout, examples, schedule, seed)?;
                match dual_stream_loss_with_keep(frozen, &sample.pair, &sample.keep, schedule.lambda_t2t, sample.view, true) {
                    Ok((loss, grad)) => Ok(Some((loss, grad.unwrap()))),
                    Err(Error::NoSupervisedPositions) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;

        let used: Vec<_> = results.into_iter().flatten().collect();
        let mut point = LossPoint {
            step,
            total: 0.0,
            m2t: 0.0,
            t2t: 0.0,
        };
        let mut grad = vec![0.0; net.num_params()];
        if !used.is_empty() {
            let k = used.len() as f64;
            for (loss, g) in &used {
                point.total += loss.total / k;
                point.m2t += loss.m2t_loss / k;
                point.t2t += loss.t2t_loss / k;
                for (acc, gi) in grad.iter_mut().zip(g) {
                    *acc += gi / k;
                }
            }
        }
        if !point.total.is_finite() {
            return Err(Error::Divergence { step });
        }
        if schedule.clip_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > schedule.clip_norm {
                let s = schedule.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for ((p, v), g) in net.params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = schedule.momentum * *v + g;
            *p -= schedule.lr * *v;
        }
        if !net.all_finite() {
            return Err(Error::Divergence { step });
        }
        curve.push(point);
    }
    Ok(curve)
}

pub fn write_loss_csv(path: impl AsRef<Path>, curve: &[LossPoint]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,loss_total,loss_m2t,loss_t2t")?;
    for p in curve {
        writeln!(f, "{},{},{},{}", p.step, p.total, p.m2t, p.t2t)?;
    }
    f.flush()?;
    Ok(())
}

/// Block-wise evaluation with clean history: for each example and block,
/// masks every block position and returns the fraction predicted correctly
/// by argmax.
pub fn m2t_accuracy(net: &ToyNet, vocab: &Vocabulary, layout: &BlockLayout, examples: &[Vec<TokenId>]) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for clean in examples {
        for b in 0..layout.num_blocks {
            let range = layout.block_range(b);
            let mut x = clean.clone();
            x[range.clone()].iter_mut().for_each(|t| *t = vocab.mask_id());
            let scope: Vec<usize> = range.collect();
            let grid = net.predict(&x, layout, AttentionView::BlockCausal, &scope)?;
            for &i in &scope {
                total += 1;
                hit += (grid.top(i).unwrap().0 == clean[i]) as usize;
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}

/// Editing-stream competence: fraction of noised positions whose argmax is
/// the clean token, with noise applied one block at a time over clean history.
pub fn edit_accuracy(
    net: &ToyNet,
    vocab: &Vocabulary,
    layout: &BlockLayout,
    examples: &[Vec<TokenId>],
    noise_rate: f64,
    seed: u64,
) -> Result<f64> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (e, clean) in examples.iter().enumerate() {
        for b in 0..layout.num_blocks {
            let pair = corrupt_region(vocab, clean, layout.block_range(b), 0.0, noise_rate, mix_seed(seed, e as u64, b as u64))?;
            if pair.t2t_positions.is_empty() {
                continue;
            }
            let grid = net.predict(&pair.corrupted, layout, AttentionView::BlockCausal, &pair.t2t_positions)?;
            for &i in &pair.t2t_positions {
                total += 1;
                hit += (grid.top(i).unwrap().0 == clean[i]) as usize;
            }
        }
    }
    Ok(hit as f64 / total.max(1) as f64)
}
