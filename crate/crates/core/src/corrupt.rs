//! Corruption process feeding the drafting (mask-to-token) and editing
//! (token-to-token) supervision streams.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::model::{AttentionView, ModelOracle};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedPair {
    pub clean: Vec<TokenId>,
    pub corrupted: Vec<TokenId>,
    /// Positions set to MASK, ascending.
    pub m2t_positions: Vec<usize>,
    /// Positions holding a wrong non-MASK token, ascending.
    pub t2t_positions: Vec<usize>,
}

impl CorruptedPair {
    pub fn identity(clean: Vec<TokenId>) -> Self {
        Self {
            corrupted: clean.clone(),
            clean,
            m2t_positions: Vec::new(),
            t2t_positions: Vec::new(),
        }
    }

    pub fn check_invariants(&self, mask_id: TokenId) -> std::result::Result<(), String> {
        if self.clean.len() != self.corrupted.len() {
            return Err("clean and corrupted lengths differ".into());
        }
        if !is_strictly_ascending(&self.m2t_positions) || !is_strictly_ascending(&self.t2t_positions) {
            return Err("position sets must be strictly ascending".into());
        }
        for i in 0..self.clean.len() {
            let in_m2t = self.m2t_positions.binary_search(&i).is_ok();
            let in_t2t = self.t2t_positions.binary_search(&i).is_ok();
            let (c, x) = (self.clean[i], self.corrupted[i]);
            if in_m2t && in_t2t {
                return Err(format!("position {i} in both sets"));
            }
            if (x == mask_id) != in_m2t {
                return Err(format!("position {i}: MASK iff in m2t violated"));
            }
            if in_t2t && (x == c || x == mask_id) {
                return Err(format!("position {i}: t2t token must differ from clean and MASK"));
            }
            if !in_m2t && !in_t2t && x != c {
                return Err(format!("position {i}: untouched position altered"));
            }
        }
        Ok(())
    }

    /// Undo both corruptions; always yields `clean`.
    pub fn restore(&self) -> Vec<TokenId> {
        let mut out = self.corrupted.clone();
        for &i in self.m2t_positions.iter().chain(&self.t2t_positions) {
            out[i] = self.clean[i];
        }
        out
    }
}

fn is_strictly_ascending(v: &[usize]) -> bool {
    v.windows(2).all(|w| w[0] < w[1])
}

pub(crate) fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> TokenId {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        acc += p;
        if u < acc {
            return i as TokenId;
        }
    }
    last_nonzero as TokenId
}

fn check_rates(mask_rate: f64, noise_rate: f64) -> Result<()> {
    for r in [mask_rate, noise_rate] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidConfig(format!("rate {r} outside [0, 1]")));
        }
    }
    if mask_rate + noise_rate > 1.0 + 1e-12 {
        return Err(Error::RateOverflow);
    }
    Ok(())
}

/// Corrupts the whole sequence; see [`corrupt_region`].
pub fn corrupt(
    vocab: &Vocabulary,
    clean: &[TokenId],
    mask_rate: f64,
    noise_rate: f64,
    seed: u64,
) -> Result<CorruptedPair> {
    corrupt_region(vocab, clean, 0..clean.len(), mask_rate, noise_rate, seed)
}

/// Each position in `region` is independently masked with probability
/// `mask_rate`, replaced by a uniformly drawn wrong regular token with
/// probability `noise_rate`, and left alone otherwise. Positions outside
/// `region` are never touched.
pub fn corrupt_region(
    vocab: &Vocabulary,
    clean: &[TokenId],
    region: Range<usize>,
    mask_rate: f64,
    noise_rate: f64,
    seed: u64,
) -> Result<CorruptedPair> {
    check_rates(mask_rate, noise_rate)?;
    if clean.is_empty() {
        return Err(Error::InvalidConfig("empty sequence".into()));
    }
    if region.end > clean.len() {
        return Err(Error::LayoutMismatch("corruption region out of range".into()));
    }
    if clean.contains(&vocab.mask_id()) {
        return Err(Error::InvalidConfig("clean sequence contains MASK".into()));
    }
    let regular = vocab.regular_ids();
    if noise_rate > 0.0 && regular.len() < 2 {
        return Err(Error::InvalidConfig(
            "token noise needs at least two regular symbols".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pair = CorruptedPair::identity(clean.to_vec());
    for i in region {
        let u: f64 = rng.gen();
        if u < mask_rate {
            pair.corrupted[i] = vocab.mask_id();
            pair.m2t_positions.push(i);
        } else if u < mask_rate + noise_rate {
            let c = clean[i];
            let choices: Vec<TokenId> = regular.iter().copied().filter(|&t| t != c).collect();
            pair.corrupted[i] = choices[rng.gen_range(0..choices.len())];
            pair.t2t_positions.push(i);
        }
    }
    Ok(pair)
}

/// Multi-turn forward augmentation: over `rounds` rounds the model's own
/// sampled predictions progressively fill the masked positions. In round `r`
/// (0-based) each still-masked position is filled with probability
/// `1 / (rounds - r)`, so the last round fills all of them. A fill equal to the
/// clean token leaves both sets; a wrong fill becomes a T2T target. A sampled
/// MASK leaves the position masked.
pub fn mtf_augment<M: ModelOracle + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    layout: &BlockLayout,
    pair: &CorruptedPair,
    rounds: usize,
    seed: u64,
) -> Result<CorruptedPair> {
    if rounds == 0 {
        return Err(Error::ZeroRounds);
    }
    if model.vocab_size() != vocab.size() {
        return Err(Error::InvalidConfig("model and pair vocabularies differ".into()));
    }
    layout.check_len(pair.clean.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = pair.clone();
    for r in 0..rounds {
        if out.m2t_positions.is_empty() {
            break;
        }
        let fill_prob = 1.0 / (rounds - r) as f64;
        let grid = model.predict(&out.corrupted, layout, AttentionView::BlockCausal, &out.m2t_positions)?;
        let mut still_masked = Vec::new();
        for &i in &out.m2t_positions {
            let u: f64 = rng.gen();
            if u >= fill_prob {
                still_masked.push(i);
                continue;
            }
            let row = grid.row(i).expect("grid covers requested scope");
            let sampled = sample_categorical(&row.probs, &mut rng);
            if sampled == vocab.mask_id() {
                still_masked.push(i);
            } else if sampled == out.clean[i] {
                out.corrupted[i] = sampled;
            } else {
                out.corrupted[i] = sampled;
                out.t2t_positions.push(i);
            }
        }
        out.m2t_positions = still_masked;
        out.t2t_positions.sort_unstable();
    }
    Ok(out)
}
