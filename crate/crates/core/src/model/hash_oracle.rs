//! Deterministic pseudo-random oracle keyed on the visible context.
//!
//! Each row is a function of (seed, position, tokens the position may attend
//! to), so it honours whichever attention view is requested. Used for fuzzing
//! the decoding engine without a trained network.

use super::oracle::{AttentionView, ModelOracle, ProbGrid, ProbRow};
use crate::error::Result;
use crate::layout::BlockLayout;
use crate::vocab::TokenId;

#[derive(Debug, Clone)]
pub struct HashOracle {
    pub vocab_size: usize,
    pub seed: u64,
    /// Upper bound on the logit scale; larger values give peakier rows.
    pub max_sharpness: f64,
    /// Tokens that always receive probability zero (e.g. the MASK sentinel).
    pub excluded: Vec<TokenId>,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit(state: &mut u64) -> f64 {
    *state = splitmix(*state);
    ((*state >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl HashOracle {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            seed,
            max_sharpness: 6.0,
            excluded: Vec::new(),
        }
    }

    pub fn row(&self, tokens: &[TokenId], layout: &BlockLayout, view: AttentionView, position: usize) -> Vec<f64> {
        let mut h = splitmix(self.seed ^ (position as u64).wrapping_mul(0x1000_0000_01b3));
        for (j, &t) in tokens.iter().enumerate() {
            if view.visible(layout, position, j) {
                h = splitmix(h ^ ((j as u64) << 32 | t as u64));
            }
        }
        let mut state = h;
        let sharpness = self.max_sharpness * unit(&mut state);
        let mut logits: Vec<f64> = (0..self.vocab_size)
            .map(|_| -(-unit(&mut state).ln()).ln() * sharpness)
            .collect();
        for &t in &self.excluded {
            logits[t as usize] = f64::NEG_INFINITY;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let sum: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= sum);
        probs
    }
}

impl ModelOracle for HashOracle {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn predict(
        &self,
        tokens: &[TokenId],
        layout: &BlockLayout,
        view: AttentionView,
        scope: &[usize],
    ) -> Result<ProbGrid> {
        layout.check_len(tokens.len())?;
        let rows = scope
            .iter()
            .map(|&position| ProbRow {
                position,
                probs: self.row(tokens, layout, view, position),
            })
            .collect();
        ProbGrid::new(rows, self.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ignores_invisible_tokens() {
        let o = HashOracle::new(6, 9);
        let l = BlockLayout::new(2, 2, 2).unwrap();
        let a = vec![0, 1, 2, 3, 4, 4];
        let mut b = a.clone();
        b[5] = 0;
        let v = AttentionView::BlockCausal;
        assert_eq!(o.row(&a, &l, v, 2), o.row(&b, &l, v, 2));
        assert_ne!(o.row(&a, &l, v, 4), o.row(&b, &l, v, 4));
    }

    #[test]
    fn excluded_tokens_get_zero() {
        let mut o = HashOracle::new(4, 1);
        o.excluded = vec![3];
        let l = BlockLayout::new(0, 2, 1).unwrap();
        let g = o.predict(&[3, 3], &l, AttentionView::BlockCausal, &[0, 1]).unwrap();
        assert!(g.rows().iter().all(|r| r.probs[3] == 0.0));
    }
}
