use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Corruption levels at which the likelihood bound is evaluated, with one
/// mask-only corrupted copy of the completion per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepGrid {
    pub timesteps: Vec<f64>,
    pub weights: Vec<f64>,
    /// `corrupted[n]` masks exactly `ceil(timesteps[n] * len)` completion positions.
    pub corrupted: Vec<Vec<TokenId>>,
    pub seed: u64,
}

/// Uniform levels `{1/N, 2/N, ..., 1}` with weights `1/N`.
pub fn uniform_levels(n: usize) -> (Vec<f64>, Vec<f64>) {
    let t = (1..=n).map(|k| k as f64 / n as f64).collect();
    let w = vec![1.0 / n as f64; n];
    (t, w)
}

impl TimestepGrid {
    pub fn materialize(
        completion: &[TokenId],
        mask_id: TokenId,
        timesteps: &[f64],
        weights: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if timesteps.is_empty() || timesteps.len() != weights.len() {
            return Err(Error::InvalidConfig("need N >= 1 timesteps with one weight each".into()));
        }
        if timesteps.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::InvalidConfig("timesteps must lie in (0, 1]".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::InvalidConfig("weights must be positive".into()));
        }
        if completion.is_empty() {
            return Err(Error::InvalidConfig("empty completion".into()));
        }
        let len = completion.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corrupted = timesteps
            .iter()
            .map(|&t| {
                let k = ((t * len as f64).ceil() as usize).min(len);
                let mut y = completion.to_vec();
                for i in sample(&mut rng, len, k) {
                    y[i] = mask_id;
                }
                y
            })
            .collect();
        Ok(Self {
            timesteps: timesteps.to_vec(),
            weights: weights.to_vec(),
            corrupted,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.weights.iter().sum()
    }
}
