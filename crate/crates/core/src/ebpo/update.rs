//! Clipped surrogate ascent on ELBO-estimated likelihood ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ratio::{block_log_likelihoods_with_grad, weighted_difference};
use super::rollout::{RolloutGroup, RolloutRecord};
use crate::error::{Error, Result};
use crate::model::ToyNet;
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClipConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub group_size: usize,
    pub lr: f64,
    pub inner_epochs: usize,
    /// Global gradient-norm clip applied before each ascent step; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.2,
            group_size: 4,
            lr: 0.05,
            inner_epochs: 1,
            max_grad_norm: 0.0,
        }
    }
}

impl ClipConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low < 1.0 && self.eps_high > 0.0) {
            return Err(Error::InvalidConfig("need 0 < eps_low < 1 and eps_high > 0".into()));
        }
        if self.group_size < 2 {
            return Err(Error::DegenerateGroup);
        }
        if !(self.lr > 0.0) || self.inner_epochs == 0 {
            return Err(Error::InvalidConfig("lr and inner_epochs must be positive".into()));
        }
        if !(self.max_grad_norm >= 0.0) {
            return Err(Error::InvalidConfig("max_grad_norm must be non-negative".into()));
        }
        Ok(())
    }
}

/// `min(rho * A, clip(rho, 1 - eps_low, 1 + eps_high) * A)` and whether the
/// unclipped branch is the minimum (i.e. the term carries gradient).
pub fn clipped_surrogate(rho: f64, advantage: f64, eps_low: f64, eps_high: f64) -> (f64, bool) {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - eps_low, 1.0 + eps_high) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    /// Mean surrogate before the first ascent step.
    pub objective: f64,
    /// Fraction of records whose surrogate was clipped in the first epoch.
    pub clip_fraction: f64,
    pub records: usize,
}

struct RecordEval {
    surrogate: f64,
    clipped: bool,
    grad: Option<Vec<f64>>,
}

fn eval_record(theta: &ToyNet, r: &RolloutRecord, clip: &ClipConfig, mask_id: TokenId) -> Result<RecordEval> {
    if r.advantage == 0.0 {
        return Ok(RecordEval {
            surrogate: 0.0,
            clipped: false,
            grad: None,
        });
    }
    let (terms, grad) =
        block_log_likelihoods_with_grad(theta, &r.prompt, &r.completion, &r.grid, mask_id, &r.grid.weights)?;
    let log_ratio = weighted_difference(&r.grid.weights, &terms, &r.old_terms);
    let rho = log_ratio.exp();
    let (surrogate, active) = clipped_surrogate(rho, r.advantage, clip.eps_low, clip.eps_high);
    let grad = active.then(|| {
        let scale = r.advantage * rho;
        grad.into_iter().map(|g| g * scale).collect()
    });
    Ok(RecordEval {
        surrogate,
        clipped: !active,
        grad,
    })
}

/// Gradient ascent on the mean clipped surrogate over every record, for
/// `clip.inner_epochs` steps. Records with zero advantage contribute nothing.
pub fn ebpo_update(theta: &mut ToyNet, groups: &[RolloutGroup], clip: &ClipConfig, mask_id: TokenId) -> Result<UpdateStats> {
    clip.validate()?;
    let records: Vec<&RolloutRecord> = groups.iter().flat_map(|g| &g.records).collect();
    let mut stats = UpdateStats {
        objective: 0.0,
        clip_fraction: 0.0,
        records: records.len(),
    };
    if records.is_empty() {
        return Ok(stats);
    }
    let count = records.len() as f64;
    for epoch in 0..clip.inner_epochs {
        let frozen: &ToyNet = theta;
        let evals: Vec<RecordEval> = records
            .par_iter()
            .map(|r| eval_record(frozen, r, clip, mask_id))
            .collect::<Result<_>>()?;
        let objective = evals.iter().map(|e| e.surrogate).sum::<f64>() / count;
        if !objective.is_finite() {
            return Err(Error::Divergence { step: epoch });
        }
        if epoch == 0 {
            stats.objective = objective;
            stats.clip_fraction = evals.iter().filter(|e| e.clipped).count() as f64 / count;
        }
        let mut grad = vec![0.0; theta.num_params()];
        let mut any = false;
        for g in evals.iter().filter_map(|e| e.grad.as_ref()) {
            any = true;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x / count;
            }
        }
        if !any {
            continue;
        }
        if clip.max_grad_norm > 0.0 {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip.max_grad_norm {
                let s = clip.max_grad_norm / norm;
                grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        for (p, g) in theta.params.iter_mut().zip(&grad) {
            *p += clip.lr * g;
        }
        if !theta.all_finite() {
            return Err(Error::Divergence { step: epoch });
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surrogate_inside_band_is_unclipped() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2, 0.2), (0.7, true));
        assert_eq!(clipped_surrogate(1.1, -2.0, 0.2, 0.2), (1.1 * -2.0, true));
    }

    #[test]
    fn surrogate_clips_outside_band() {
        let (v, active) = clipped_surrogate(2.0, 1.0, 0.2, 0.3);
        assert!(!active && (v - 1.3).abs() < 1e-15);
        let (v, active) = clipped_surrogate(0.1, -1.0, 0.2, 0.3);
        assert!(!active && (v + 0.8).abs() < 1e-15);
        // pessimistic side keeps the gradient
        assert_eq!(clipped_surrogate(0.1, 1.0, 0.2, 0.3), (0.1, true));
    }
}
