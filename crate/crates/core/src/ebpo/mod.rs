//! ELBO-based block-level policy optimisation at toy scale.

pub mod advantage;
pub mod grid;
pub mod ratio;
pub mod rollout;
pub mod update;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use advantage::group_advantage;
pub use grid::{uniform_levels, TimestepGrid};
pub use ratio::{block_log_likelihoods, block_log_likelihoods_naive, estimate_log_ratio, weighted_difference};
pub use rollout::{collect_rollouts, mean_reward, write_rollouts_jsonl, RewardFn, RolloutConfig, RolloutGroup, RolloutRecord};
pub use update::{clipped_surrogate, ebpo_update, ClipConfig, UpdateStats};

use crate::decode::{Sentinels, ThresholdConfig};
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::model::train::mix_seed;
use crate::model::ToyNet;
use crate::vocab::TokenId;

/// Log ratio for a collected record, evaluated on `grid`.
pub fn record_log_ratio(
    theta: &ToyNet,
    theta_old: &ToyNet,
    record: &RolloutRecord,
    grid: &TimestepGrid,
    mask_id: TokenId,
) -> Result<f64> {
    if grid.corrupted.iter().any(|c| c.len() != record.completion.len()) {
        return Err(Error::LayoutMismatch("record and grid disagree on completion length".into()));
    }
    estimate_log_ratio(theta, theta_old, &record.prompt, &record.completion, grid, mask_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlLogRow {
    pub iter: usize,
    pub objective: f64,
    pub mean_reward: f64,
    pub clip_fraction: f64,
}

/// Alternates rollout collection under a frozen copy of `policy` with
/// clipped-surrogate updates of `policy`.
#[allow(clippy::too_many_arguments)]
pub fn train_ebpo(
    policy: &mut ToyNet,
    sentinels: Sentinels,
    layout: BlockLayout,
    prompts: &[Vec<TokenId>],
    prompts_per_iter: usize,
    cfg: &ThresholdConfig,
    rollout: &RolloutConfig,
    clip: &ClipConfig,
    reward_fn: &RewardFn,
    iterations: usize,
    seed: u64,
) -> Result<Vec<RlLogRow>> {
    train_ebpo_with(
        policy,
        sentinels,
        layout,
        prompts,
        prompts_per_iter,
        cfg,
        rollout,
        clip,
        reward_fn,
        iterations,
        seed,
        &mut |_, _| Ok(()),
    )
}

/// [`train_ebpo`], handing each iteration's rollout groups to `sink` before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_ebpo_with(
    policy: &mut ToyNet,
    sentinels: Sentinels,
    layout: BlockLayout,
    prompts: &[Vec<TokenId>],
    prompts_per_iter: usize,
    cfg: &ThresholdConfig,
    rollout: &RolloutConfig,
    clip: &ClipConfig,
    reward_fn: &RewardFn,
    iterations: usize,
    seed: u64,
    sink: &mut dyn FnMut(usize, &[RolloutGroup]) -> Result<()>,
) -> Result<Vec<RlLogRow>> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig("no prompts".into()));
    }
    let per_iter = prompts_per_iter.clamp(1, prompts.len());
    let mut log = Vec::with_capacity(iterations);
    for iter in 0..iterations {
        let start = (iter * per_iter) % prompts.len();
        let batch: Vec<Vec<TokenId>> = (0..per_iter).map(|k| prompts[(start + k) % prompts.len()].clone()).collect();
        let theta_old = policy.clone();
        let groups = collect_rollouts(
            &theta_old,
            sentinels,
            layout,
            &batch,
            cfg,
            rollout,
            reward_fn,
            mix_seed(seed, iter as u64, 0x726f_6c6c),
        )?;
        sink(iter, &groups)?;
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.records.iter().map(|r| r.reward)).collect();
        let stats = ebpo_update(policy, &groups, clip, sentinels.mask)?;
        log.push(RlLogRow {
            iter,
            objective: stats.objective,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len().max(1) as f64,
            clip_fraction: stats.clip_fraction,
        });
    }
    Ok(log)
}

pub fn write_rl_csv(path: impl AsRef<Path>, rows: &[RlLogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iter,objective,mean_reward,clip_fraction")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.iter, r.objective, r.mean_reward, r.clip_fraction)?;
    }
    f.flush()?;
    Ok(())
}
