use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::advantage::group_advantage;
use super::grid::{uniform_levels, TimestepGrid};
use super::ratio::block_log_likelihoods;
use crate::decode::{decode_sequence_with, CommitRule, Sentinels, ThresholdConfig};
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::model::train::mix_seed;
use crate::model::ToyNet;
use crate::vocab::TokenId;

/// A sampled completion with everything the update needs, frozen at collection time.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord {
    pub prompt: Vec<TokenId>,
    pub completion: Vec<TokenId>,
    pub reward: f64,
    pub advantage: f64,
    /// Old-policy block terms `[n][b]` on `grid`.
    pub old_terms: Vec<Vec<f64>>,
    pub grid: TimestepGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Vec<TokenId>,
    pub records: Vec<RolloutRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RolloutConfig {
    pub group_size: usize,
    /// 0 selects argmax commits.
    pub temperature: f64,
    pub timesteps: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        let (timesteps, weights) = uniform_levels(4);
        Self {
            group_size: 4,
            temperature: 1.0,
            timesteps,
            weights,
        }
    }
}

pub type RewardFn<'a> = dyn Fn(&[TokenId], &[TokenId]) -> std::result::Result<f64, String> + Sync + 'a;

fn commit_rule(temperature: f64) -> CommitRule {
    if temperature > 0.0 {
        CommitRule::Sample { temperature }
    } else {
        CommitRule::Argmax
    }
}

/// Samples `group_size` completions per prompt from the frozen `policy`,
/// scores them, standardises rewards within each group and caches the
/// old-policy likelihood terms. Records whose reward fails are dropped with a
/// warning; groups left with fewer than two records are dropped.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &ToyNet,
    sentinels: Sentinels,
    layout: BlockLayout,
    prompts: &[Vec<TokenId>],
    cfg: &ThresholdConfig,
    rollout: &RolloutConfig,
    reward_fn: &RewardFn,
    seed: u64,
) -> Result<Vec<RolloutGroup>> {
    if rollout.group_size < 2 {
        return Err(Error::DegenerateGroup);
    }
    let rule = commit_rule(rollout.temperature);
    let groups: Vec<Option<RolloutGroup>> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, prompt)| -> Result<Option<RolloutGroup>> {
            let mut kept = Vec::with_capacity(rollout.group_size);
            for g in 0..rollout.group_size {
                let s = mix_seed(seed, pi as u64, g as u64);
                let out = decode_sequence_with(policy, prompt, cfg, layout, sentinels, rule, s)?;
                let completion = out.completion(&layout).to_vec();
                match reward_fn(prompt, &completion) {
                    Ok(r) if r.is_finite() => kept.push((completion, r, s)),
                    Ok(r) => warn!("prompt {pi} sample {g}: non-finite reward {r}; excluded"),
                    Err(reason) => warn!("prompt {pi} sample {g}: reward failed ({reason}); excluded"),
                }
            }
            if kept.len() < 2 {
                warn!("prompt {pi}: fewer than two scored samples; group dropped");
                return Ok(None);
            }
            let rewards: Vec<f64> = kept.iter().map(|k| k.1).collect();
            let advantages = group_advantage(&rewards)?;
            let records = kept
                .into_iter()
                .zip(advantages)
                .map(|((completion, reward, s), advantage)| {
                    let grid = TimestepGrid::materialize(
                        &completion,
                        sentinels.mask,
                        &rollout.timesteps,
                        &rollout.weights,
                        mix_seed(s, 0x6772_6964, 0),
                    )?;
                    let old_terms = block_log_likelihoods(policy, prompt, &completion, &grid, sentinels.mask)?;
                    if old_terms.iter().flatten().any(|t| !t.is_finite()) {
                        return Err(Error::Divergence { step: 0 });
                    }
                    Ok(RolloutRecord {
                        prompt: prompt.clone(),
                        completion,
                        reward,
                        advantage,
                        old_terms,
                        grid,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(RolloutGroup {
                prompt: prompt.clone(),
                records,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(groups.into_iter().flatten().collect())
}

#[derive(Serialize)]
struct RolloutLine<'a> {
    iter: usize,
    prompt: &'a [TokenId],
    completion: &'a [TokenId],
    reward: f64,
    advantage: f64,
    log_ratio_terms: &'a [Vec<f64>],
}

/// One JSON line per record, tagged with the iteration that collected it.
pub fn write_rollouts_jsonl<W: Write>(mut out: W, iter: usize, groups: &[RolloutGroup]) -> Result<()> {
    for r in groups.iter().flat_map(|g| &g.records) {
        let line = RolloutLine {
            iter,
            prompt: &r.prompt,
            completion: &r.completion,
            reward: r.reward,
            advantage: r.advantage,
            log_ratio_terms: &r.old_terms,
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Mean reward of `samples` completions per prompt under `temperature`.
#[allow(clippy::too_many_arguments)]
pub fn mean_reward(
    policy: &ToyNet,
    sentinels: Sentinels,
    layout: BlockLayout,
    prompts: &[Vec<TokenId>],
    cfg: &ThresholdConfig,
    temperature: f64,
    samples: usize,
    reward_fn: &RewardFn,
    seed: u64,
) -> Result<f64> {
    let rule = commit_rule(temperature);
    let rewards: Vec<f64> = prompts
        .par_iter()
        .enumerate()
        .map(|(pi, prompt)| -> Result<f64> {
            let mut total = 0.0;
            for g in 0..samples {
                let out = decode_sequence_with(policy, prompt, cfg, layout, sentinels, rule, mix_seed(seed, pi as u64, g as u64))?;
                total += reward_fn(prompt, out.completion(&layout)).unwrap_or(0.0);
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(rewards.iter().sum::<f64>() / (prompts.len() * samples).max(1) as f64)
}
