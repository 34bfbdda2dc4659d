//! Block-sequential draft-and-edit decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ThresholdConfig;
use super::sets::{compute_update_sets, transition};
use super::state::{DecodeState, PositionStatus};
use super::trace::StepTrace;
use crate::error::{Error, Result};
use crate::harness::metrics::Metrics;
use crate::layout::BlockLayout;
use crate::model::{AttentionView, ModelOracle, ProbGrid, ProbRow};
use crate::vocab::TokenId;

/// How the token written at a newly committed position is chosen. Edits
/// always write the top candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum CommitRule {
    Argmax,
    /// Sample from the row sharpened or flattened by `temperature`; MASK is never drawn.
    Sample { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub tokens: Vec<TokenId>,
    pub metrics: Metrics,
    pub traces: Vec<StepTrace>,
    /// First EOS position within the full sequence, if one was committed.
    pub eos_position: Option<usize>,
}

impl DecodeOutput {
    pub fn completion(&self, layout: &BlockLayout) -> &[TokenId] {
        &self.tokens[layout.prompt_len..]
    }
}

/// Highest-probability token other than MASK.
fn best_non_mask(row: &ProbRow, mask_id: TokenId) -> (TokenId, f64) {
    let mut best: Option<(TokenId, f64)> = None;
    for (t, &p) in row.probs.iter().enumerate() {
        let t = t as TokenId;
        if t == mask_id {
            continue;
        }
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((t, p));
        }
    }
    best.expect("vocabulary has a non-MASK token")
}

/// Drives one decode: owns the step counter, the sampler and the trace.
pub struct Decoder<'m, M: ModelOracle + ?Sized> {
    model: &'m M,
    cfg: ThresholdConfig,
    rule: CommitRule,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'m, M: ModelOracle + ?Sized> Decoder<'m, M> {
    pub fn new(model: &'m M, cfg: &ThresholdConfig, rule: CommitRule, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if let CommitRule::Sample { temperature } = rule {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::InvalidConfig("sampling temperature must be positive".into()));
            }
        }
        Ok(Self {
            model,
            cfg: cfg.clone(),
            rule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        })
    }

    fn forward(&self, state: &mut DecodeState, view: AttentionView, scope: &[usize]) -> Result<ProbGrid> {
        let grid = self.model.predict(&state.tokens, &state.layout, view, scope)?;
        state.forwards_used += 1;
        Ok(grid)
    }

    fn commit_token(&mut self, row: &ProbRow, mask_id: TokenId) -> TokenId {
        match self.rule {
            CommitRule::Argmax => {
                let (top, _) = row.top();
                if top == mask_id {
                    best_non_mask(row, mask_id).0
                } else {
                    top
                }
            }
            CommitRule::Sample { temperature } => {
                let weights: Vec<f64> = row
                    .probs
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| {
                        if t as TokenId == mask_id || p <= 0.0 {
                            0.0
                        } else {
                            p.powf(1.0 / temperature)
                        }
                    })
                    .collect();
                let total: f64 = weights.iter().sum();
                if !(total > 0.0) || !total.is_finite() {
                    return best_non_mask(row, mask_id).0;
                }
                let u: f64 = self.rng.gen::<f64>() * total;
                let mut acc = 0.0;
                let mut last = None;
                for (t, &w) in weights.iter().enumerate() {
                    if w > 0.0 {
                        last = Some(t);
                        acc += w;
                        if u < acc {
                            return t as TokenId;
                        }
                    }
                }
                last.unwrap() as TokenId
            }
        }
    }

    /// Whether any position in `scope` could still enter Δ.
    fn edits_possible(&self, state: &DecodeState, scope: &[usize]) -> bool {
        self.cfg.tau_edit < 1.0 && scope.iter().any(|&i| state.edit_count[i] < self.cfg.edit_budget_per_position)
    }

    /// Decodes `state.active_block` until it has no masks and Δ is empty for
    /// the resulting tokens, or the step cap is reached; then finalizes the
    /// block. After a step that changed the block, confirming Δ = ∅ costs one
    /// more forward unless edits are impossible (τ_edit = 1 or budgets spent)
    /// or the block has already used one forward per committed token, so
    /// forwards never exceed commits within a block.
    pub fn decode_block(&mut self, state: &mut DecodeState) -> Result<Vec<StepTrace>> {
        let block = state.active_block;
        if block >= state.layout.num_blocks {
            return Err(Error::LayoutMismatch(format!("block {block} out of range")));
        }
        if state.layout.block_size != self.cfg.block_size {
            return Err(Error::LayoutMismatch(format!(
                "config block_size {} differs from layout block_size {}",
                self.cfg.block_size, state.layout.block_size
            )));
        }
        if state.masked_count(block) == 0 {
            return Err(Error::BlockAlreadyDecoded);
        }
        let scope: Vec<usize> = state.layout.block_range(block).collect();
        let mask_id = state.mask_id;
        let to_commit = state.masked_count(block);
        let mut traces = Vec::new();
        for step_in_block in 1..=self.cfg.max_steps_per_block {
            let grid = self.forward(state, AttentionView::BlockCausal, &scope)?;
            let sets = compute_update_sets(state, &grid, &self.cfg, &scope)?;

            let mut commits: Vec<(usize, TokenId)> = Vec::with_capacity(sets.gamma.len());
            for &i in &sets.gamma {
                let t = self.commit_token(grid.row(i).unwrap(), mask_id);
                commits.push((i, t));
            }
            let edits: Vec<(usize, TokenId)> = sets.delta.iter().map(|&i| (i, grid.top(i).unwrap().0)).collect();

            let mut fallback = false;
            let masked_left = state.masked_count(block) - commits.len();
            if self.cfg.fallback_commit && masked_left > 0 {
                if commits.is_empty() {
                    // single most confident masked position, lowest index on ties
                    let mut best: Option<(usize, f64)> = None;
                    for i in state.masked_in(block) {
                        let p = best_non_mask(grid.row(i).unwrap(), mask_id).1;
                        if best.is_none_or(|(_, bp)| p > bp) {
                            best = Some((i, p));
                        }
                    }
                    let (i, _) = best.unwrap();
                    let t = self.commit_token(grid.row(i).unwrap(), mask_id);
                    commits.push((i, t));
                    fallback = true;
                }
                if step_in_block == self.cfg.max_steps_per_block {
                    // last permitted step: flush every remaining mask
                    for i in state.masked_in(block) {
                        if !commits.iter().any(|&(j, _)| j == i) {
                            let t = self.commit_token(grid.row(i).unwrap(), mask_id);
                            commits.push((i, t));
                            fallback = true;
                        }
                    }
                }
            }
            commits.sort_unstable_by_key(|&(i, _)| i);
            transition(state, &commits, &edits)?;
            traces.push(StepTrace {
                step: self.step,
                block,
                gamma: commits.iter().map(|&(i, _)| i).collect(),
                delta: sets.delta.clone(),
                fallback,
                tokens: state.tokens.clone(),
            });
            self.step += 1;
            if state.masked_count(block) == 0 {
                // Done once Δ is known to be empty for the current tokens (this
                // forward saw them unchanged, or no edit is possible), or once the
                // block has used as many forwards as it committed tokens.
                let unchanged = commits.is_empty() && sets.delta.is_empty();
                if unchanged || !self.edits_possible(state, &scope) || step_in_block >= to_commit {
                    break;
                }
            }
        }
        if state.masked_count(block) > 0 {
            return Err(Error::StalledDecode);
        }
        state.finalize_block(block);
        Ok(traces)
    }

    /// Edit-only passes over the just-finalized block and up to `mbe_window`
    /// finalized blocks before it, with the window attending bidirectionally.
    pub fn mbe_pass(&mut self, state: &mut DecodeState) -> Result<Vec<StepTrace>> {
        if !self.cfg.mbe_enabled {
            return Err(Error::MbeDisabled);
        }
        let last = state.active_block;
        if last == 0 || self.cfg.mbe_window == 0 {
            return Err(Error::InvalidConfig(
                "multi-block editing needs a finalized block before the current one and mbe_window >= 1".into(),
            ));
        }
        let first = last.saturating_sub(self.cfg.mbe_window);
        if (first..=last).any(|b| state.masked_count(b) > 0) {
            return Err(Error::InvalidConfig("multi-block editing window contains masks".into()));
        }
        let scope: Vec<usize> = state.layout.window_range(first, last).collect();
        let view = AttentionView::Window { first, last };
        let mut traces = Vec::new();
        for _ in 0..self.cfg.mbe_max_passes {
            let grid = self.forward(state, view, &scope)?;
            let sets = compute_update_sets(state, &grid, &self.cfg, &scope)?;
            debug_assert!(sets.gamma.is_empty());
            let edits: Vec<(usize, TokenId)> = sets.delta.iter().map(|&i| (i, grid.top(i).unwrap().0)).collect();
            transition(state, &[], &edits)?;
            traces.push(StepTrace {
                step: self.step,
                block: last,
                gamma: Vec::new(),
                delta: sets.delta.clone(),
                fallback: false,
                tokens: state.tokens.clone(),
            });
            self.step += 1;
            if sets.delta.is_empty() {
                break;
            }
        }
        Ok(traces)
    }

    /// Decodes every block left to right, running multi-block editing after
    /// each block past the first when enabled, and stopping once an EOS is
    /// present: everything after the first EOS becomes PAD.
    pub fn decode_sequence(
        &mut self,
        prompt: &[TokenId],
        layout: BlockLayout,
        mask_id: TokenId,
        eos_id: TokenId,
        pad_id: TokenId,
    ) -> Result<DecodeOutput> {
        let mut state = DecodeState::new(prompt, layout, mask_id)?;
        let mut traces = Vec::new();
        let mut eos_position = None;
        let mut blocks_decoded = 0;
        for block in 0..layout.num_blocks {
            state.active_block = block;
            traces.extend(self.decode_block(&mut state)?);
            blocks_decoded += 1;
            if self.cfg.mbe_enabled && block > 0 && self.cfg.mbe_window > 0 {
                traces.extend(self.mbe_pass(&mut state)?);
            }
            let decoded_end = layout.block_range(block).end;
            eos_position = (layout.prompt_len..decoded_end).find(|&i| state.tokens[i] == eos_id);
            if eos_position.is_some() {
                break;
            }
        }
        if let Some(eos) = eos_position {
            let decoded_end = layout.block_range(blocks_decoded - 1).end;
            for i in eos + 1..layout.total_len() {
                if i < decoded_end {
                    state.tokens_generated -= 1;
                }
                state.tokens[i] = pad_id;
                state.status[i] = PositionStatus::Finalized;
            }
        }
        let metrics = Metrics::new(
            state.tokens_generated,
            state.forwards_used,
            state.edits_applied,
            blocks_decoded,
        );
        Ok(DecodeOutput {
            tokens: state.tokens,
            metrics,
            traces,
            eos_position,
        })
    }
}

/// Argmax decode of a single block; see [`Decoder::decode_block`].
pub fn decode_block<M: ModelOracle + ?Sized>(
    model: &M,
    state: &mut DecodeState,
    cfg: &ThresholdConfig,
) -> Result<Vec<StepTrace>> {
    Decoder::new(model, cfg, CommitRule::Argmax, 0)?.decode_block(state)
}

pub fn mbe_pass<M: ModelOracle + ?Sized>(
    model: &M,
    state: &mut DecodeState,
    cfg: &ThresholdConfig,
) -> Result<Vec<StepTrace>> {
    Decoder::new(model, cfg, CommitRule::Argmax, 0)?.mbe_pass(state)
}

/// Special token ids the decoder needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sentinels {
    pub mask: TokenId,
    pub eos: TokenId,
    pub pad: TokenId,
}

impl From<&crate::vocab::Vocabulary> for Sentinels {
    fn from(v: &crate::vocab::Vocabulary) -> Self {
        Self {
            mask: v.mask_id(),
            eos: v.eos_id(),
            pad: v.pad_id(),
        }
    }
}

/// Argmax decode of a whole sequence. `seed` only matters for sampled commits
/// (see [`decode_sequence_with`]) and is accepted for a uniform call shape.
pub fn decode_sequence<M: ModelOracle + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &ThresholdConfig,
    layout: BlockLayout,
    sentinels: Sentinels,
    seed: u64,
) -> Result<DecodeOutput> {
    decode_sequence_with(model, prompt, cfg, layout, sentinels, CommitRule::Argmax, seed)
}

pub fn decode_sequence_with<M: ModelOracle + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    cfg: &ThresholdConfig,
    layout: BlockLayout,
    sentinels: Sentinels,
    rule: CommitRule,
    seed: u64,
) -> Result<DecodeOutput> {
    Decoder::new(model, cfg, rule, seed)?.decode_sequence(prompt, layout, sentinels.mask, sentinels.eos, sentinels.pad)
}
