//! Per-step update sets and the transition operator.

use super::config::ThresholdConfig;
use super::state::{DecodeState, PositionStatus};
use crate::error::{Error, Result};
use crate::model::ProbGrid;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UpdateSets {
    /// Masked positions whose top candidate clears `tau_mask`.
    pub gamma: Vec<usize>,
    /// Committed positions whose differing top candidate clears `tau_edit`.
    pub delta: Vec<usize>,
}

impl UpdateSets {
    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty() && self.delta.is_empty()
    }
}

/// Computes the unmasking and editing sets over `scope`.
///
/// A top candidate equal to the MASK sentinel proposes nothing and the
/// position joins neither set.
pub fn compute_update_sets(
    state: &DecodeState,
    probs: &ProbGrid,
    cfg: &ThresholdConfig,
    scope: &[usize],
) -> Result<UpdateSets> {
    if scope.iter().any(|&i| state.layout.is_prompt(i)) {
        return Err(Error::PromptImmutable);
    }
    let mut sets = UpdateSets::default();
    let mut sorted = scope.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for i in sorted {
        if i >= state.tokens.len() {
            return Err(Error::LayoutMismatch(format!("scope position {i} out of range")));
        }
        let (top, p) = probs
            .top(i)
            .ok_or_else(|| Error::LayoutMismatch(format!("probability grid does not cover position {i}")))?;
        if top == state.mask_id {
            continue;
        }
        let current = state.tokens[i];
        if current == state.mask_id {
            if p > cfg.tau_mask {
                sets.gamma.push(i);
            }
        } else if current != top && p > cfg.tau_edit && state.edit_count[i] < cfg.edit_budget_per_position {
            sets.delta.push(i);
        }
    }
    Ok(sets)
}

/// Writes each position's top candidate over `gamma ∪ delta`; everything
/// else is carried over.
pub fn apply_transition(state: &mut DecodeState, sets: &UpdateSets, probs: &ProbGrid) -> Result<()> {
    let pick = |i: usize| -> Result<(usize, TokenId)> {
        probs
            .top(i)
            .map(|(t, _)| (i, t))
            .ok_or_else(|| Error::LayoutMismatch(format!("probability grid does not cover position {i}")))
    };
    let commits = sets.gamma.iter().map(|&i| pick(i)).collect::<Result<Vec<_>>>()?;
    let edits = sets.delta.iter().map(|&i| pick(i)).collect::<Result<Vec<_>>>()?;
    transition(state, &commits, &edits)
}

/// Applies explicit commits (masked positions) and edits (committed
/// positions). All checks run before any mutation.
pub(crate) fn transition(
    state: &mut DecodeState,
    commits: &[(usize, TokenId)],
    edits: &[(usize, TokenId)],
) -> Result<()> {
    for &(i, _) in commits {
        if edits.iter().any(|&(j, _)| j == i) {
            return Err(Error::DisjointnessViolated);
        }
    }
    for &(i, t) in commits.iter().chain(edits) {
        if state.layout.is_prompt(i) {
            return Err(Error::PromptImmutable);
        }
        if t == state.mask_id {
            return Err(Error::InvalidConfig(format!("cannot write MASK at position {i}")));
        }
    }
    if let Some(&(i, _)) = commits.iter().find(|&&(i, _)| !state.is_masked(i)) {
        return Err(Error::InvalidConfig(format!("commit at unmasked position {i}")));
    }
    if let Some(&(i, _)) = edits.iter().find(|&&(i, _)| state.is_masked(i)) {
        return Err(Error::InvalidConfig(format!("edit at masked position {i}")));
    }
    for &(i, t) in commits {
        state.tokens[i] = t;
        state.status[i] = PositionStatus::Committed;
    }
    for &(i, t) in edits {
        state.tokens[i] = t;
        state.edit_count[i] += 1;
    }
    state.tokens_generated += commits.len();
    state.edits_applied += edits.len();
    Ok(())
}
