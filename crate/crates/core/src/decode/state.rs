use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PositionStatus {
    PromptFrozen,
    Masked,
    Committed,
    Finalized,
}

/// The evolving sequence and its bookkeeping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeState {
    pub tokens: Vec<TokenId>,
    pub layout: BlockLayout,
    pub active_block: usize,
    pub status: Vec<PositionStatus>,
    pub edit_count: Vec<u32>,
    pub forwards_used: usize,
    pub tokens_generated: usize,
    pub edits_applied: usize,
    pub mask_id: TokenId,
}

impl DecodeState {
    /// Prompt followed by a fully masked generation region.
    pub fn new(prompt: &[TokenId], layout: BlockLayout, mask_id: TokenId) -> Result<Self> {
        if prompt.len() != layout.prompt_len {
            return Err(Error::LayoutMismatch(format!(
                "prompt has {} tokens, layout expects {}",
                prompt.len(),
                layout.prompt_len
            )));
        }
        let mut tokens = prompt.to_vec();
        tokens.resize(layout.total_len(), mask_id);
        Self::from_tokens(tokens, layout, mask_id)
    }

    /// Arbitrary intermediate state: generation positions holding MASK are
    /// `Masked`, every other generation position is `Committed`.
    pub fn from_tokens(tokens: Vec<TokenId>, layout: BlockLayout, mask_id: TokenId) -> Result<Self> {
        layout.validate()?;
        layout.check_len(tokens.len())?;
        if tokens[..layout.prompt_len].contains(&mask_id) {
            return Err(Error::InvalidConfig("prompt contains MASK".into()));
        }
        let status = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                if layout.is_prompt(i) {
                    PositionStatus::PromptFrozen
                } else if t == mask_id {
                    PositionStatus::Masked
                } else {
                    PositionStatus::Committed
                }
            })
            .collect();
        Ok(Self {
            edit_count: vec![0; tokens.len()],
            tokens,
            layout,
            active_block: 0,
            status,
            forwards_used: 0,
            tokens_generated: 0,
            edits_applied: 0,
            mask_id,
        })
    }

    pub fn is_masked(&self, pos: usize) -> bool {
        self.tokens[pos] == self.mask_id
    }

    pub fn masked_in(&self, block: usize) -> Vec<usize> {
        self.layout.block_range(block).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn masked_count(&self, block: usize) -> usize {
        self.layout.block_range(block).filter(|&i| self.is_masked(i)).count()
    }

    pub fn prompt(&self) -> &[TokenId] {
        &self.tokens[..self.layout.prompt_len]
    }

    pub fn generation(&self) -> &[TokenId] {
        &self.tokens[self.layout.prompt_len..]
    }

    pub fn finalize_block(&mut self, block: usize) {
        for i in self.layout.block_range(block) {
            self.status[i] = PositionStatus::Finalized;
        }
    }

    /// Checks the status/token agreement and the edit budget.
    pub fn check_invariants(&self, edit_budget: u32) -> std::result::Result<(), String> {
        for (i, (&t, &s)) in self.tokens.iter().zip(&self.status).enumerate() {
            let is_prompt = self.layout.is_prompt(i);
            if is_prompt != (s == PositionStatus::PromptFrozen) {
                return Err(format!("position {i}: PromptFrozen iff prompt violated"));
            }
            if !is_prompt && (t == self.mask_id) != (s == PositionStatus::Masked) {
                return Err(format!("position {i}: Masked iff MASK violated"));
            }
            if self.edit_count[i] > edit_budget {
                return Err(format!("position {i}: edit budget exceeded"));
            }
        }
        Ok(())
    }
}
