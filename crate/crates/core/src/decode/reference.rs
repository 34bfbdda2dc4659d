//! Plain mask-to-token threshold decoder with no editing, kept separate from
//! the engine so the two can be compared trace for trace.

use super::trace::StepTrace;
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::model::{AttentionView, ModelOracle};
use crate::vocab::TokenId;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOutput {
    pub tokens: Vec<TokenId>,
    pub traces: Vec<StepTrace>,
    pub tokens_generated: usize,
    pub forwards_used: usize,
}

/// Per block: commit every masked position whose top candidate is not MASK
/// and has probability above `tau_mask`; if none qualifies and `fallback` is
/// set, commit the single most confident one; on the final permitted step
/// commit everything left. Stops after the block containing the first EOS.
#[allow(clippy::too_many_arguments)]
pub fn threshold_decode<M: ModelOracle + ?Sized>(
    model: &M,
    prompt: &[TokenId],
    layout: BlockLayout,
    tau_mask: f64,
    max_steps: usize,
    fallback: bool,
    mask: TokenId,
    eos: TokenId,
    pad: TokenId,
) -> Result<ReferenceOutput> {
    let mut x: Vec<TokenId> = prompt.to_vec();
    x.resize(layout.total_len(), mask);
    let mut traces = Vec::new();
    let mut forwards = 0;
    let mut generated = 0;
    let mut last_block = 0;
    'blocks: for b in 0..layout.num_blocks {
        last_block = b;
        let range = layout.block_range(b);
        let positions: Vec<usize> = range.clone().collect();
        for step in 1..=max_steps {
            let grid = model.predict(&x, &layout, AttentionView::BlockCausal, &positions)?;
            forwards += 1;
            // (position, token, confidence) for every still-masked position
            let mut candidates = Vec::new();
            for &i in &positions {
                if x[i] != mask {
                    continue;
                }
                let probs = &grid.row(i).unwrap().probs;
                let mut top = 0usize;
                for t in 1..probs.len() {
                    if probs[t] > probs[top] {
                        top = t;
                    }
                }
                let mut alt = usize::MAX;
                for t in 0..probs.len() {
                    if t as TokenId != mask && (alt == usize::MAX || probs[t] > probs[alt]) {
                        alt = t;
                    }
                }
                candidates.push((i, top as TokenId, probs[top], alt as TokenId, probs[alt]));
            }
            let mut chosen: Vec<(usize, TokenId)> = candidates
                .iter()
                .filter(|c| c.1 != mask && c.2 > tau_mask)
                .map(|c| (c.0, c.1))
                .collect();
            let mut used_fallback = false;
            if fallback && chosen.len() < candidates.len() {
                if chosen.is_empty() {
                    let mut best = candidates[0];
                    for c in &candidates[1..] {
                        if c.4 > best.4 {
                            best = *c;
                        }
                    }
                    chosen.push((best.0, best.3));
                    used_fallback = true;
                }
                if step == max_steps {
                    for c in &candidates {
                        if !chosen.iter().any(|&(i, _)| i == c.0) {
                            chosen.push((c.0, c.3));
                            used_fallback = true;
                        }
                    }
                }
                chosen.sort_unstable();
            }
            for &(i, t) in &chosen {
                x[i] = t;
            }
            generated += chosen.len();
            traces.push(StepTrace {
                step: traces.len(),
                block: b,
                gamma: chosen.iter().map(|c| c.0).collect(),
                delta: Vec::new(),
                fallback: used_fallback,
                tokens: x.clone(),
            });
            if positions.iter().all(|&i| x[i] != mask) {
                if x[layout.prompt_len..range.end].contains(&eos) {
                    break 'blocks;
                }
                continue 'blocks;
            }
        }
        return Err(Error::StalledDecode);
    }
    if let Some(k) = x[layout.prompt_len..].iter().position(|&t| t == eos) {
        let eos_at = layout.prompt_len + k;
        let decoded_end = layout.block_range(last_block).end;
        for i in eos_at + 1..x.len() {
            if i < decoded_end {
                generated -= 1;
            }
            x[i] = pad;
        }
    }
    Ok(ReferenceOutput {
        tokens: x,
        traces,
        tokens_generated: generated,
        forwards_used: forwards,
    })
}
