use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::vocab::TokenId;

/// Row normalisation tolerance for every distribution a model returns.
pub const ROW_SUM_TOLERANCE: f64 = 1e-6;

/// Which attention pattern a prediction is made under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttentionView {
    /// Prompt sees prompt; block `b` sees the prompt, blocks `< b` and all of block `b`.
    BlockCausal,
    /// Blocks `first..=last` are merged into one bidirectional group; used by
    /// multi-block editing so earlier blocks can see the newer ones.
    Window { first: usize, last: usize },
}

impl AttentionView {
    pub fn group_of(&self, layout: &BlockLayout, pos: usize) -> usize {
        let g = layout.group_of(pos);
        match *self {
            AttentionView::BlockCausal => g,
            AttentionView::Window { first, last } => {
                if g >= first + 1 && g <= last + 1 {
                    last + 1
                } else {
                    g
                }
            }
        }
    }

    pub fn visible(&self, layout: &BlockLayout, query: usize, key: usize) -> bool {
        self.group_of(layout, key) <= self.group_of(layout, query)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    pub position: usize,
    pub probs: Vec<f64>,
}

impl ProbRow {
    /// Argmax with ties broken towards the lowest token id.
    pub fn top(&self) -> (TokenId, f64) {
        let mut best = 0usize;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        (best as TokenId, self.probs[best])
    }
}

/// Per-position categorical distributions over the vocabulary, sorted by position.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    rows: Vec<ProbRow>,
    tops: Vec<(TokenId, f64)>,
}

impl ProbGrid {
    pub fn new(mut rows: Vec<ProbRow>, vocab_size: usize) -> Result<Self> {
        rows.sort_by_key(|r| r.position);
        for pair in rows.windows(2) {
            if pair[0].position == pair[1].position {
                return Err(Error::InvalidDistribution(format!(
                    "duplicate row for position {}",
                    pair[0].position
                )));
            }
        }
        for row in &rows {
            validate_row(&row.probs, vocab_size)
                .map_err(|e| Error::InvalidDistribution(format!("position {}: {e}", row.position)))?;
        }
        let tops = rows.iter().map(ProbRow::top).collect();
        Ok(Self { rows, tops })
    }

    pub fn rows(&self) -> &[ProbRow] {
        &self.rows
    }

    fn index(&self, position: usize) -> Option<usize> {
        self.rows.binary_search_by_key(&position, |r| r.position).ok()
    }

    pub fn row(&self, position: usize) -> Option<&ProbRow> {
        self.index(position).map(|i| &self.rows[i])
    }

    /// Top candidate and its probability at `position`.
    pub fn top(&self, position: usize) -> Option<(TokenId, f64)> {
        self.index(position).map(|i| self.tops[i])
    }

    pub fn covers(&self, positions: &[usize]) -> bool {
        positions.iter().all(|&p| self.index(p).is_some())
    }
}

pub(crate) fn validate_row(probs: &[f64], vocab_size: usize) -> std::result::Result<(), String> {
    if probs.len() != vocab_size {
        return Err(format!("row has {} entries, vocabulary has {vocab_size}", probs.len()));
    }
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err("negative or non-finite probability".into());
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(format!("row sums to {sum}"));
    }
    Ok(())
}

/// Anything that maps a partially decoded sequence to per-position token
/// distributions.
pub trait ModelOracle: Sync {
    fn vocab_size(&self) -> usize;

    fn predict(
        &self,
        tokens: &[TokenId],
        layout: &BlockLayout,
        view: AttentionView,
        scope: &[usize],
    ) -> Result<ProbGrid>;
}

impl<M: ModelOracle + ?Sized> ModelOracle for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn predict(
        &self,
        tokens: &[TokenId],
        layout: &BlockLayout,
        view: AttentionView,
        scope: &[usize],
    ) -> Result<ProbGrid> {
        (**self).predict(tokens, layout, view, scope)
    }
}
