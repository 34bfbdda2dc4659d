//! Frozen lookup-table oracle used as a test double for the decoding engine.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::oracle::{validate_row, AttentionView, ModelOracle, ProbGrid, ProbRow};
use crate::error::{Error, Result};
use crate::layout::BlockLayout;
use crate::vocab::TokenId;

/// A distribution that applies at `position` whenever every `(pos, token)`
/// pair in `when` holds in the current sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRule {
    pub position: usize,
    #[serde(default)]
    pub when: Vec<(usize, TokenId)>,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub vocab_size: usize,
    /// Context-keyed rules, checked in order before the per-position rows.
    #[serde(default)]
    pub rules: Vec<ContextRule>,
    #[serde(default)]
    pub rows: BTreeMap<usize, Vec<f64>>,
    /// Distribution for positions with no rule or row; uniform when absent.
    #[serde(default)]
    pub default: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct TableOracle {
    spec: TableSpec,
    uniform: Vec<f64>,
}

pub fn make_table_oracle(spec: TableSpec) -> Result<TableOracle> {
    let v = spec.vocab_size;
    if v == 0 {
        return Err(Error::InvalidConfig("vocab_size must be positive".into()));
    }
    let check = |what: String, probs: &[f64]| {
        validate_row(probs, v).map_err(|e| Error::InvalidDistribution(format!("{what}: {e}")))
    };
    for (i, rule) in spec.rules.iter().enumerate() {
        check(format!("rule {i}"), &rule.probs)?;
    }
    for (pos, probs) in &spec.rows {
        check(format!("row {pos}"), probs)?;
    }
    if let Some(d) = &spec.default {
        check("default".into(), d)?;
    }
    Ok(TableOracle {
        uniform: vec![1.0 / v as f64; v],
        spec,
    })
}

impl TableOracle {
    /// Same distribution at every position.
    pub fn constant(probs: Vec<f64>) -> Result<Self> {
        make_table_oracle(TableSpec {
            vocab_size: probs.len(),
            default: Some(probs),
            ..Default::default()
        })
    }

    pub fn uniform(vocab_size: usize) -> Result<Self> {
        make_table_oracle(TableSpec {
            vocab_size,
            ..Default::default()
        })
    }

    /// Probability one on `targets[i]` at position `offset + i`.
    pub fn delta(vocab_size: usize, offset: usize, targets: &[TokenId]) -> Result<Self> {
        let rows = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut probs = vec![0.0; vocab_size];
                probs[t as usize] = 1.0;
                (offset + i, probs)
            })
            .collect();
        make_table_oracle(TableSpec {
            vocab_size,
            rows,
            ..Default::default()
        })
    }

    pub fn spec(&self) -> &TableSpec {
        &self.spec
    }

    pub fn row_for(&self, tokens: &[TokenId], position: usize) -> &[f64] {
        let matched = self.spec.rules.iter().find(|r| {
            r.position == position && r.when.iter().all(|&(p, t)| tokens.get(p) == Some(&t))
        });
        if let Some(rule) = matched {
            return &rule.probs;
        }
        if let Some(row) = self.spec.rows.get(&position) {
            return row;
        }
        self.spec.default.as_deref().unwrap_or(&self.uniform)
    }
}

impl ModelOracle for TableOracle {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size
    }

    fn predict(
        &self,
        tokens: &[TokenId],
        layout: &BlockLayout,
        _view: AttentionView,
        scope: &[usize],
    ) -> Result<ProbGrid> {
        layout.check_len(tokens.len())?;
        let rows = scope
            .iter()
            .map(|&position| ProbRow {
                position,
                probs: self.row_for(tokens, position).to_vec(),
            })
            .collect();
        ProbGrid::new(rows, self.spec.vocab_size)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_table_top_probability() {
        let o = TableOracle::uniform(5).unwrap();
        let l = BlockLayout::new(1, 2, 1).unwrap();
        let g = o.predict(&[0, 1, 2], &l, AttentionView::BlockCausal, &[1, 2]).unwrap();
        for &p in &[1, 2] {
            assert!((g.top(p).unwrap().1 - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn non_normalised_row_rejected() {
        let spec = TableSpec {
            vocab_size: 2,
            default: Some(vec![0.7, 0.7]),
            ..Default::default()
        };
        assert!(matches!(make_table_oracle(spec), Err(Error::InvalidDistribution(_))));
    }

    #[test]
    fn rules_take_precedence() {
        let spec = TableSpec {
            vocab_size: 2,
            rules: vec![ContextRule {
                position: 1,
                when: vec![(0, 1)],
                probs: vec![0.0, 1.0],
            }],
            rows: BTreeMap::from([(1, vec![1.0, 0.0])]),
            default: None,
        };
        let o = make_table_oracle(spec).unwrap();
        assert_eq!(o.row_for(&[1, 0], 1), &[0.0, 1.0]);
        assert_eq!(o.row_for(&[0, 0], 1), &[1.0, 0.0]);
        assert_eq!(o.row_for(&[0, 0], 0), &[0.5, 0.5]);
    }
}
