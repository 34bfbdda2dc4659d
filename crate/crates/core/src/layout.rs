//! Prompt + block-partitioned generation region, and corpus examples laid
//! out onto it.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub prompt_len: usize,
    pub block_size: usize,
    pub num_blocks: usize,
}

impl BlockLayout {
    pub fn new(prompt_len: usize, block_size: usize, num_blocks: usize) -> Result<Self> {
        let layout = Self {
            prompt_len,
            block_size,
            num_blocks,
        };
        layout.validate()?;
        Ok(layout)
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 || self.num_blocks == 0 {
            return Err(Error::InvalidConfig(
                "block_size and num_blocks must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn gen_len(&self) -> usize {
        self.block_size * self.num_blocks
    }

    pub fn total_len(&self) -> usize {
        self.prompt_len + self.gen_len()
    }

    pub fn is_prompt(&self, pos: usize) -> bool {
        pos < self.prompt_len
    }

    /// Block index of a generation position; `None` for prompt or out-of-range positions.
    pub fn block_of(&self, pos: usize) -> Option<usize> {
        if pos < self.prompt_len || pos >= self.total_len() {
            None
        } else {
            Some((pos - self.prompt_len) / self.block_size)
        }
    }

    pub fn block_range(&self, block: usize) -> Range<usize> {
        let start = self.prompt_len + block * self.block_size;
        start..start + self.block_size
    }

    /// Positions of blocks `first..=last`.
    pub fn window_range(&self, first: usize, last: usize) -> Range<usize> {
        self.block_range(first).start..self.block_range(last).end
    }

    pub fn gen_range(&self) -> Range<usize> {
        self.prompt_len..self.total_len()
    }

    /// Attention group of a position: 0 for the prompt, `b + 1` for block `b`.
    /// Under the block-causal mask, `i` may attend to `j` iff `group(j) <= group(i)`.
    pub fn group_of(&self, pos: usize) -> usize {
        self.block_of(pos).map_or(0, |b| b + 1)
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.total_len() {
            return Err(Error::LayoutMismatch(format!(
                "sequence length {len} does not match layout length {} (prompt {} + {} x {})",
                self.total_len(),
                self.prompt_len,
                self.num_blocks,
                self.block_size
            )));
        }
        Ok(())
    }
}

/// One prompt/completion pair from a corpus file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub prompt: String,
    pub completion: String,
}

/// Parses newline-delimited examples. A tab separates prompt from
/// completion; a line without a tab is a completion with an empty prompt.
pub fn parse_corpus(text: &str) -> Result<Vec<Example>> {
    let examples: Vec<Example> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.is_empty())
        .map(|line| match line.split_once('\t') {
            Some((p, c)) => Example {
                prompt: p.to_string(),
                completion: c.to_string(),
            },
            None => Example {
                prompt: String::new(),
                completion: line.to_string(),
            },
        })
        .collect();
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(examples)
}

/// Left-pads the prompt with PAD to `prompt_len`.
pub fn encode_prompt(vocab: &Vocabulary, layout: &BlockLayout, prompt: &str) -> Result<Vec<TokenId>> {
    let ids = vocab.encode(prompt)?;
    if ids.len() > layout.prompt_len {
        return Err(Error::LayoutMismatch(format!(
            "prompt of {} tokens exceeds prompt_len {}",
            ids.len(),
            layout.prompt_len
        )));
    }
    let mut out = vec![vocab.pad_id(); layout.prompt_len - ids.len()];
    out.extend(ids);
    Ok(out)
}

/// Completion followed by EOS (when room remains) and PAD filler.
pub fn encode_completion(vocab: &Vocabulary, layout: &BlockLayout, completion: &str) -> Result<Vec<TokenId>> {
    let mut ids = vocab.encode(completion)?;
    let gen_len = layout.gen_len();
    if ids.len() > gen_len {
        return Err(Error::LayoutMismatch(format!(
            "completion of {} tokens exceeds generation length {gen_len}",
            ids.len()
        )));
    }
    if ids.len() < gen_len {
        ids.push(vocab.eos_id());
    }
    ids.resize(gen_len, vocab.pad_id());
    Ok(ids)
}

/// Full clean sequence: padded prompt followed by the laid-out completion.
pub fn encode_example(vocab: &Vocabulary, layout: &BlockLayout, example: &Example) -> Result<Vec<TokenId>> {
    let mut seq = encode_prompt(vocab, layout, &example.prompt)?;
    seq.extend(encode_completion(vocab, layout, &example.completion)?);
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;

    #[test]
    fn block_mapping_is_total_over_generation() {
        let l = BlockLayout::new(3, 4, 2).unwrap();
        assert_eq!(l.total_len(), 11);
        assert_eq!(l.block_of(2), None);
        let blocks: Vec<usize> = l.gen_range().map(|p| l.block_of(p).unwrap()).collect();
        assert_eq!(blocks, vec![0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(l.block_of(11), None);
        assert_eq!(l.block_range(1), 7..11);
        assert_eq!(l.group_of(0), 0);
        assert_eq!(l.group_of(7), 2);
    }

    #[test]
    fn zero_sized_layout_rejected() {
        assert!(BlockLayout::new(2, 0, 1).is_err());
        assert!(BlockLayout::new(2, 1, 0).is_err());
    }

    #[test]
    fn example_encoding_pads_and_terminates() {
        let v = build_vocab("0123456789").unwrap();
        let l = BlockLayout::new(4, 3, 2).unwrap();
        let seq = encode_example(
            &v,
            &l,
            &Example {
                prompt: "12".into(),
                completion: "345".into(),
            },
        )
        .unwrap();
        let pad = v.pad_id();
        let eos = v.eos_id();
        assert_eq!(seq, vec![pad, pad, 1, 2, 3, 4, 5, eos, pad, pad]);
        let too_long = Example {
            prompt: "12345".into(),
            completion: String::new(),
        };
        assert!(matches!(encode_example(&v, &l, &too_long), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn corpus_lines() {
        let ex = parse_corpus("12\t21\nabc\n\n").unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0].prompt, "12");
        assert_eq!(ex[1].prompt, "");
        assert!(parse_corpus("\n").is_err());
    }
}
