use std::time::Instant;

use rayon::prelude::*;

use crate::decode::{decode_sequence, DecodeOutput, Sentinels, ThresholdConfig};
use crate::error::Result;
use crate::harness::metrics::Metrics;
use crate::harness::tasks::TaskKind;
use crate::layout::{encode_prompt, BlockLayout, Example};
use crate::model::ModelOracle;
use crate::vocab::Vocabulary;

/// Result of decoding one evaluation prompt.
#[derive(Debug, Clone)]
pub struct Decoded {
    pub output: DecodeOutput,
    pub text: String,
    pub score: f64,
}

/// Decodes every example's prompt with argmax commits and scores the rendered
/// completion with `task`'s exact-match scorer. Metrics aggregate counters
/// over all prompts.
pub fn evaluate<M: ModelOracle + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    layout: BlockLayout,
    task: TaskKind,
    examples: &[Example],
    cfg: &ThresholdConfig,
    seed: u64,
) -> Result<(Metrics, Vec<Decoded>)> {
    let start = Instant::now();
    let sentinels = Sentinels::from(vocab);
    let decoded: Vec<Decoded> = examples
        .par_iter()
        .map(|ex| -> Result<Decoded> {
            let prompt = encode_prompt(vocab, &layout, &ex.prompt)?;
            let output = decode_sequence(model, &prompt, cfg, layout, sentinels, seed)?;
            let text = vocab.render(output.completion(&layout));
            let score = task.score(ex, &text);
            Ok(Decoded { output, text, score })
        })
        .collect::<Result<_>>()?;
    let mut metrics = Metrics::default();
    for d in &decoded {
        metrics.accumulate(&d.output.metrics);
    }
    metrics = metrics.with_wall_time(start.elapsed().as_secs_f64());
    if !decoded.is_empty() {
        metrics.task_score = Some(decoded.iter().map(|d| d.score).sum::<f64>() / decoded.len() as f64);
    }
    Ok((metrics, decoded))
}
