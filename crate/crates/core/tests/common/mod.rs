#![allow(dead_code)]

use draftedit::decode::{StepTrace, ThresholdConfig};
use draftedit::model::{AttentionView, ContextRule, ModelOracle, ProbGrid, ProbRow, TableOracle, TableSpec};
use draftedit::model::make_table_oracle;
use draftedit::{BlockLayout, TokenId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// argmax by full scan, lowest id on ties
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (t, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = t;
        }
    }
    best
}

/// argmax over everything except `skip`
pub fn argmax_except(p: &[f64], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (t, &v) in p.iter().enumerate() {
        if t != skip && (best == usize::MAX || v > p[best]) {
            best = t;
        }
    }
    best
}

pub fn random_row(rng: &mut ChaCha8Rng, v: usize) -> Vec<f64> {
    // mix of sharp and flat rows, some with exact ties
    let sharp: f64 = rng.gen_range(0.0..8.0);
    let mut p: Vec<f64> = (0..v).map(|_| (rng.gen::<f64>() * sharp).exp()).collect();
    if rng.gen_bool(0.1) {
        let a = rng.gen_range(0..v);
        let b = rng.gen_range(0..v);
        p[b] = p[a];
    }
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// A table oracle whose rows depend on a handful of random `(position, token)` conditions.
pub fn random_table(seed: u64, v: usize, layout: &BlockLayout, rules: usize) -> TableOracle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = layout.total_len();
    let gen: Vec<usize> = layout.gen_range().collect();
    let mut spec = TableSpec {
        vocab_size: v,
        ..Default::default()
    };
    for _ in 0..rules {
        let position = gen[rng.gen_range(0..gen.len())];
        let k = rng.gen_range(1..=2);
        let when = (0..k)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..v) as TokenId))
            .collect();
        spec.rules.push(ContextRule {
            position,
            when,
            probs: random_row(&mut rng, v),
        });
    }
    for &p in &gen {
        spec.rows.insert(p, random_row(&mut rng, v));
    }
    make_table_oracle(spec).unwrap()
}

/// Independent restatement of block decoding: the forward, both update sets
/// by their definitions, fallback, last-step flush and the stop rule.
pub fn simulate_block<M: ModelOracle>(
    model: &M,
    tokens: &mut Vec<TokenId>,
    edit_count: &mut [u32],
    layout: &BlockLayout,
    block: usize,
    cfg: &ThresholdConfig,
    mask: TokenId,
    first_step: usize,
) -> Vec<StepTrace> {
    let scope: Vec<usize> = layout.block_range(block).collect();
    let masked = |x: &[TokenId]| scope.iter().filter(|&&i| x[i] == mask).count();
    let to_commit = masked(tokens);
    let m = mask as usize;
    let mut out = Vec::new();
    for step in 1..=cfg.max_steps_per_block {
        let grid = model.predict(tokens, layout, AttentionView::BlockCausal, &scope).unwrap();
        let row = |i: usize| grid.row(i).unwrap().probs.clone();
        let mut gamma = Vec::new();
        let mut delta = Vec::new();
        for &i in &scope {
            let p = row(i);
            let top = argmax(&p);
            if top == m {
                continue;
            }
            if tokens[i] == mask && p[top] > cfg.tau_mask {
                gamma.push((i, top as TokenId));
            }
            if tokens[i] != mask
                && tokens[i] as usize != top
                && p[top] > cfg.tau_edit
                && edit_count[i] < cfg.edit_budget_per_position
            {
                delta.push((i, top as TokenId));
            }
        }
        let mut fallback = false;
        let left = masked(tokens) - gamma.len();
        if cfg.fallback_commit && left > 0 {
            if gamma.is_empty() {
                let mut pick: Option<(usize, f64)> = None;
                for &i in &scope {
                    if tokens[i] == mask {
                        let p = row(i);
                        let c = p[argmax_except(&p, m)];
                        if pick.map_or(true, |(_, bp)| c > bp) {
                            pick = Some((i, c));
                        }
                    }
                }
                let i = pick.unwrap().0;
                gamma.push((i, argmax_except(&row(i), m) as TokenId));
                fallback = true;
            }
            if step == cfg.max_steps_per_block {
                for &i in &scope {
                    if tokens[i] == mask && !gamma.iter().any(|&(j, _)| j == i) {
                        gamma.push((i, argmax_except(&row(i), m) as TokenId));
                        fallback = true;
                    }
                }
            }
        }
        gamma.sort();
        for &(i, t) in &gamma {
            tokens[i] = t;
        }
        for &(i, t) in &delta {
            tokens[i] = t;
            edit_count[i] += 1;
        }
        out.push(StepTrace {
            step: first_step + out.len(),
            block,
            gamma: gamma.iter().map(|g| g.0).collect(),
            delta: delta.iter().map(|d| d.0).collect(),
            fallback,
            tokens: tokens.clone(),
        });
        if masked(tokens) == 0 {
            let unchanged = gamma.is_empty() && delta.is_empty();
            let can_edit =
                cfg.tau_edit < 1.0 && scope.iter().any(|&i| edit_count[i] < cfg.edit_budget_per_position);
            if unchanged || !can_edit || step >= to_commit {
                break;
            }
        }
    }
    out
}

/// A random mid-decode state over `layout` and a grid covering its generation region.
pub fn random_state_and_grid(
    rng: &mut ChaCha8Rng,
    layout: &BlockLayout,
    v: usize,
    mask: TokenId,
) -> (Vec<TokenId>, ProbGrid) {
    let n = layout.total_len();
    let mut tokens: Vec<TokenId> = (0..n).map(|_| rng.gen_range(0..v) as TokenId).collect();
    for t in tokens.iter_mut().take(layout.prompt_len) {
        while *t == mask {
            *t = rng.gen_range(0..v) as TokenId;
        }
    }
    for i in layout.gen_range() {
        if rng.gen_bool(0.4) {
            tokens[i] = mask;
        }
    }
    let rows = layout
        .gen_range()
        .map(|position| ProbRow {
            position,
            probs: random_row(rng, v),
        })
        .collect();
    (tokens, ProbGrid::new(rows, v).unwrap())
}

pub const MEMORIZE: &str = include_str!("../data/memorize.txt");

/// Vocabulary, layout and encoded sequences for the memorization corpus.
pub fn memorization_data() -> (draftedit::Vocabulary, BlockLayout, Vec<Vec<TokenId>>) {
    use draftedit::layout::{encode_example, parse_corpus};
    let examples = parse_corpus(MEMORIZE).unwrap();
    let vocab = draftedit::build_vocab(MEMORIZE).unwrap();
    let layout = BlockLayout::new(2, 4, 3).unwrap();
    let seqs = examples.iter().map(|e| encode_example(&vocab, &layout, e).unwrap()).collect();
    (vocab, layout, seqs)
}

pub fn memorization_net(vocab: &draftedit::Vocabulary, layout: &BlockLayout, seed: u64) -> draftedit::model::ToyNet {
    let cfg = draftedit::model::NetConfig {
        vocab_size: vocab.size(),
        width: 32,
        heads: 4,
        ffn_width: 64,
        layers: 2,
        prompt_len: layout.prompt_len,
        block_size: layout.block_size,
        max_blocks: layout.num_blocks,
    };
    draftedit::model::ToyNet::init(cfg, seed).unwrap()
}

/// Mean drafting cross-entropy with each block fully masked over clean history.
pub fn m2t_eval_loss(
    net: &draftedit::model::ToyNet,
    vocab: &draftedit::Vocabulary,
    layout: &BlockLayout,
    seqs: &[Vec<TokenId>],
) -> f64 {
    use draftedit::corrupt::corrupt_region;
    let mut total = 0.0;
    let mut n = 0;
    for s in seqs {
        for b in 0..layout.num_blocks {
            let pair = corrupt_region(vocab, s, layout.block_range(b), 1.0, 0.0, 0).unwrap();
            total += draftedit::model::loss::dual_stream_loss(net, &pair, 0.0).unwrap().m2t_loss;
            n += 1;
        }
    }
    total / n as f64
}
