//! Block-conditional log-likelihood terms of a completion, evaluated with
//! one forward pass per corruption level over the composite input
//! `prompt ⊕ corrupted completion ⊕ clean completion`.

use ndarray::Array2;

use super::grid::TimestepGrid;
use crate::error::{Error, Result};
use crate::model::{AttnMask, ToyNet};
use crate::vocab::TokenId;

/// Region of a composite-input index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Segment {
    Prompt,
    Noisy(usize),
    Clean(usize),
}

struct Composite {
    tokens: Vec<TokenId>,
    positions: Vec<usize>,
    mask: AttnMask,
}

fn composite(net: &ToyNet, prompt: &[TokenId], noisy: &[TokenId], clean: &[TokenId]) -> Composite {
    let p = prompt.len();
    let g = clean.len();
    let bs = net.config.block_size;
    let segment = |i: usize| {
        if i < p {
            Segment::Prompt
        } else if i < p + g {
            Segment::Noisy((i - p) / bs)
        } else {
            Segment::Clean((i - p - g) / bs)
        }
    };
    let mask = AttnMask::from_fn(p + 2 * g, |i, j| match (segment(i), segment(j)) {
        (_, Segment::Prompt) => true,
        (Segment::Prompt, _) => false,
        (Segment::Noisy(b), Segment::Noisy(c)) => b == c,
        (Segment::Noisy(b), Segment::Clean(c)) => c < b,
        (Segment::Clean(_), Segment::Noisy(_)) => false,
        (Segment::Clean(b), Segment::Clean(c)) => c <= b,
    });
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(noisy);
    tokens.extend_from_slice(clean);
    let mut positions: Vec<usize> = (0..p + g).collect();
    positions.extend(p..p + g);
    Composite { tokens, positions, mask }
}

fn check_shapes(net: &ToyNet, prompt: &[TokenId], completion: &[TokenId], grid: &TimestepGrid) -> Result<usize> {
    let layout = net.layout_for_len(prompt.len() + completion.len())?;
    if grid.corrupted.iter().any(|c| c.len() != completion.len()) {
        return Err(Error::LayoutMismatch("timestep grid does not match completion length".into()));
    }
    Ok(layout.num_blocks)
}

/// `terms[n][b]`: sum of log-probabilities of the clean tokens at the masked
/// positions of block `b` under corruption level `n`.
pub fn block_log_likelihoods(
    net: &ToyNet,
    prompt: &[TokenId],
    completion: &[TokenId],
    grid: &TimestepGrid,
    mask_id: TokenId,
) -> Result<Vec<Vec<f64>>> {
    let (terms, _) = block_terms_impl(net, prompt, completion, grid, mask_id, None)?;
    Ok(terms)
}

/// Block terms plus the gradient of `sum_n coef[n] * sum_b terms[n][b]`.
pub fn block_log_likelihoods_with_grad(
    net: &ToyNet,
    prompt: &[TokenId],
    completion: &[TokenId],
    grid: &TimestepGrid,
    mask_id: TokenId,
    coef: &[f64],
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let (terms, grad) = block_terms_impl(net, prompt, completion, grid, mask_id, Some(coef))?;
    Ok((terms, grad.unwrap()))
}

fn block_terms_impl(
    net: &ToyNet,
    prompt: &[TokenId],
    completion: &[TokenId],
    grid: &TimestepGrid,
    mask_id: TokenId,
    coef: Option<&[f64]>,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    let num_blocks = check_shapes(net, prompt, completion, grid)?;
    let p = prompt.len();
    let bs = net.config.block_size;
    let v = net.config.vocab_size;
    let mut grad = coef.map(|_| vec![0.0; net.num_params()]);
    let mut terms = Vec::with_capacity(grid.len());
    for (n, noisy) in grid.corrupted.iter().enumerate() {
        let z = composite(net, prompt, noisy, completion);
        let cache = net.forward_raw(&z.tokens, &z.positions, &z.mask)?;
        let mut row_terms = vec![0.0; num_blocks];
        let mut dlogits = coef.map(|_| Array2::<f64>::zeros((z.tokens.len(), v)));
        for (k, &t) in noisy.iter().enumerate() {
            if t != mask_id {
                continue;
            }
            let lp = cache.log_probs_row(p + k);
            let target = completion[k] as usize;
            row_terms[k / bs] += lp[target];
            if let (Some(d), Some(c)) = (dlogits.as_mut(), coef) {
                // d log p(target) / d logits = onehot - softmax
                for (j, l) in lp.iter().enumerate() {
                    d[[p + k, j]] -= c[n] * l.exp();
                }
                d[[p + k, target]] += c[n];
            }
        }
        if let (Some(d), Some(g)) = (dlogits.as_ref(), grad.as_mut()) {
            net.backward_into(&cache, d, g);
        }
        terms.push(row_terms);
    }
    Ok((terms, grad))
}

/// Reference for [`block_log_likelihoods`]: one ordinary block-causal
/// forward per `(n, b)`, with the clean blocks before `b` and the corrupted
/// block `b` laid out in place.
pub fn block_log_likelihoods_naive(
    net: &ToyNet,
    prompt: &[TokenId],
    completion: &[TokenId],
    grid: &TimestepGrid,
    mask_id: TokenId,
) -> Result<Vec<Vec<f64>>> {
    let num_blocks = check_shapes(net, prompt, completion, grid)?;
    let p = prompt.len();
    let bs = net.config.block_size;
    let mut terms = vec![vec![0.0; num_blocks]; grid.len()];
    for (n, noisy) in grid.corrupted.iter().enumerate() {
        for (b, term) in terms[n].iter_mut().enumerate() {
            let mut seq = prompt.to_vec();
            seq.extend_from_slice(&completion[..b * bs]);
            seq.extend_from_slice(&noisy[b * bs..(b + 1) * bs]);
            seq.resize(p + completion.len(), mask_id);
            let masked: Vec<usize> = (b * bs..(b + 1) * bs).filter(|&k| noisy[k] == mask_id).collect();
            if masked.is_empty() {
                continue;
            }
            let scope: Vec<usize> = masked.iter().map(|k| p + k).collect();
            let probs = net.forward(&seq, &scope)?;
            for &k in &masked {
                *term += probs.row(p + k).unwrap().probs[completion[k] as usize].ln();
            }
        }
    }
    Ok(terms)
}

/// `sum_n w_n sum_b (new[n][b] - old[n][b])`.
pub fn weighted_difference(weights: &[f64], new: &[Vec<f64>], old: &[Vec<f64>]) -> f64 {
    weights
        .iter()
        .zip(new.iter().zip(old))
        .map(|(w, (a, b))| w * a.iter().zip(b).map(|(x, y)| x - y).sum::<f64>())
        .sum()
}

/// Log of the likelihood ratio between `theta` and `theta_old` for one completion.
pub fn estimate_log_ratio(
    theta: &ToyNet,
    theta_old: &ToyNet,
    prompt: &[TokenId],
    completion: &[TokenId],
    grid: &TimestepGrid,
    mask_id: TokenId,
) -> Result<f64> {
    if theta.config != theta_old.config {
        return Err(Error::LayoutMismatch("policies differ in configuration".into()));
    }
    let new = block_log_likelihoods(theta, prompt, completion, grid, mask_id)?;
    let old = block_log_likelihoods(theta_old, prompt, completion, grid, mask_id)?;
    Ok(weighted_difference(&grid.weights, &new, &old))
}
