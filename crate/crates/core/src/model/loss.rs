//! Mixture of mask-to-token and token-to-token cross-entropy.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::net::{AttnMask, ToyNet};
use super::oracle::AttentionView;
use crate::corrupt::CorruptedPair;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DualStreamLoss {
    pub m2t_loss: f64,
    pub t2t_loss: f64,
    pub lambda_t2t: f64,
    pub total: f64,
}

/// Stream weights after renormalising away an empty stream.
pub fn stream_weights(m2t_count: usize, t2t_count: usize, lambda_t2t: f64) -> Result<(f64, f64)> {
    match (m2t_count, t2t_count) {
        (0, 0) => Err(Error::NoSupervisedPositions),
        (_, 0) => Ok((1.0, 0.0)),
        (0, _) => Ok((0.0, 1.0)),
        _ => Ok((1.0 - lambda_t2t, lambda_t2t)),
    }
}

fn check_lambda(lambda_t2t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda_t2t) {
        return Err(Error::InvalidConfig(format!("lambda_t2t {lambda_t2t} outside [0, 1]")));
    }
    Ok(())
}

pub fn dual_stream_loss(net: &ToyNet, pair: &CorruptedPair, lambda_t2t: f64) -> Result<DualStreamLoss> {
    dual_stream_loss_and_grad(net, pair, lambda_t2t, AttentionView::BlockCausal, false).map(|(l, _)| l)
}

/// Loss under `view` and, when `with_grad`, its gradient over all parameters.
pub fn dual_stream_loss_and_grad(
    net: &ToyNet,
    pair: &CorruptedPair,
    lambda_t2t: f64,
    view: AttentionView,
    with_grad: bool,
) -> Result<(DualStreamLoss, Option<Vec<f64>>)> {
    dual_stream_loss_with_keep(net, pair, &[], lambda_t2t, view, with_grad)
}

/// As [`dual_stream_loss_and_grad`], with the untouched positions in `keep`
/// added to the editing stream: their target is the token already there.
/// An empty `keep` gives exactly the plain dual-stream loss.
pub fn dual_stream_loss_with_keep(
    net: &ToyNet,
    pair: &CorruptedPair,
    keep: &[usize],
    lambda_t2t: f64,
    view: AttentionView,
    with_grad: bool,
) -> Result<(DualStreamLoss, Option<Vec<f64>>)> {
    check_lambda(lambda_t2t)?;
    if keep.iter().any(|&i| i >= pair.corrupted.len() || pair.corrupted[i] != pair.clean[i]) {
        return Err(Error::InvalidConfig("keep positions must be untouched".into()));
    }
    let editing: Vec<usize> = if keep.is_empty() {
        pair.t2t_positions.clone()
    } else {
        let mut e: Vec<usize> = pair.t2t_positions.iter().chain(keep).copied().collect();
        e.sort_unstable();
        e.dedup();
        e
    };
    let (w_m2t, w_t2t) = stream_weights(pair.m2t_positions.len(), editing.len(), lambda_t2t)?;
    let layout = net.layout_for_len(pair.corrupted.len())?;
    let positions: Vec<usize> = (0..pair.corrupted.len()).collect();
    let mask = AttnMask::for_view(&layout, view);
    let cache = net.forward_raw(&pair.corrupted, &positions, &mask)?;

    let v = net.config.vocab_size;
    let mut dlogits = Array2::<f64>::zeros((pair.corrupted.len(), v));
    let stream = |set: &[usize], weight: f64, dlogits: &mut Array2<f64>| -> f64 {
        if set.is_empty() {
            return 0.0;
        }
        let n = set.len() as f64;
        let mut ce = 0.0;
        for &i in set {
            let target = pair.clean[i] as usize;
            let lp = cache.log_probs_row(i);
            ce -= lp[target];
            if with_grad && weight != 0.0 {
                let coef = weight / n;
                for (t, l) in lp.iter().enumerate() {
                    dlogits[[i, t]] += coef * l.exp();
                }
                dlogits[[i, target]] -= coef;
            }
        }
        ce / n
    };
    let m2t_loss = stream(&pair.m2t_positions, w_m2t, &mut dlogits);
    let t2t_loss = stream(&editing, w_t2t, &mut dlogits);
    let loss = DualStreamLoss {
        m2t_loss,
        t2t_loss,
        lambda_t2t,
        total: w_m2t * m2t_loss + w_t2t * t2t_loss,
    };
    let grad = with_grad.then(|| net.backward(&cache, &dlogits));
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::NetConfig;

    fn cfg() -> NetConfig {
        NetConfig {
            vocab_size: 5,
            width: 4,
            heads: 1,
            ffn_width: 6,
            layers: 1,
            prompt_len: 0,
            block_size: 4,
            max_blocks: 1,
        }
    }

    fn pair() -> CorruptedPair {
        // MASK = 4; position 1 masked, position 2 noised
        CorruptedPair {
            clean: vec![0, 1, 2, 3],
            corrupted: vec![0, 4, 0, 3],
            m2t_positions: vec![1],
            t2t_positions: vec![2],
        }
    }

    #[test]
    fn uniform_net_gives_log_vocab() {
        let net = ToyNet::zeros(cfg()).unwrap();
        let l = dual_stream_loss(&net, &pair(), 0.3).unwrap();
        let ln5 = 5f64.ln();
        assert!((l.m2t_loss - ln5).abs() < 1e-12);
        assert!((l.t2t_loss - ln5).abs() < 1e-12);
        assert!((l.total - ln5).abs() < 1e-12);
    }

    #[test]
    fn half_mixture_matches_hand_computation() {
        let net = ToyNet::init(cfg(), 4).unwrap();
        let p = pair();
        let l = dual_stream_loss(&net, &p, 0.5).unwrap();
        let g = net.forward(&p.corrupted, &[1, 2]).unwrap();
        let ce_m2t = -g.row(1).unwrap().probs[1].ln();
        let ce_t2t = -g.row(2).unwrap().probs[2].ln();
        assert!((l.total - (0.5 * ce_m2t + 0.5 * ce_t2t)).abs() < 1e-12);
    }

    #[test]
    fn empty_stream_renormalises() {
        let net = ToyNet::init(cfg(), 4).unwrap();
        let mut p = pair();
        p.t2t_positions.clear();
        p.corrupted[2] = 2;
        let l = dual_stream_loss(&net, &p, 0.5).unwrap();
        assert_eq!(l.t2t_loss, 0.0);
        assert_eq!(l.total, l.m2t_loss);
        p.m2t_positions.clear();
        p.corrupted[1] = 1;
        assert!(matches!(dual_stream_loss(&net, &p, 0.5), Err(Error::NoSupervisedPositions)));
    }

    #[test]
    fn confident_net_has_near_zero_loss() {
        // Put a huge bias on the output of every clean token through the embedding:
        // with width 4, one-hot-ish embeddings and a scaled identity readout.
        let c = NetConfig {
            vocab_size: 4,
            width: 4,
            heads: 1,
            ffn_width: 1,
            layers: 1,
            prompt_len: 0,
            block_size: 2,
            max_blocks: 1,
        };
        let mut net = ToyNet::zeros(c).unwrap();
        // positional embeddings carry the answer: position i -> token i
        let n = net.num_params();
        let v = 4;
        let d = 4;
        let pos_off = v * d;
        for i in 0..2 {
            net.params[pos_off + i * d + i] = 1.0;
        }
        let w_out = n - v - d * v;
        for k in 0..d {
            net.params[w_out + k * v + k] = 60.0;
        }
        let p = CorruptedPair {
            clean: vec![0, 1],
            corrupted: vec![3, 0],
            m2t_positions: vec![0],
            t2t_positions: vec![1],
        };
        let l = dual_stream_loss(&net, &p, 0.5).unwrap();
        assert!(l.total < 1e-12, "loss {}", l.total);
    }
}
