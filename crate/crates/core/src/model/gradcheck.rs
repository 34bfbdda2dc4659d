use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::dual_stream_loss_and_grad;
use super::net::ToyNet;
use super::oracle::AttentionView;
use crate::corrupt::CorruptedPair;
use crate::error::{Error, Result};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic dual-stream gradient with central finite
/// differences on `samples` randomly chosen parameters (all of them when
/// `samples >= num_params`).
pub fn grad_check(
    net: &ToyNet,
    pair: &CorruptedPair,
    lambda_t2t: f64,
    view: AttentionView,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if net.num_params() > 10_000 {
        return Err(Error::InvalidConfig("grad_check is limited to nets of at most 10^4 parameters".into()));
    }
    let (_, grad) = dual_stream_loss_and_grad(net, pair, lambda_t2t, view, true)?;
    let grad = grad.expect("gradient requested");
    let n = net.num_params();
    let indices: Vec<usize> = if samples >= n {
        (0..n).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n, samples).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        checked: indices.len(),
    };
    for &i in &indices {
        let original = probe.params[i];
        probe.params[i] = original + FD_STEP;
        let plus = dual_stream_loss_and_grad(&probe, pair, lambda_t2t, view, false)?.0.total;
        probe.params[i] = original - FD_STEP;
        let minus = dual_stream_loss_and_grad(&probe, pair, lambda_t2t, view, false)?.0.total;
        probe.params[i] = original;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let err = relative_error(grad[i], numeric);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = i;
        }
    }
    Ok(report)
}
