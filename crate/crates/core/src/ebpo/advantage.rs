use crate::error::{Error, Result};

pub const STD_GUARD: f64 = 1e-8;

/// Group-relative advantage: `(r - mean) / (std + 1e-8)` with the
/// population standard deviation.
pub fn group_advantage(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::DegenerateGroup);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + STD_GUARD)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point() {
        let a = group_advantage(&[1.0, 0.0]).unwrap();
        assert!((a[0] - 1.0).abs() < 1e-7 && (a[1] + 1.0).abs() < 1e-7);
    }

    #[test]
    fn constant_rewards() {
        assert_eq!(group_advantage(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn three_point_by_hand() {
        // mean 2, population variance (1 + 1 + 0) / 3 = 2/3
        let std = (2.0f64 / 3.0).sqrt();
        let a = group_advantage(&[3.0, 1.0, 2.0]).unwrap();
        let expect = [1.0 / std, -1.0 / std, 0.0];
        for (x, e) in a.iter().zip(expect) {
            assert!((x - e).abs() < 1e-7, "{x} vs {e}");
        }
        assert!((a[0] - 1.224_744_871_391_589).abs() < 1e-7);
    }

    #[test]
    fn singleton_rejected() {
        assert!(matches!(group_advantage(&[1.0]), Err(Error::DegenerateGroup)));
    }
}
