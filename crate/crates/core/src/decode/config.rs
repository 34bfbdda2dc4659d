use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Speedy,
    Quality,
    Custom,
}

/// Dual-threshold decoding configuration.
///
/// A masked position is committed when its top candidate's probability
/// exceeds `tau_mask`; a committed position is rewritten when a different
/// top candidate's probability exceeds `tau_edit`. Both comparisons are strict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    pub tau_mask: f64,
    pub tau_edit: f64,
    pub mode: Mode,
    pub block_size: usize,
    pub max_steps_per_block: usize,
    /// Maximum number of edits any single position may receive.
    pub edit_budget_per_position: u32,
    /// Commit the most confident masked position when no position clears `tau_mask`.
    pub fallback_commit: bool,
    pub mbe_enabled: bool,
    /// Number of finalized blocks before the current one that editing passes may revisit.
    pub mbe_window: usize,
    pub mbe_max_passes: usize,
}

impl ThresholdConfig {
    pub const SPEEDY_TAU_MASK: f64 = 0.45;
    pub const QUALITY_TAU_MASK: f64 = 0.85;
    pub const DEFAULT_TAU_EDIT: f64 = 0.90;

    fn preset(mode: Mode, tau_mask: f64, block_size: usize) -> Self {
        Self {
            tau_mask,
            tau_edit: Self::DEFAULT_TAU_EDIT,
            mode,
            block_size,
            max_steps_per_block: 2 * block_size + 4,
            edit_budget_per_position: 3,
            fallback_commit: true,
            mbe_enabled: false,
            mbe_window: 1,
            mbe_max_passes: 2,
        }
    }

    /// Low drafting threshold; relies on editing to repair rough drafts.
    pub fn speedy(block_size: usize) -> Self {
        Self::preset(Mode::Speedy, Self::SPEEDY_TAU_MASK, block_size)
    }

    /// Conservative drafting threshold.
    pub fn quality(block_size: usize) -> Self {
        Self::preset(Mode::Quality, Self::QUALITY_TAU_MASK, block_size)
    }

    pub fn custom(tau_mask: f64, tau_edit: f64, block_size: usize) -> Self {
        Self {
            tau_edit,
            ..Self::preset(Mode::Custom, tau_mask, block_size)
        }
    }

    pub fn with_mbe(mut self, enabled: bool) -> Self {
        self.mbe_enabled = enabled;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, t) in [("tau_mask", self.tau_mask), ("tau_edit", self.tau_edit)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} = {t} outside [0, 1]"));
            }
        }
        if self.mode == Mode::Speedy && self.tau_mask > self.tau_edit {
            return bad("Speedy mode requires tau_mask <= tau_edit".into());
        }
        if self.block_size == 0 || self.max_steps_per_block == 0 {
            return bad("block_size and max_steps_per_block must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ThresholdConfig::speedy(4).validate().unwrap();
        ThresholdConfig::quality(4).validate().unwrap();
        let mut c = ThresholdConfig::speedy(4);
        c.tau_mask = 0.95;
        assert!(c.validate().is_err());
        c.mode = Mode::Custom;
        c.validate().unwrap();
        c.tau_edit = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_field_names() {
        let v = serde_json::to_value(ThresholdConfig::quality(8)).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "block_size",
                "edit_budget_per_position",
                "fallback_commit",
                "max_steps_per_block",
                "mbe_enabled",
                "mbe_max_passes",
                "mbe_window",
                "mode",
                "tau_edit",
                "tau_mask"
            ]
        );
        assert_eq!(v["mode"], "Quality");
    }
}
