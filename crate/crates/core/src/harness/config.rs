//! Run configuration as read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decode::ThresholdConfig;
use crate::ebpo::{ClipConfig, RolloutConfig};
use crate::error::{Error, Result};
use crate::harness::tasks::TaskSpec;
use crate::layout::BlockLayout;
use crate::model::train::TrainSchedule;
use crate::model::NetConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Decode,
    Sweep,
    Rl,
    Check,
}

/// Network shape; vocabulary size and positions come from the data and layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub width: usize,
    pub heads: usize,
    pub ffn_width: usize,
    pub layers: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            width: 32,
            heads: 4,
            ffn_width: 64,
            layers: 2,
        }
    }
}

impl ModelShape {
    pub fn net_config(&self, vocab_size: usize, layout: &BlockLayout) -> NetConfig {
        NetConfig {
            vocab_size,
            width: self.width,
            heads: self.heads,
            ffn_width: self.ffn_width,
            layers: self.layers,
            prompt_len: layout.prompt_len,
            block_size: layout.block_size,
            max_blocks: layout.num_blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSettings {
    pub iterations: usize,
    pub prompts_per_iter: usize,
    /// Training prompts drawn from the front of the training set.
    pub prompt_count: usize,
    /// Samples per evaluation prompt when measuring mean reward.
    pub eval_samples: usize,
    pub rollout: RolloutConfig,
    pub clip: ClipConfig,
}

impl Default for RlSettings {
    fn default() -> Self {
        Self {
            iterations: 50,
            prompts_per_iter: 16,
            prompt_count: 256,
            eval_samples: 4,
            rollout: RolloutConfig::default(),
            clip: ClipConfig {
                lr: 0.3,
                max_grad_norm: 0.5,
                ..ClipConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub tau_mask: Vec<f64>,
    pub tau_edit: Vec<f64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            tau_mask: vec![0.0, 0.25, 0.45, 0.65, 0.85],
            tau_edit: vec![0.8, 0.9, 1.0],
        }
    }
}

impl SweepGrid {
    pub fn points(&self) -> Vec<(f64, f64)> {
        self.tau_mask
            .iter()
            .flat_map(|&m| self.tau_edit.iter().map(move |&e| (m, e)))
            .collect()
    }
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_repetitions() -> usize {
    1
}

/// Everything one CLI invocation needs. Relative paths are resolved against
/// the directory of the file the config was read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Training corpus, one `prompt<TAB>completion` per line.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Written by `train`, read by every other command.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation set in corpus format; defaults to the task's examples.
    #[serde(default)]
    pub prompts: Option<PathBuf>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub task: Option<TaskSpec>,
    /// Defaults to the speedy preset for the layout's block size.
    #[serde(default)]
    pub threshold: Option<ThresholdConfig>,
    pub layout: BlockLayout,
    #[serde(default)]
    pub model: ModelShape,
    #[serde(default)]
    pub train: TrainSchedule,
    #[serde(default)]
    pub rl: RlSettings,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub seed: u64,
    /// Timed repeats of each decode; counters must agree across repeats.
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving its relative paths.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingInput(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = std::path::absolute(path)?;
        cfg.resolve_paths(base.parent().unwrap_or(Path::new("/")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.corpus, &mut self.checkpoint, &mut self.prompts].into_iter().flatten() {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    pub fn threshold(&self) -> ThresholdConfig {
        self.threshold
            .clone()
            .unwrap_or_else(|| ThresholdConfig::speedy(self.layout.block_size))
    }

    pub fn validate(&self) -> Result<()> {
        self.layout.validate()?;
        let t = self.threshold();
        t.validate()?;
        if t.block_size != self.layout.block_size {
            return Err(Error::LayoutMismatch(format!(
                "threshold block_size {} differs from layout block_size {}",
                t.block_size, self.layout.block_size
            )));
        }
        self.train.validate()?;
        self.rl.clip.validate()?;
        if self.rl.rollout.group_size != self.rl.clip.group_size {
            return Err(Error::InvalidConfig("rl.rollout.group_size and rl.clip.group_size differ".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        Ok(())
    }

    /// Checkpoint path, defaulting to `model.json` in the output directory.
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = RunConfig::from_json(r#"{"command":"decode","layout":{"prompt_len":4,"block_size":4,"num_blocks":2}}"#)
            .unwrap();
        assert_eq!(cfg.threshold(), ThresholdConfig::speedy(4));
        assert_eq!(cfg.repetitions, 1);
        assert_eq!(cfg.train, TrainSchedule::default());
        assert_eq!(cfg.sweep.points().len(), 15);
    }

    #[test]
    fn rejects_unknown_fields_and_bad_layouts() {
        let base = r#""command":"decode","layout":{"prompt_len":4,"block_size":4,"num_blocks":2}"#;
        assert!(RunConfig::from_json(&format!("{{{base},\"bogus\":1}}")).is_err());
        let e = RunConfig::from_json(&format!(
            "{{{base},\"threshold\":{}}}",
            serde_json::to_string(&ThresholdConfig::speedy(3)).unwrap()
        ))
        .unwrap_err();
        assert_eq!(e.exit_code(), 3);
        let e = RunConfig::from_json(&format!("{{{base},\"train\":{{\"lr\":-1}}}}")).unwrap_err();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn paths_resolve_against_base() {
        let mut cfg = RunConfig::from_json(
            r#"{"command":"train","corpus":"c.txt","checkpoint":"/abs/m.json","layout":{"prompt_len":1,"block_size":1,"num_blocks":1}}"#,
        )
        .unwrap();
        cfg.resolve_paths(Path::new("/cfg"));
        assert_eq!(cfg.corpus.unwrap(), Path::new("/cfg/c.txt"));
        assert_eq!(cfg.checkpoint.unwrap(), Path::new("/abs/m.json"));
        assert_eq!(cfg.out_dir, Path::new("/cfg/out"));
    }
}
