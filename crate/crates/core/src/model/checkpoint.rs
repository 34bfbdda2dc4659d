//! Checkpoints: a JSON header next to a flat little-endian `f64` parameter file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::net::{NetConfig, ToyNet};
use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub vocab: Vocabulary,
    pub vocab_hash: String,
    pub num_params: usize,
    /// Sidecar file name, relative to the header's directory.
    pub params_file: String,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn sidecar_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    net: &ToyNet,
    vocab: &Vocabulary,
    metadata: serde_json::Value,
) -> Result<()> {
    let path = path.as_ref();
    let bin = sidecar_path(path);
    let header = CheckpointHeader {
        net: net.config.clone(),
        vocab: vocab.clone(),
        vocab_hash: vocab.hash(),
        num_params: net.num_params(),
        params_file: bin.file_name().unwrap().to_string_lossy().into_owned(),
        metadata,
    };
    let bytes: Vec<u8> = net.params.iter().flat_map(|p| p.to_le_bytes()).collect();
    std::fs::write(&bin, bytes)?;
    std::fs::write(path, serde_json::to_string_pretty(&header)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ToyNet, CheckpointHeader)> {
    let path = path.as_ref();
    let header: CheckpointHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if header.vocab.hash() != header.vocab_hash {
        return Err(Error::InvalidConfig("vocabulary hash mismatch".into()));
    }
    if header.vocab.size() != header.net.vocab_size {
        return Err(Error::InvalidConfig("vocabulary size does not match net".into()));
    }
    let bin = path.parent().unwrap_or(Path::new(".")).join(&header.params_file);
    let bytes = std::fs::read(bin)?;
    if bytes.len() != header.num_params * 8 {
        return Err(Error::InvalidConfig(format!(
            "parameter file holds {} bytes, expected {}",
            bytes.len(),
            header.num_params * 8
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let net = ToyNet::from_parts(header.net.clone(), params)?;
    Ok((net, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::build_vocab;

    #[test]
    fn roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = build_vocab("0123").unwrap();
        let cfg = NetConfig {
            vocab_size: vocab.size(),
            width: 4,
            heads: 2,
            ffn_width: 4,
            layers: 1,
            prompt_len: 1,
            block_size: 2,
            max_blocks: 2,
        };
        let net = ToyNet::init(cfg, 8).unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&path, &net, &vocab, serde_json::json!({"seed": 8})).unwrap();
        let raw = std::fs::read(dir.path().join("ckpt.bin")).unwrap();
        assert_eq!(raw.len(), net.num_params() * 8);
        assert_eq!(&raw[..8], &net.params[0].to_le_bytes());
        let (back, header) = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(header.metadata["seed"], 8);
    }
}
