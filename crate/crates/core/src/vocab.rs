//! Character-level token space with reserved sentinels.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK_SYMBOL: &str = "[MASK]";
pub const EOS_SYMBOL: &str = "[EOS]";
pub const PAD_SYMBOL: &str = "[PAD]";

/// Characters that structure corpus files and never become tokens.
const STRUCTURAL: [char; 3] = ['\n', '\r', '\t'];

/// Symbol table over observed characters plus `[MASK]`, `[EOS]` and `[PAD]`.
///
/// Regular symbols occupy ids `0..num_regular()` in code-point order; the
/// sentinels follow in the order MASK, EOS, PAD.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    symbols: Vec<String>,
    mask_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    symbols: Vec<String>,
    mask_id: TokenId,
    eos_id: TokenId,
    pad_id: TokenId,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = Error;

    fn try_from(file: VocabFile) -> Result<Self> {
        Vocabulary::from_parts(file.symbols, file.mask_id, file.eos_id, file.pad_id)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile {
            symbols: v.symbols,
            mask_id: v.mask_id,
            eos_id: v.eos_id,
            pad_id: v.pad_id,
        }
    }
}

impl Vocabulary {
    /// Builds the vocabulary from every character observed in `corpus`.
    pub fn build(corpus: &str) -> Result<Self> {
        let chars: BTreeSet<char> = corpus.chars().filter(|c| !STRUCTURAL.contains(c)).collect();
        if chars.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut symbols: Vec<String> = chars.into_iter().map(String::from).collect();
        let n = symbols.len() as TokenId;
        symbols.push(MASK_SYMBOL.to_string());
        symbols.push(EOS_SYMBOL.to_string());
        symbols.push(PAD_SYMBOL.to_string());
        Self::from_parts(symbols, n, n + 1, n + 2)
    }

    pub fn from_parts(symbols: Vec<String>, mask_id: TokenId, eos_id: TokenId, pad_id: TokenId) -> Result<Self> {
        let size = symbols.len() as TokenId;
        if mask_id == eos_id || mask_id == pad_id || eos_id == pad_id {
            return Err(Error::InvalidConfig("sentinel ids must be distinct".into()));
        }
        if mask_id >= size || eos_id >= size || pad_id >= size {
            return Err(Error::InvalidConfig("sentinel id out of range".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (id, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), id as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate symbol {s:?}")));
            }
        }
        Ok(Self {
            symbols,
            mask_id,
            eos_id,
            pad_id,
            index,
        })
    }

    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    pub fn eos_id(&self) -> TokenId {
        self.eos_id
    }

    pub fn pad_id(&self) -> TokenId {
        self.pad_id
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        id == self.mask_id || id == self.eos_id || id == self.pad_id
    }

    /// Ids that may appear as ordinary content (everything except sentinels).
    pub fn regular_ids(&self) -> Vec<TokenId> {
        (0..self.size() as TokenId).filter(|&id| !self.is_sentinel(id)).collect()
    }

    pub fn symbol(&self, id: TokenId) -> Option<&str> {
        self.symbols.get(id as usize).map(String::as_str)
    }

    pub fn token_id(&self, symbol: &str) -> Option<TokenId> {
        self.index.get(symbol).copied()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                let s = c.encode_utf8(&mut buf);
                self.token_id(s).ok_or_else(|| Error::UnknownSymbol(s.to_string()))
            })
            .collect()
    }

    /// Renders tokens as text, stopping at the first EOS and skipping PAD.
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == self.eos_id {
                break;
            }
            if id == self.pad_id {
                continue;
            }
            match self.symbol(id) {
                Some(s) => out.push_str(s),
                None => out.push('\u{fffd}'),
            }
        }
        out
    }

    /// Stable digest of the symbol table, embedded in checkpoints.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        for s in &self.symbols {
            hasher.update((s.len() as u64).to_le_bytes());
            hasher.update(s.as_bytes());
        }
        hasher.update(self.mask_id.to_le_bytes());
        hasher.update(self.eos_id.to_le_bytes());
        hasher.update(self.pad_id.to_le_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Convenience wrapper matching the corpus-ingestion entry point.
pub fn build_vocab(corpus: &str) -> Result<Vocabulary> {
    Vocabulary::build(corpus)
}
