//! Dual-threshold decoding: update sets, the transition operator,
//! block-sequential decoding and multi-block editing.

pub mod config;
pub mod engine;
pub mod reference;
pub mod sets;
pub mod state;
pub mod trace;

pub use config::{Mode, ThresholdConfig};
pub use engine::{
    decode_block, decode_sequence, decode_sequence_with, mbe_pass, CommitRule, DecodeOutput, Decoder, Sentinels,
};
pub use sets::{apply_transition, compute_update_sets, UpdateSets};
pub use state::{DecodeState, PositionStatus};
pub use trace::{read_jsonl, write_jsonl, StepTrace};
