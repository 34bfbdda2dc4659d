//! Probability oracles: the interface the decoder consumes, frozen test
//! doubles, and the trainable block-causal network.

pub mod checkpoint;
pub mod gradcheck;
pub mod hash_oracle;
pub mod loss;
pub mod net;
pub mod oracle;
pub mod table;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader};
pub use gradcheck::{grad_check, GradCheckReport};
pub use hash_oracle::HashOracle;
pub use loss::{dual_stream_loss, dual_stream_loss_and_grad, DualStreamLoss};
pub use net::{AttnMask, ForwardCache, NetConfig, ToyNet};
pub use oracle::{AttentionView, ModelOracle, ProbGrid, ProbRow};
pub use table::{make_table_oracle, ContextRule, TableOracle, TableSpec};
pub use train::{train, LossPoint, TrainSchedule};
