//! Draft-and-Edit decoding for block-diffusion language models.
//!
//! A decoder that both unmasks confident positions and rewrites committed
//! tokens whose top candidate has changed, driven by two thresholds; a
//! small block-causal network trained on masked and noised inputs; an
//! ELBO-based clipped policy-gradient loop; and a harness that measures
//! tokens per forward.

pub mod corrupt;
pub mod decode;
pub mod ebpo;
pub mod error;
pub mod harness;
pub mod layout;
pub mod model;
pub mod vocab;

pub use error::{Error, Result};
pub use layout::BlockLayout;
pub use vocab::{build_vocab, TokenId, Vocabulary};
