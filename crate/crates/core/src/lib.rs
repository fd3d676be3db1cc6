//! Two-stage visual token reduction for vision-language models.
//!
//! Stage one works on encoder attention: a windowed local scan at a shallow
//! layer plus a global scan at the output layer pick the tokens to keep, and
//! every other token is merged into its most similar kept token. Stage two
//! works on decoder attention: at one middle layer, only the merged tokens the
//! last instruction token attends to most survive. A FLOPs/KV cost model and
//! attention-analysis helpers sit on top.
//!
//! All stages consume attention *traces* (post-softmax attention rows saved
//! from a model, or generated synthetically by [`trace_io`]).

pub mod analysis;
pub mod cost_model;
pub mod decoder_prune;
pub mod encoder_scan;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod rng;
pub mod trace_io;

pub use error::{Error, Result};
pub use numerics::Tensor;
