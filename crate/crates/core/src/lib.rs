//! Dynamic vocabulary speculation for speculative decoding.
//!
//! The draft model's LM head normally scores every vocabulary entry. This
//! crate implements a two-stage alternative: a low-rank speculator ranks the
//! whole vocabulary cheaply, and exact logits are computed only for the top
//! `k` candidates with a fused indexed kernel. Full-vocabulary and static
//! frequency-pruned heads are provided as baselines, together with a
//! distillation trainer and a lossless draft/verify decoding simulator.

pub mod bench;
pub mod config;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod freq;
pub mod io;
pub mod kernels;
pub mod model;
pub mod strategy;
pub mod tensor;
pub mod topk;
pub mod train;

pub use error::{Error, Result};
pub use kernels::{IndexList, KernelStats};
pub use model::ToyLM;
pub use strategy::{SpeculatorWeights, StaticSubset, StepSelection, VocabStrategy};
pub use tensor::{Matrix, ProbDist, RngStream, Vector};
