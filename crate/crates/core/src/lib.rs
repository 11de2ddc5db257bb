//! Two-stage fine-tuning of a toy vision-language policy: supervised
//! fine-tuning of a low-rank head adapter, then group-relative policy
//! optimization with verifiable rewards for diagnosis and grounding.
//!
//! The pipeline runs end to end on synthetic planted-shape images; see
//! [`experiment::run_pipeline`].

pub mod bbox;
pub mod data;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod grpo;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rewards;
pub mod seed;
pub mod sft;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};
