//! Desk-scale multimodal training mechanics with verifiable numerics:
//! dual-stream feature fusion behind a learnable gate, redundancy-aware
//! sample selection trained by attention distillation, a toy conditional
//! language head with freezing and low-rank adapters, synthetic
//! planted-truth benchmarks, and a VQA-style metric suite.
//!
//! Everything runs in `f64`, every analytic gradient is audited against
//! central differences, and all randomness flows through seeded
//! generators so runs are bit-reproducible.

pub mod datagen;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod jsonl;
pub mod lm;
pub mod metrics;
pub mod num;
pub mod sampler;
pub mod seeding;

pub use error::{Error, Result};
pub use num::{GradReport, Matrix};
