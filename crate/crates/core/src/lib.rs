//! Training and evaluation engine for implicit-feedback collaborative
//! filtering with a contrastive objective built on two augmentations:
//! interest centers on the positive side (mean of a small sample of the
//! user's training items) and a two-candidate accept-reject rule on the
//! negative side that prefers the higher-scored candidate with probability
//! `alpha`.  Classic pairwise and batch contrastive losses are included as
//! baselines, together with a full-catalog top-K ranking evaluator and
//! exact/Monte-Carlo verifiers for the negative-selection distribution.
//!
//! Math is carried out in `f64`; embedding tables are stored as `f32`.
//! With the default `parallel` feature, evaluation, Monte-Carlo
//! verification and lock-free training run on a rayon pool; every entry
//! point keeps a sequential form with identical results where determinism
//! is part of the contract.

pub mod augment;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod losses;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
