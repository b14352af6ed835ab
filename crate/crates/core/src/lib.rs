//! Fairness-aware partial-label domain adaptation for sustained-vowel voice
//! classification (HC / PD / ALS).
//!
//! The crate covers the whole pipeline: cohort manifests and patient-level
//! splits, audio preprocessing and feature caching, a synthetic cohort
//! generator, the three-branch adversarial model, its training objectives,
//! the DG/UDA training protocols and patient-level evaluation.

pub mod audio;
pub mod cohort;
pub mod config;
pub mod container;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod synth;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
