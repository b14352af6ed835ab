//! Experiment orchestration: batch construction for the DG and UDA
//! protocols, the optimisation loop and per-fold execution.

mod batches;
mod experiment;
mod state;
mod train;

pub use batches::{build_batches, SegmentBank, SourceBatch, StepBatch, TargetBatch};
pub use experiment::{evaluate_patients, run_experiment, ExperimentOutput, FoldData};
pub use state::{LossHistory, StepLosses, TrainState};
pub use train::Trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{AlignMode, LossMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtocolMode {
    /// Source data only; targets are unseen until evaluation.
    Dg,
    /// Source data plus unlabelled target adaptation patients.
    #[default]
    Uda,
}

/// The three ablations of the full method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablations {
    pub no_warmup: bool,
    pub no_mixstyle: bool,
    pub no_fairness: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainProtocol {
    pub mode: ProtocolMode,
    pub loss_mode: LossMode,
    pub align_mode: AlignMode,
    pub ablations: Ablations,
    /// Must match the window length the feature cache was built with.
    pub window_s: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda_d_max: f64,
    pub lambda_fair_max: f64,
    pub warmup_fraction: f64,
    /// Write a resumable checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainProtocol {
    fn default() -> Self {
        Self {
            mode: ProtocolMode::Uda,
            loss_mode: LossMode::CePn,
            align_mode: AlignMode::PartialCdan,
            ablations: Ablations::default(),
            window_s: 2.0,
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            lambda_d_max: 1.0,
            lambda_fair_max: 1.0,
            warmup_fraction: 0.2,
            checkpoint_every: 0,
        }
    }
}

impl TrainProtocol {
    /// The plain classifier baseline: no alignment, no MixStyle, no gender
    /// branch.
    pub fn erm(&self) -> Self {
        Self {
            align_mode: AlignMode::None,
            ablations: Ablations {
                no_mixstyle: true,
                no_fairness: true,
                ..self.ablations
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} is below 2", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.window_s > 0.0) {
            return bad("window_s must be positive".into());
        }
        if self.lambda_d_max < 0.0 || self.lambda_fair_max < 0.0 {
            return bad("lambda maxima must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}
