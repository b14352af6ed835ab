use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainProtocol;
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, FairPdaModel};
use crate::nn::RmsProp;

/// Loss components of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub l_y: f64,
    pub l_d: f64,
    pub l_fair: f64,
    pub lambda_d: f64,
    pub lambda_fair: f64,
    /// `L_y − λ_d·L_d − λ_fair·L_fair`.
    pub objective: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub steps: Vec<StepLosses>,
}

impl LossHistory {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Mean of `l_y` over the first and last `n` steps.
    pub fn task_trend(&self, n: usize) -> Option<(f64, f64)> {
        let n = n.min(self.steps.len());
        if n == 0 {
            return None;
        }
        let m = |s: &[StepLosses]| s.iter().map(|x| x.l_y).sum::<f64>() / s.len() as f64;
        Some((m(&self.steps[..n]), m(&self.steps[self.steps.len() - n..])))
    }
}

/// Everything needed to continue training exactly where it stopped.
///
/// All randomness during training is derived from `(seed, epoch)` for batch
/// order and `(seed, step)` for MixStyle, so the step counter doubles as the
/// random-number state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: FairPdaModel,
    pub optim: RmsProp,
    pub step: usize,
    pub history: LossHistory,
}

const OPTIM_PREFIX: &str = "optim/";

impl TrainState {
    pub fn to_checkpoint(&self, protocol: &TrainProtocol) -> Checkpoint {
        let mut tensors = self.model.named_tensors();
        for (k, v) in self.optim.state() {
            tensors.insert(format!("{OPTIM_PREFIX}{k}"), v.clone());
        }
        let meta = serde_json::json!({
            "model": self.model.config,
            "protocol": protocol,
            "step": self.step,
            "optim": { "lr": self.optim.lr, "alpha": self.optim.alpha, "eps": self.optim.eps },
            "history": self.history,
        });
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = FairPdaModel::from_checkpoint(ck)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks training field {k}")))
        };
        let parse_err = |e: serde_json::Error| Error::Integrity(format!("checkpoint training state: {e}"));
        let step: usize = serde_json::from_value(field("step")?).map_err(parse_err)?;
        let history: LossHistory = serde_json::from_value(field("history")?).map_err(parse_err)?;
        let o = field("optim")?;
        let num = |k: &str| {
            o.get(k)
                .and_then(serde_json::Value::as_f64)
                .ok_or_else(|| Error::Integrity(format!("checkpoint optimiser lacks {k}")))
        };
        let mut optim = RmsProp::new(num("lr")?);
        optim.alpha = num("alpha")?;
        optim.eps = num("eps")?;
        let state: BTreeMap<_, _> = ck
            .tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(OPTIM_PREFIX).map(|n| (n.to_string(), v.clone())))
            .collect();
        optim.set_state(state);
        Ok(Self {
            model,
            optim,
            step,
            history,
        })
    }

    pub fn save(&self, protocol: &TrainProtocol, path: &Path) -> Result<()> {
        self.to_checkpoint(protocol).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}
