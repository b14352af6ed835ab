//! Dataset-level RMS statistics and recording-level equalisation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::median;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelStats {
    pub per_dataset_rms_dbfs: BTreeMap<String, f64>,
    pub global_target_dbfs: f64,
    /// Digital-silence recordings left out of the medians.
    pub excluded_zero_rms: usize,
}

/// RMS level in dB relative to a full-scale amplitude of 1.0; `-inf` for
/// digital silence.
pub fn rms_dbfs(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NEG_INFINITY;
    }
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    10.0 * ms.log10()
}

/// Median RMS level per dataset, then the median across datasets.
pub fn compute_level_stats<'a>(
    recordings: impl IntoIterator<Item = (&'a str, &'a [f64])>,
) -> Result<LevelStats> {
    let levels = recordings
        .into_iter()
        .map(|(ds, x)| (ds.to_string(), rms_dbfs(x)));
    level_stats_from_levels(levels)
}

/// As [`compute_level_stats`] but from precomputed per-recording levels.
pub fn level_stats_from_levels(
    levels: impl IntoIterator<Item = (String, f64)>,
) -> Result<LevelStats> {
    let mut by_ds: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut excluded = 0;
    for (ds, level) in levels {
        if level.is_finite() {
            by_ds.entry(ds).or_default().push(level);
        } else {
            excluded += 1;
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} zero-RMS recording(s) excluded from level statistics");
    }
    let per_dataset: BTreeMap<String, f64> = by_ds
        .into_iter()
        .map(|(ds, mut v)| (ds, median(&mut v).expect("non-empty")))
        .collect();
    let mut all: Vec<f64> = per_dataset.values().copied().collect();
    let global = median(&mut all)
        .ok_or_else(|| Error::Validation("no usable training recordings for level statistics".into()))?;
    Ok(LevelStats {
        per_dataset_rms_dbfs: per_dataset,
        global_target_dbfs: global,
        excluded_zero_rms: excluded,
    })
}

/// Scale `x` so its RMS equals `target_dbfs`. When that gain would push the
/// peak above 1.0 the gain is reduced to put the peak at exactly 1.0 and the
/// returned flag is set.
pub fn rms_equalize(x: &[f64], target_dbfs: f64) -> Result<(Vec<f64>, bool)> {
    let current = rms_dbfs(x);
    if !current.is_finite() {
        return Err(Error::Validation("cannot equalise a zero-RMS signal".into()));
    }
    let mut gain = 10f64.powf((target_dbfs - current) / 20.0);
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clipped = peak * gain > 1.0;
    if clipped {
        gain = 1.0 / peak;
    }
    Ok((x.iter().map(|v| v * gain).collect(), clipped))
}
