//! Raw WAV to cached segment-level feature matrices.
//!
//! Order of operations: peak normalisation, resampling, VAD trimming,
//! RMS equalisation, segmentation, feature extraction.

pub mod cache;
pub mod features;
pub mod level;
pub mod resample;
pub mod segment;
pub mod vad;
pub mod wav;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{prep_cohort, FeatureCache, PrepReport, SegmentMeta};
pub use features::{FeatureConfig, FeatureExtractor, FeatureKind};
pub use level::{compute_level_stats, rms_dbfs, rms_equalize, LevelStats};
pub use resample::{resample, RESAMPLER_ID};
pub use segment::{segment, window_geometry, window_offsets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    None,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub target_sr_hz: u32,
    pub window_s: f64,
    pub overlap: f64,
    pub pad_mode: PadMode,
    pub vad_frame_ms: f64,
    pub vad_threshold_db: f64,
    /// Fixed equalisation target; when absent it is derived from the
    /// source recordings.
    pub rms_target_dbfs: Option<f64>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            target_sr_hz: 8000,
            window_s: 2.0,
            overlap: 0.5,
            pad_mode: PadMode::None,
            vad_frame_ms: 30.0,
            vad_threshold_db: -40.0,
            rms_target_dbfs: None,
        }
    }
}

impl PrepConfig {
    /// The 4.0 s setting: zero-padded windows.
    pub fn long_windows() -> Self {
        Self {
            window_s: 4.0,
            pad_mode: PadMode::Zero,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_sr_hz == 0 {
            return Err(Error::Config("target_sr_hz must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config("overlap must lie in [0, 1)".into()));
        }
        if !(self.window_s > 0.0) || !(self.vad_frame_ms > 0.0) {
            return Err(Error::Config("window_s and vad_frame_ms must be positive".into()));
        }
        Ok(())
    }
}

/// Scale so that the largest absolute sample is 1.
pub fn peak_normalize(x: &[f64]) -> Result<Vec<f64>> {
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Err(Error::SilentRecording);
    }
    Ok(x.iter().map(|v| v / peak).collect())
}

/// Peak-normalise, resample to the target rate and trim silence at both ends.
pub fn preprocess_recording(x: &[f64], sr: u32, cfg: &PrepConfig) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Validation("empty recording".into()));
    }
    if sr == 0 {
        return Err(Error::Validation("sample rate must be positive".into()));
    }
    let x = peak_normalize(x)?;
    let y = resample(&x, sr, cfg.target_sr_hz);
    let frame = (cfg.vad_frame_ms * cfg.target_sr_hz as f64 / 1000.0).round() as usize;
    let range = vad::voiced_range(&y, frame, cfg.vad_threshold_db)?;
    Ok(y[range].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(hz: f64, sr: u32, secs: f64) -> Vec<f64> {
        let n = (secs * sr as f64) as usize;
        (0..n)
            .map(|i| (2.0 * PI * hz * i as f64 / sr as f64).sin())
            .collect()
    }

    #[test]
    fn full_scale_tone_passes_through() {
        let x = tone(440.0, 44100, 1.0);
        let y = preprocess_recording(&x, 44100, &PrepConfig::default()).unwrap();
        assert!((y.len() as i64 - 8000).abs() <= 240, "len {}", y.len());
        let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 1.0).abs() < 0.01);
    }

    #[test]
    fn leading_silence_trimmed_within_one_frame() {
        let mut x = vec![0.0; 44100];
        x.extend(tone(440.0, 44100, 1.0).iter().map(|v| 0.3 * v));
        let cfg = PrepConfig::default();
        let y = preprocess_recording(&x, 44100, &cfg).unwrap();
        // Brute-force oracle: first 30 ms frame of the resampled signal
        // with energy above the threshold.
        let z = resample(&peak_normalize(&x).unwrap(), 44100, 8000);
        let energies: Vec<f64> = z
            .chunks(240)
            .map(|c| c.iter().map(|v| v * v).sum::<f64>() / c.len() as f64)
            .collect();
        let max = energies.iter().cloned().fold(0.0, f64::max);
        let first = energies.iter().position(|&e| e >= max * 1e-4).unwrap();
        let removed = z.len() - y.len();
        assert_eq!(removed, first * 240);
        let onset_s = removed as f64 / 8000.0;
        assert!((onset_s - 1.0).abs() <= 0.030, "onset {onset_s}");
    }

    #[test]
    fn silent_and_empty_inputs_fail() {
        let cfg = PrepConfig::default();
        assert!(matches!(
            preprocess_recording(&[0.0; 1000], 8000, &cfg),
            Err(Error::SilentRecording)
        ));
        assert!(preprocess_recording(&[], 8000, &cfg).is_err());
    }

    #[test]
    fn peak_is_one_for_any_nonzero_input() {
        for scale in [1e-6, 0.3, 7.0] {
            let x: Vec<f64> = tone(123.0, 8000, 0.1).iter().map(|v| v * scale).collect();
            let y = peak_normalize(&x).unwrap();
            let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!((peak - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = PrepConfig::default();
        c.overlap = 1.0;
        assert!(c.validate().is_err());
        c.overlap = 0.5;
        c.target_sr_hz = 0;
        assert!(c.validate().is_err());
        assert!(PrepConfig::long_windows().validate().is_ok());
    }
}
