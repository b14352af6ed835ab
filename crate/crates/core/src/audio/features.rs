//! Short-time log-mel spectrogram and MFCC extraction.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    #[default]
    Logmel,
    Mfcc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub frame_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub log_floor: f64,
    /// FFT size; frames are zero-padded up to this length.
    pub n_fft: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kind: FeatureKind::Logmel,
            frame_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 64,
            n_mfcc: 13,
            log_floor: 1e-10,
            n_fft: 512,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.frame_ms > 0.0 && self.hop_ms > 0.0) {
            return bad("frame_ms and hop_ms must be positive");
        }
        if self.hop_ms > self.frame_ms {
            return bad("hop_ms must not exceed frame_ms");
        }
        if self.n_mels == 0 {
            return bad("n_mels must be positive");
        }
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("n_mfcc must be in 1..=n_mels");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    /// Number of output rows.
    pub fn n_bands(&self) -> usize {
        match self.kind {
            FeatureKind::Logmel => self.n_mels,
            FeatureKind::Mfcc => self.n_mfcc,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Centre frequencies of the `n_mels` triangular bands spanning `0..sr/2`.
pub fn mel_centers(n_mels: usize, sr: u32) -> Vec<f64> {
    mel_edges(n_mels, sr)[1..=n_mels].to_vec()
}

fn mel_edges(n_mels: usize, sr: u32) -> Vec<f64> {
    let top = hz_to_mel(sr as f64 / 2.0);
    (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// Reusable extractor holding the FFT plan, window and filterbank.
pub struct FeatureExtractor {
    cfg: FeatureConfig,
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)` row-major triangle weights.
    filterbank: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl FeatureExtractor {
    pub fn new(cfg: &FeatureConfig, sr: u32) -> Result<Self> {
        cfg.validate()?;
        let frame_len = (cfg.frame_ms * sr as f64 / 1000.0).round() as usize;
        let hop = (cfg.hop_ms * sr as f64 / 1000.0).round() as usize;
        if frame_len > cfg.n_fft {
            return Err(Error::Config(format!(
                "n_fft {} is shorter than a {frame_len}-sample frame",
                cfg.n_fft
            )));
        }
        // Periodic Hann.
        let window = (0..frame_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame_len as f64).cos())
            .collect();
        let n_bins = cfg.n_fft / 2 + 1;
        let edges = mel_edges(cfg.n_mels, sr);
        let mut filterbank = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * sr as f64 / cfg.n_fft as f64;
                let w = if f > lo && f <= mid {
                    (f - lo) / (mid - lo)
                } else if f > mid && f < hi {
                    (hi - f) / (hi - mid)
                } else {
                    0.0
                };
                filterbank[m * n_bins + k] = w;
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            frame_len,
            hop,
            window,
            filterbank,
            fft,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    pub fn n_frames(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// `n_mels × n_frames` log-mel power, row-major.
    pub fn logmel(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n_frames = self.n_frames(x.len());
        if n_frames == 0 {
            return Err(Error::Shape(format!(
                "window of {} samples is shorter than one frame",
                x.len()
            )));
        }
        let n_fft = self.cfg.n_fft;
        let n_bins = n_fft / 2 + 1;
        let n_mels = self.cfg.n_mels;
        let mut out = vec![0.0; n_mels * n_frames];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; n_bins];
        for t in 0..n_frames {
            let frame = &x[t * self.hop..t * self.hop + self.frame_len];
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                b.re = s * w;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for m in 0..n_mels {
                let row = &self.filterbank[m * n_bins..(m + 1) * n_bins];
                let e: f64 = row.iter().zip(&power).map(|(w, p)| w * p).sum();
                out[m * n_frames + t] = e.max(self.cfg.log_floor).ln();
            }
        }
        Ok(out)
    }

    /// `n_mfcc × n_frames`: orthonormal DCT-II over the log-mel bands.
    pub fn mfcc(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lm = self.logmel(x)?;
        let n_mels = self.cfg.n_mels;
        let n_frames = lm.len() / n_mels;
        let n_mfcc = self.cfg.n_mfcc;
        let basis: Vec<f64> = (0..n_mfcc)
            .flat_map(|k| {
                let s = if k == 0 {
                    (1.0 / n_mels as f64).sqrt()
                } else {
                    (2.0 / n_mels as f64).sqrt()
                };
                (0..n_mels).map(move |n| {
                    s * (PI * k as f64 * (2 * n + 1) as f64 / (2 * n_mels) as f64).cos()
                })
            })
            .collect();
        let mut out = vec![0.0; n_mfcc * n_frames];
        for k in 0..n_mfcc {
            for t in 0..n_frames {
                out[k * n_frames + t] = (0..n_mels)
                    .map(|n| basis[k * n_mels + n] * lm[n * n_frames + t])
                    .sum();
            }
        }
        Ok(out)
    }

    /// Features of the configured kind, with their `(rows, frames)` shape.
    pub fn extract(&self, x: &[f64]) -> Result<(Vec<f64>, [usize; 2])> {
        let m = match self.cfg.kind {
            FeatureKind::Logmel => self.logmel(x)?,
            FeatureKind::Mfcc => self.mfcc(x)?,
        };
        let rows = self.cfg.n_bands();
        let frames = m.len() / rows;
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical {
                step: 0,
                msg: "non-finite feature value".into(),
            });
        }
        Ok((m, [rows, frames]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SR: u32 = 8000;

    fn tone(hz: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * PI * hz * i as f64 / SR as f64).sin())
            .collect()
    }

    #[test]
    fn two_second_window_has_198_frames() {
        let fx = FeatureExtractor::new(&FeatureConfig::default(), SR).unwrap();
        let m = fx.logmel(&vec![0.0; 16000]).unwrap();
        assert_eq!(m.len(), 64 * 198);
        assert_eq!(fx.n_frames(32000), 398);
    }

    #[test]
    fn zero_window_hits_floor() {
        let fx = FeatureExtractor::new(&FeatureConfig::default(), SR).unwrap();
        let m = fx.logmel(&vec![0.0; 16000]).unwrap();
        let floor = 1e-10f64.ln();
        assert!(m.iter().all(|&v| v == floor));
    }

    #[test]
    fn mfcc_of_constant_bands() {
        let cfg = FeatureConfig {
            kind: FeatureKind::Mfcc,
            ..FeatureConfig::default()
        };
        let fx = FeatureExtractor::new(&cfg, SR).unwrap();
        let (m, shape) = fx.extract(&vec![0.0; 16000]).unwrap();
        assert_eq!(shape, [13, 198]);
        let c0 = 64f64.sqrt() * 1e-10f64.ln();
        for t in 0..198 {
            assert!((m[t] - c0).abs() < 1e-9);
            for k in 1..13 {
                assert!(m[k * 198 + t].abs() < 1e-9);
            }
        }
    }

    /// Direct DCT-II written from the definition, orthonormal scaling.
    fn dct_oracle(x: &[f64], k: usize) -> f64 {
        let n = x.len() as f64;
        let s: f64 = x
            .iter()
            .enumerate()
            .map(|(i, v)| v * (PI / n * (i as f64 + 0.5) * k as f64).cos())
            .sum();
        s * if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
    }

    #[test]
    fn mfcc_matches_dct_of_logmel() {
        let cfg = FeatureConfig::default();
        let fx = FeatureExtractor::new(&cfg, SR).unwrap();
        let x: Vec<f64> = tone(300.0, 4000)
            .iter()
            .zip(tone(1270.0, 4000))
            .map(|(a, b)| 0.6 * a + 0.2 * b)
            .collect();
        let lm = fx.logmel(&x).unwrap();
        let mf = fx.mfcc(&x).unwrap();
        let nf = fx.n_frames(x.len());
        for t in [0, nf / 2, nf - 1] {
            let col: Vec<f64> = (0..64).map(|b| lm[b * nf + t]).collect();
            for k in 0..13 {
                assert!((mf[k * nf + t] - dct_oracle(&col, k)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn tone_peaks_in_its_band() {
        let fx = FeatureExtractor::new(&FeatureConfig::default(), SR).unwrap();
        // Centres computed independently of the extractor's filterbank.
        let top = 2595.0 * (1.0 + 4000.0 / 700.0f64).log10();
        for b in [20usize, 35, 50, 60] {
            let mel = top * (b + 1) as f64 / 65.0;
            let hz = 700.0 * (10f64.powf(mel / 2595.0) - 1.0);
            let m = fx.logmel(&tone(hz, 1600)).unwrap();
            let nf = fx.n_frames(1600);
            for t in 0..nf {
                let arg = (0..64)
                    .max_by(|&i, &j| m[i * nf + t].total_cmp(&m[j * nf + t]))
                    .unwrap();
                assert_eq!(arg, b, "tone {hz:.1} Hz frame {t}");
            }
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let c = FeatureConfig {
            n_mfcc: 65,
            ..FeatureConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = FeatureConfig {
            hop_ms: 30.0,
            ..FeatureConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
