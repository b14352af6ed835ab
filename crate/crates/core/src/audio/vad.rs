//! Energy-based trimming of leading and trailing silence.

use crate::error::{Error, Result};

/// Frame-energy voice activity decision.
///
/// The signal is cut into non-overlapping frames of `frame_len` samples
/// (the last one may be shorter). A frame is voiced when its mean-square
/// energy is within `threshold_db` of the loudest frame. Returns the sample
/// range from the start of the first voiced frame to the end of the last.
pub fn voiced_range(x: &[f64], frame_len: usize, threshold_db: f64) -> Result<std::ops::Range<usize>> {
    if x.is_empty() {
        return Err(Error::Validation("empty recording".into()));
    }
    let frame_len = frame_len.max(1);
    let energies: Vec<f64> = x
        .chunks(frame_len)
        .map(|f| f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64)
        .collect();
    let peak = energies.iter().cloned().fold(0.0, f64::max);
    if peak <= 0.0 {
        return Err(Error::SilentRecording);
    }
    let floor = peak * 10f64.powf(threshold_db / 10.0);
    let voiced = |e: &f64| *e >= floor;
    let first = energies.iter().position(voiced).ok_or(Error::SilentRecording)?;
    let last = energies.iter().rposition(voiced).ok_or(Error::SilentRecording)?;
    Ok(first * frame_len..((last + 1) * frame_len).min(x.len()))
}
