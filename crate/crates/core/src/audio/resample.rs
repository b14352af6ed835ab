//! Band-limited sample-rate conversion with a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

/// Identifier recorded in cache indices so feature files are self-describing.
pub const RESAMPLER_ID: &str = "kaiser-sinc/v1 zero_crossings=16 beta=8.6 rolloff=0.95";

const ZERO_CROSSINGS: f64 = 16.0;
const KAISER_BETA: f64 = 8.6;
const ROLLOFF: f64 = 0.95;

/// Resample `x` from `from_hz` to `to_hz`. Output length is
/// `round(len · to / from)`.
pub fn resample(x: &[f64], from_hz: u32, to_hz: u32) -> Vec<f64> {
    if from_hz == to_hz || x.is_empty() {
        return x.to_vec();
    }
    let ratio = to_hz as f64 / from_hz as f64;
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // Cutoff in cycles per input sample.
    let cutoff = 0.5 * ROLLOFF * ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / (2.0 * cutoff);
    let norm = bessel_i0(KAISER_BETA);
    let mut y = Vec::with_capacity(out_len);
    for m in 0..out_len {
        let t = m as f64 / ratio;
        let lo = (t - half_width).ceil().max(0.0) as usize;
        let hi = ((t + half_width).floor() as usize).min(x.len() - 1);
        let mut acc = 0.0;
        for (n, &xn) in x.iter().enumerate().take(hi + 1).skip(lo) {
            let d = t - n as f64;
            let w = d / half_width;
            let win = bessel_i0(KAISER_BETA * (1.0 - w * w).max(0.0).sqrt()) / norm;
            acc += xn * 2.0 * cutoff * sinc(2.0 * cutoff * d) * win;
        }
        y.push(acc);
    }
    y
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..64 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}
