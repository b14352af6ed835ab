use super::{PadMode, PrepConfig};

/// Window length and hop in samples at `sr`.
pub fn window_geometry(cfg: &PrepConfig, sr: u32) -> (usize, usize) {
    let w = (cfg.window_s * sr as f64).round() as usize;
    let hop = (((1.0 - cfg.overlap) * w as f64).round() as usize).max(1);
    (w.max(1), hop)
}

/// Start offsets of the windows cut from a signal of length `len`.
pub fn window_offsets(len: usize, w: usize, hop: usize, pad: PadMode) -> Vec<usize> {
    if len < w {
        return match (pad, len) {
            (PadMode::Zero, l) if l > 0 => vec![0],
            _ => Vec::new(),
        };
    }
    (0..=(len - w) / hop).map(|i| i * hop).collect()
}

/// Cut fixed-length windows. With [`PadMode::Zero`] a signal shorter than
/// one window yields a single zero-padded window; otherwise only full
/// windows are emitted.
pub fn segment(x: &[f64], cfg: &PrepConfig) -> Vec<Vec<f64>> {
    let (w, hop) = window_geometry(cfg, cfg.target_sr_hz);
    window_offsets(x.len(), w, hop, cfg.pad_mode)
        .into_iter()
        .map(|off| {
            let end = (off + w).min(x.len());
            let mut win = x[off..end].to_vec();
            win.resize(w, 0.0);
            win
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(window_s: f64, pad: PadMode) -> PrepConfig {
        PrepConfig {
            window_s,
            pad_mode: pad,
            ..PrepConfig::default()
        }
    }

    #[test]
    fn five_seconds_two_second_windows() {
        let x = vec![1.0; 5 * 8000];
        let segs = segment(&x, &cfg(2.0, PadMode::None));
        assert_eq!(segs.len(), 4);
        assert_eq!(
            window_offsets(x.len(), 16000, 8000, PadMode::None),
            vec![0, 8000, 16000, 24000]
        );
    }

    #[test]
    fn short_input_zero_padded_once() {
        let x = vec![1.0; 3 * 8000];
        let segs = segment(&x, &cfg(4.0, PadMode::Zero));
        assert_eq!(segs.len(), 1);
        assert_eq!(segs[0].len(), 32000);
        assert!(segs[0][24000..].iter().all(|&v| v == 0.0));
        assert!(segs[0][..24000].iter().all(|&v| v == 1.0));
        assert!(segment(&x, &cfg(4.0, PadMode::None)).is_empty());
    }

    #[test]
    fn exact_length_is_one_window() {
        assert_eq!(segment(&vec![0.5; 16000], &cfg(2.0, PadMode::None)).len(), 1);
    }

    proptest! {
        #[test]
        fn count_formula_matches_enumeration(
            len in 1usize..5000,
            w in 1usize..800,
            overlap_pct in 0usize..95,
        ) {
            let hop = (((100 - overlap_pct) as f64 / 100.0 * w as f64).round() as usize).max(1);
            let got = window_offsets(len, w, hop, PadMode::None);
            let brute: Vec<usize> = (0..len).step_by(hop).filter(|o| o + w <= len).collect();
            prop_assert_eq!(&got, &brute);
            if len >= w {
                prop_assert_eq!(got.len(), (len - w) / hop + 1);
            }
        }
    }
}
