//! Parametric sustained-vowel generator and synthetic multi-cohort benchmark.
//!
//! The signal model is a source-filter approximation. A Rosenberg glottal
//! pulse train with cycle-level period and amplitude perturbation (jitter,
//! shimmer) and slow sinusoidal tremor drives a cascade of three formant
//! resonators tuned to /a/. Aspiration noise is mixed in at the configured
//! harmonic-to-noise ratio. Each dataset then applies its own channel: gain,
//! additive noise floor, Butterworth band-pass and surrounding silence.
//!
//! Gender moves f0 (and slightly the formants). Sources get a deliberate
//! gender imbalance across classes so that f0 leaks label information.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::wav::write_wav_i16;
use crate::cohort::{
    ClassLabel, CohortManifest, Gender, MedicationFlag, PatientRecord, RecordingRecord, Role,
};
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Voice-quality parameters of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassVoice {
    /// Cycle-to-cycle period perturbation, percent (standard deviation).
    pub jitter_pct: f64,
    /// Cycle-to-cycle amplitude perturbation, percent.
    pub shimmer_pct: f64,
    pub noise_hnr_db: f64,
    pub tremor_hz: f64,
    /// Relative depth of the f0 and amplitude modulation.
    pub tremor_depth: f64,
    /// Multiplier on all formant frequencies.
    pub formant_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEffects {
    pub bandpass_hz: (f64, f64),
    pub gain_db: f64,
    /// Level of the white noise floor relative to full scale.
    pub noise_floor_db: f64,
    pub sim_sr_hz: u32,
    /// Silence padded before and after the phonation, seconds.
    pub pad_s: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataset {
    pub id: String,
    pub role: Role,
    /// Patients per class and gender, `[M, F]`.
    pub n_patients: BTreeMap<ClassLabel, [usize; 2]>,
    pub recordings_per_patient: usize,
    pub effects: DomainEffects,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// Mean f0 per gender, `[M, F]`.
    pub f0_mean_hz: [f64; 2],
    pub f0_sd_hz: [f64; 2],
    pub classes: BTreeMap<ClassLabel, ClassVoice>,
    /// Scales every class's departure from the healthy-control voice;
    /// 0 makes classes indistinguishable, larger values make them easier.
    pub severity: f64,
    /// Log-normal spread of per-patient voice parameters.
    pub patient_spread: f64,
    pub duration_s: (f64, f64),
    pub datasets: Vec<SynthDataset>,
}

fn dataset(
    id: &str,
    role: Role,
    cells: &[(ClassLabel, [usize; 2])],
    recordings: usize,
    effects: DomainEffects,
) -> SynthDataset {
    SynthDataset {
        id: id.into(),
        role,
        n_patients: cells.iter().cloned().collect(),
        recordings_per_patient: recordings,
        effects,
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        use ClassLabel::*;
        let classes = [
            (
                HC,
                ClassVoice {
                    jitter_pct: 0.3,
                    shimmer_pct: 2.0,
                    noise_hnr_db: 28.0,
                    tremor_hz: 0.0,
                    tremor_depth: 0.0,
                    formant_scale: 1.0,
                },
            ),
            (
                PD,
                ClassVoice {
                    jitter_pct: 1.5,
                    shimmer_pct: 6.0,
                    noise_hnr_db: 16.0,
                    tremor_hz: 5.0,
                    tremor_depth: 0.05,
                    formant_scale: 0.96,
                },
            ),
            (
                ALS,
                ClassVoice {
                    jitter_pct: 2.5,
                    shimmer_pct: 9.0,
                    noise_hnr_db: 10.0,
                    tremor_hz: 8.0,
                    tremor_depth: 0.03,
                    formant_scale: 0.9,
                },
            ),
        ]
        .into_iter()
        .collect();
        Self {
            seed: 2024,
            f0_mean_hz: [120.0, 210.0],
            f0_sd_hz: [12.0, 16.0],
            classes,
            severity: 1.0,
            patient_spread: 0.25,
            duration_s: (3.0, 4.5),
            datasets: vec![
                // mPower-like smartphone recordings, two per patient.
                dataset(
                    "synth_a",
                    Role::Source,
                    &[(HC, [6, 18]), (PD, [18, 6])],
                    2,
                    DomainEffects {
                        bandpass_hz: (60.0, 7000.0),
                        gain_db: -6.0,
                        noise_floor_db: -55.0,
                        sim_sr_hz: 16000,
                        pad_s: (0.3, 0.4),
                    },
                ),
                dataset(
                    "synth_b",
                    Role::Source,
                    &[(HC, [6, 18]), (ALS, [18, 6])],
                    1,
                    DomainEffects {
                        bandpass_hz: (100.0, 3800.0),
                        gain_db: -12.0,
                        noise_floor_db: -60.0,
                        sim_sr_hz: 8000,
                        pad_s: (0.2, 0.2),
                    },
                ),
                // Telephone channel.
                dataset(
                    "synth_c",
                    Role::Target,
                    &[(HC, [10, 10]), (PD, [10, 10])],
                    1,
                    DomainEffects {
                        bandpass_hz: (300.0, 3400.0),
                        gain_db: -3.0,
                        noise_floor_db: -45.0,
                        sim_sr_hz: 8000,
                        pad_s: (0.5, 0.3),
                    },
                ),
                dataset(
                    "synth_d",
                    Role::Target,
                    &[(HC, [10, 10]), (ALS, [10, 10])],
                    1,
                    DomainEffects {
                        bandpass_hz: (150.0, 9000.0),
                        gain_db: -18.0,
                        noise_floor_db: -70.0,
                        sim_sr_hz: 22050,
                        pad_s: (0.25, 0.5),
                    },
                ),
            ],
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (c, v) in &self.classes {
            if v.jitter_pct < 0.0 || v.shimmer_pct < 0.0 || v.tremor_depth < 0.0 {
                return bad(format!("class {c}: perturbations must be non-negative"));
            }
            if !(v.formant_scale > 0.0) {
                return bad(format!("class {c}: formant_scale must be positive"));
            }
        }
        if !self.classes.contains_key(&ClassLabel::HC) {
            return bad("the HC voice must be defined".into());
        }
        if self.severity < 0.0 || self.patient_spread < 0.0 {
            return bad("severity and patient_spread must be non-negative".into());
        }
        if !(self.duration_s.0 > 0.0 && self.duration_s.0 <= self.duration_s.1) {
            return bad("duration_s must be a positive, ordered range".into());
        }
        for d in &self.datasets {
            let e = &d.effects;
            let (lo, hi) = e.bandpass_hz;
            if !(lo > 0.0 && lo < hi && hi < e.sim_sr_hz as f64 / 2.0) {
                return bad(format!("{}: band-pass must satisfy 0 < low < high < sr/2", d.id));
            }
            if d.recordings_per_patient == 0 {
                return bad(format!("{}: recordings_per_patient must be positive", d.id));
            }
            for (c, n) in &d.n_patients {
                if !self.classes.contains_key(c) {
                    return bad(format!("{}: class {c} has no voice definition", d.id));
                }
                if n[0] + n[1] == 0 {
                    return bad(format!("{}: no patients for class {c}", d.id));
                }
            }
            if d.n_patients.is_empty() {
                return bad(format!("{}: no classes", d.id));
            }
        }
        Ok(())
    }

    /// Class voice with severity applied as a departure from HC.
    fn voice(&self, class: ClassLabel) -> ClassVoice {
        let hc = &self.classes[&ClassLabel::HC];
        let v = &self.classes[&class];
        let s = self.severity;
        let lerp = |a: f64, b: f64| a + s * (b - a);
        ClassVoice {
            jitter_pct: lerp(hc.jitter_pct, v.jitter_pct).max(0.0),
            shimmer_pct: lerp(hc.shimmer_pct, v.shimmer_pct).max(0.0),
            noise_hnr_db: lerp(hc.noise_hnr_db, v.noise_hnr_db),
            tremor_hz: v.tremor_hz,
            tremor_depth: lerp(hc.tremor_depth, v.tremor_depth).max(0.0),
            formant_scale: lerp(hc.formant_scale, v.formant_scale),
        }
    }

    /// Admissible f0 interval per gender: mean ± 2.5 sd.
    pub fn f0_range(&self, g: Gender) -> (f64, f64) {
        let i = g.index();
        (
            self.f0_mean_hz[i] - 2.5 * self.f0_sd_hz[i],
            self.f0_mean_hz[i] + 2.5 * self.f0_sd_hz[i],
        )
    }
}

/// Per-patient voice drawn around its class voice.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientVoice {
    pub f0_hz: f64,
    pub voice: ClassVoice,
    pub gender: Gender,
}

pub fn draw_patient_voice(spec: &SynthSpec, class: ClassLabel, gender: Gender, seed: u64) -> PatientVoice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let i = gender.index();
    let (lo, hi) = spec.f0_range(gender);
    let f0 = (spec.f0_mean_hz[i] + spec.f0_sd_hz[i] * std_normal(&mut rng)).clamp(lo, hi);
    let base = spec.voice(class);
    let z: [f64; 4] = std::array::from_fn(|_| std_normal(&mut rng));
    let spread = |v: f64, z: f64| v * (spec.patient_spread * z).exp();
    let voice = ClassVoice {
        jitter_pct: spread(base.jitter_pct, z[0]),
        shimmer_pct: spread(base.shimmer_pct, z[1]),
        noise_hnr_db: base.noise_hnr_db + 4.0 * spec.patient_spread * z[2],
        tremor_hz: base.tremor_hz,
        tremor_depth: spread(base.tremor_depth, z[3]),
        formant_scale: base.formant_scale,
    };
    PatientVoice { f0_hz: f0, voice, gender }
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Rosenberg glottal flow pulse over one normalised cycle `t ∈ [0, 1)`.
fn rosenberg(t: f64) -> f64 {
    const OPEN: f64 = 0.4;
    const CLOSE: f64 = 0.16;
    if t < OPEN {
        0.5 * (1.0 - (PI * t / OPEN).cos())
    } else if t < OPEN + CLOSE {
        (PI * (t - OPEN) / (2.0 * CLOSE)).cos()
    } else {
        0.0
    }
}

/// Glottal source with jitter, shimmer and tremor, plus the list of cycle
/// lengths in samples (fractional) that produced it.
pub fn glottal_source(pv: &PatientVoice, duration_s: f64, sr: u32, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = (duration_s * sr as f64).round() as usize;
    let v = &pv.voice;
    let phase0 = rng.random::<f64>() * 2.0 * PI;
    let mut out = vec![0.0; n];
    let mut cycles = Vec::new();
    let mut start = 0.0f64;
    while (start as usize) < n {
        let t = start / sr as f64;
        let trem = (2.0 * PI * v.tremor_hz * t + phase0).sin();
        let f0 = pv.f0_hz * (1.0 + v.tremor_depth * trem);
        let period = (sr as f64 / f0) * (1.0 + v.jitter_pct / 100.0 * std_normal(rng)).max(0.2);
        let amp = (1.0 + v.shimmer_pct / 100.0 * std_normal(rng)).max(0.05) * (1.0 + v.tremor_depth * trem);
        let first = start.ceil() as usize;
        let last = ((start + period).ceil() as usize).min(n);
        for (i, o) in out.iter_mut().enumerate().take(last).skip(first) {
            *o = amp * rosenberg((i as f64 - start) / period);
        }
        cycles.push(period);
        start += period;
    }
    (out, cycles)
}

/// Second-order section in direct form I.
#[derive(Clone, Copy, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }

    /// Bilinear-transform low/high-pass section with quality factor `q`.
    fn pass(kind_high: bool, fc: f64, q: f64, sr: f64) -> Self {
        let w0 = 2.0 * PI * fc / sr;
        let (s, c) = w0.sin_cos();
        let alpha = s / (2.0 * q);
        let a0 = 1.0 + alpha;
        let b = if kind_high {
            [(1.0 + c) / 2.0, -(1.0 + c), (1.0 + c) / 2.0]
        } else {
            [(1.0 - c) / 2.0, 1.0 - c, (1.0 - c) / 2.0]
        };
        Self {
            b: b.map(|v| v / a0),
            a: [-2.0 * c / a0, (1.0 - alpha) / a0],
        }
    }

    /// Two-pole resonator with unity gain at DC removed (band-pass shape).
    fn resonator(f: f64, bw: f64, sr: f64) -> Self {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * f / sr;
        let a1 = -2.0 * r * theta.cos();
        let a2 = r * r;
        // Normalise to unit gain at the centre frequency.
        let z = num_complex_unit(theta);
        let den = cabs(cadd(cadd((1.0, 0.0), cmul((a1, 0.0), z)), cmul((a2, 0.0), cmul(z, z))));
        Self {
            b: [den, 0.0, 0.0],
            a: [a1, a2],
        }
    }
}

fn num_complex_unit(theta: f64) -> (f64, f64) {
    // e^{-iθ}
    (theta.cos(), -theta.sin())
}
fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}
fn cadd(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 + b.0, a.1 + b.1)
}
fn cabs(a: (f64, f64)) -> f64 {
    a.0.hypot(a.1)
}

/// Order of each edge of the band-pass.
pub const BANDPASS_ORDER: usize = 8;

/// Butterworth band-pass: an order-8 high-pass at `lo` cascaded with an
/// order-8 low-pass at `hi`, each built from bilinear second-order sections.
pub fn bandpass(x: &[f64], lo: f64, hi: f64, sr: u32) -> Vec<f64> {
    let mut y = x.to_vec();
    let n = BANDPASS_ORDER;
    for k in 0..n / 2 {
        let q = 1.0 / (2.0 * ((2 * k + 1) as f64 * PI / (2 * n) as f64).sin());
        Biquad::pass(true, lo, q, sr as f64).run(&mut y);
        Biquad::pass(false, hi, q, sr as f64).run(&mut y);
    }
    y
}

/// /a/ formants for an adult male voice: frequency and bandwidth in Hz.
const FORMANTS: [(f64, f64); 3] = [(730.0, 90.0), (1090.0, 110.0), (2440.0, 160.0)];
/// Female vocal tracts are shorter; formants scale up by this factor.
const FEMALE_FORMANT_SCALE: f64 = 1.17;

/// Clean phonation at `sr`: glottal source, aspiration noise, formants,
/// lip radiation and onset/offset ramps. Peak is normalised to 0.5.
pub fn clean_phonation(pv: &PatientVoice, duration_s: f64, sr: u32, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (mut x, _) = glottal_source(pv, duration_s, sr, rng);
    let p_h = x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64;
    let noise_sd = (p_h * 10f64.powf(-pv.voice.noise_hnr_db / 10.0)).sqrt();
    for v in x.iter_mut() {
        *v += noise_sd * std_normal(rng);
    }
    let gscale = if pv.gender == Gender::F { FEMALE_FORMANT_SCALE } else { 1.0 };
    let mut y = vec![0.0; x.len()];
    for &(f, bw) in &FORMANTS {
        let fc = f * gscale * pv.voice.formant_scale;
        if fc < 0.45 * sr as f64 {
            let mut part = x.clone();
            Biquad::resonator(fc, bw, sr as f64).run(&mut part);
            for (a, b) in y.iter_mut().zip(&part) {
                *a += b;
            }
        }
    }
    // Lip radiation as a first difference.
    let mut prev = 0.0;
    for v in y.iter_mut() {
        let cur = *v;
        *v = cur - 0.97 * prev;
        prev = cur;
    }
    let ramp = (0.05 * sr as f64) as usize;
    let n = y.len();
    for i in 0..ramp.min(n / 2) {
        let g = 0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos();
        y[i] *= g;
        y[n - 1 - i] *= g;
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        y.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    y
}

/// Dataset channel: gain, noise floor, band-pass, silence padding.
pub fn apply_domain_effects(x: &[f64], e: &DomainEffects, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gain = 10f64.powf(e.gain_db / 20.0);
    let floor = 10f64.powf(e.noise_floor_db / 20.0);
    let noisy: Vec<f64> = x.iter().map(|v| gain * v + floor * std_normal(rng)).collect();
    let filtered = bandpass(&noisy, e.bandpass_hz.0, e.bandpass_hz.1, e.sim_sr_hz);
    let sr = e.sim_sr_hz as f64;
    let mut out = vec![0.0; (e.pad_s.0 * sr) as usize];
    out.extend(filtered);
    out.extend(std::iter::repeat(0.0).take((e.pad_s.1 * sr) as usize));
    out
}

/// One recording of a patient in a dataset, at the dataset's sample rate.
pub fn synth_phonation(
    class: ClassLabel,
    gender: Gender,
    effects: &DomainEffects,
    spec: &SynthSpec,
    seed: u64,
) -> Result<Vec<f64>> {
    if !spec.classes.contains_key(&class) {
        return Err(Error::Config(format!("class {class} has no voice definition")));
    }
    let pv = draw_patient_voice(spec, class, gender, derive_seed(seed, "voice"));
    Ok(render(&pv, effects, spec, derive_seed(seed, "render")))
}

fn render(pv: &PatientVoice, effects: &DomainEffects, spec: &SynthSpec, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = spec.duration_s;
    let dur = a + (b - a) * rng.random::<f64>();
    let clean = clean_phonation(pv, dur, effects.sim_sr_hz, &mut rng);
    apply_domain_effects(&clean, effects, &mut rng)
}

/// Manifests written by [`build_synth_benchmark`], one per dataset.
#[derive(Clone, Debug)]
pub struct SynthBenchmark {
    pub root: PathBuf,
    pub manifests: Vec<(SynthDataset, PathBuf, CohortManifest)>,
}

impl SynthBenchmark {
    pub fn sources(&self) -> Vec<&CohortManifest> {
        self.manifests
            .iter()
            .filter(|(d, _, _)| d.role == Role::Source)
            .map(|(_, _, m)| m)
            .collect()
    }

    pub fn targets(&self) -> Vec<&CohortManifest> {
        self.manifests
            .iter()
            .filter(|(d, _, _)| d.role == Role::Target)
            .map(|(_, _, m)| m)
            .collect()
    }
}

/// Generate every dataset of `spec` under `root`: WAV files in
/// `<root>/<dataset>/` and a manifest `<root>/<dataset>.csv` with paths
/// relative to `root`.
pub fn build_synth_benchmark(spec: &SynthSpec, root: &Path) -> Result<SynthBenchmark> {
    spec.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut out = Vec::new();
    for ds in &spec.datasets {
        let mut patients = Vec::new();
        let mut recordings = Vec::new();
        for (&class, counts) in &ds.n_patients {
            for (gi, &n) in counts.iter().enumerate() {
                let gender = if gi == 0 { Gender::M } else { Gender::F };
                for i in 0..n {
                    let pid = format!("{}{}{:03}", class.as_str().to_lowercase(), gender, i);
                    let pseed = derive_seed(spec.seed, &format!("{}/{pid}", ds.id));
                    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(pseed, "meta"));
                    patients.push(PatientRecord {
                        patient_id: pid.clone(),
                        dataset_id: ds.id.clone(),
                        class_label: Some(class),
                        gender: Some(gender),
                        age: Some(rng.random_range(45..=78)),
                        exclusion_codes: Default::default(),
                        medication_flag: MedicationFlag::Standard,
                    });
                    let pv = draw_patient_voice(spec, class, gender, derive_seed(pseed, "voice"));
                    for r in 0..ds.recordings_per_patient {
                        let rid = format!("{pid}_r{r}");
                        let wave = render(&pv, &ds.effects, spec, derive_seed(pseed, &format!("rec{r}")));
                        let rel = PathBuf::from(&ds.id).join(format!("{rid}.wav"));
                        write_wav_i16(&root.join(&rel), &wave, ds.effects.sim_sr_hz)?;
                        recordings.push(RecordingRecord {
                            recording_id: rid,
                            patient_id: pid.clone(),
                            dataset_id: ds.id.clone(),
                            audio_path: rel,
                            sample_rate_hz: Some(ds.effects.sim_sr_hz),
                            duration_s: Some(wave.len() as f64 / ds.effects.sim_sr_hz as f64),
                        });
                    }
                }
            }
        }
        let mut m = CohortManifest::new(patients, recordings, ds.role)?;
        m.base_dir = root.to_path_buf();
        let path = root.join(format!("{}.csv", ds.id));
        m.write_csv(&path)?;
        out.push((ds.clone(), path, m));
    }
    Ok(SynthBenchmark {
        root: root.to_path_buf(),
        manifests: out,
    })
}
