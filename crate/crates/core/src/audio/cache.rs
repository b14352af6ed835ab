//! On-disk feature cache: one container file per segment plus a JSON index.
//!
//! Layout under the cache root:
//!
//! ```text
//! index.json
//! level_stats.json
//! segments/<dataset>/<recording>/meta.json
//! segments/<dataset>/<recording>/<k>.fpda
//! ```
//!
//! A recording whose `meta.json` carries the current fingerprint and whose
//! segment files all decode is skipped on a rerun, which makes prep resumable.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{FeatureConfig, FeatureExtractor};
use super::level::{level_stats_from_levels, rms_dbfs, rms_equalize, LevelStats};
use super::{preprocess_recording, segment, wav, PrepConfig, RESAMPLER_ID};
use crate::cohort::{ClassLabel, CohortManifest, Gender, RecordingRecord, Role};
use crate::container::{write_atomic, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const INDEX_FILE: &str = "index.json";
const LEVEL_FILE: &str = "level_stats.json";
const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMeta {
    pub patient_id: String,
    pub recording_id: String,
    pub segment_index: usize,
    pub label: ClassLabel,
    pub gender: Gender,
    pub dataset_id: String,
    pub clipped_gain_flag: bool,
    /// Path relative to the cache root.
    pub file: String,
}

impl SegmentMeta {
    pub fn patient_key(&self) -> String {
        crate::cohort::patient_key(&self.dataset_id, &self.patient_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepFailure {
    pub dataset_id: String,
    pub recording_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheIndex {
    pub format_version: u16,
    pub resampler_id: String,
    pub prep: PrepConfig,
    pub features: FeatureConfig,
    pub level_stats: LevelStats,
    /// `[rows, frames]` shared by every segment.
    pub feature_shape: [usize; 2],
    pub segments: Vec<SegmentMeta>,
    /// Recordings shorter than one window under `pad_mode = none`.
    pub too_short: Vec<String>,
    pub failures: Vec<PrepFailure>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrepReport {
    pub processed: usize,
    pub reused: usize,
    pub segments: usize,
    pub too_short: usize,
    pub failures: Vec<PrepFailure>,
}

#[derive(Serialize, Deserialize)]
struct RecordingMeta {
    fingerprint: String,
    segments: Vec<SegmentMeta>,
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c == '/' || c == '\\' || c == ':' { '_' } else { c })
        .collect()
}

fn fingerprint(prep: &PrepConfig, feat: &FeatureConfig, target_dbfs: f64) -> String {
    serde_json::json!({
        "resampler": RESAMPLER_ID,
        "prep": prep,
        "features": feat,
        "target_dbfs": target_dbfs,
    })
    .to_string()
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

/// Read-only view of a finished cache.
pub struct FeatureCache {
    pub root: PathBuf,
    pub index: CacheIndex,
}

impl FeatureCache {
    pub fn open(root: &Path) -> Result<Self> {
        let index: CacheIndex = read_json(&root.join(INDEX_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            index,
        })
    }

    /// Load one segment as a `[rows, frames]` tensor.
    pub fn load(&self, meta: &SegmentMeta) -> Result<Tensor> {
        let path = self.root.join(&meta.file);
        let rec = TensorRecord::read(&path)?;
        Tensor::new(&rec.dims, rec.payload.to_f64())
    }
}

fn preprocess_file(
    manifest: &CohortManifest,
    rec: &RecordingRecord,
    prep: &PrepConfig,
) -> Result<Vec<f64>> {
    let (x, sr) = wav::read_wav(&manifest.resolve_audio(rec))?;
    preprocess_recording(&x, sr, prep)
}

/// Level statistics over every recording of the source manifests.
fn source_level_stats(manifests: &[&CohortManifest], prep: &PrepConfig) -> Result<LevelStats> {
    let mut levels = Vec::new();
    for m in manifests.iter().filter(|m| m.role == Role::Source) {
        for rec in &m.recordings {
            match preprocess_file(m, rec, prep) {
                Ok(y) => levels.push((rec.dataset_id.clone(), rms_dbfs(&y))),
                Err(e) => log::warn!(
                    "level statistics skip {}/{}: {e}",
                    rec.dataset_id,
                    rec.recording_id
                ),
            }
        }
    }
    level_stats_from_levels(levels)
}

/// Run the full preprocessing chain over every recording of `manifests` and
/// write the cache under `root`. Per-recording failures are collected in the
/// report and the index rather than aborting the run.
pub fn prep_cohort(
    manifests: &[&CohortManifest],
    prep: &PrepConfig,
    feat: &FeatureConfig,
    root: &Path,
) -> Result<PrepReport> {
    prep.validate()?;
    let fx = FeatureExtractor::new(feat, prep.target_sr_hz)?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let level_path = root.join(LEVEL_FILE);
    let stats = match prep.rms_target_dbfs {
        Some(t) => LevelStats {
            per_dataset_rms_dbfs: BTreeMap::new(),
            global_target_dbfs: t,
            excluded_zero_rms: 0,
        },
        None => {
            #[derive(Serialize, Deserialize)]
            struct Saved {
                prep: PrepConfig,
                resampler_id: String,
                stats: LevelStats,
            }
            let cached = read_json::<Saved>(&level_path)
                .ok()
                .filter(|s| &s.prep == prep && s.resampler_id == RESAMPLER_ID);
            match cached {
                Some(s) => s.stats,
                None => {
                    let stats = source_level_stats(manifests, prep)?;
                    let saved = Saved {
                        prep: prep.clone(),
                        resampler_id: RESAMPLER_ID.into(),
                        stats: stats.clone(),
                    };
                    write_json(&level_path, &saved)?;
                    stats
                }
            }
        }
    };
    let target = stats.global_target_dbfs;
    let fp = fingerprint(prep, feat, target);
    let (w, _) = super::segment::window_geometry(prep, prep.target_sr_hz);
    let shape = [feat.n_bands(), fx.n_frames(w)];

    let mut report = PrepReport::default();
    let mut segments = Vec::new();
    let mut too_short = Vec::new();
    for m in manifests {
        for rec in &m.recordings {
            let rec_dir = PathBuf::from("segments")
                .join(sanitize(&rec.dataset_id))
                .join(sanitize(&rec.recording_id));
            let meta_path = root.join(&rec_dir).join(META_FILE);
            if let Ok(saved) = read_json::<RecordingMeta>(&meta_path) {
                let intact = saved.fingerprint == fp
                    && saved
                        .segments
                        .iter()
                        .all(|s| TensorRecord::read(&root.join(&s.file)).is_ok());
                if intact {
                    report.reused += 1;
                    if saved.segments.is_empty() {
                        too_short.push(format!("{}/{}", rec.dataset_id, rec.recording_id));
                    }
                    segments.extend(saved.segments);
                    continue;
                }
            }
            let result = (|| -> Result<Vec<SegmentMeta>> {
                let patient = m
                    .patient(&rec.patient_key())
                    .ok_or_else(|| Error::Integrity(format!("no patient {}", rec.patient_key())))?;
                let (label, gender) = (patient.label()?, patient.gender()?);
                let y = preprocess_file(m, rec, prep)?;
                let (y, clipped) = rms_equalize(&y, target)?;
                let mut metas = Vec::new();
                for (k, win) in segment(&y, prep).iter().enumerate() {
                    let (data, dims) = fx.extract(win)?;
                    let file = rec_dir.join(format!("{k}.fpda"));
                    let data = data.into_iter().map(|v| v as f32).collect();
                    TensorRecord::f32(&dims, data).write(&root.join(&file))?;
                    metas.push(SegmentMeta {
                        patient_id: rec.patient_id.clone(),
                        recording_id: rec.recording_id.clone(),
                        segment_index: k,
                        label,
                        gender,
                        dataset_id: rec.dataset_id.clone(),
                        clipped_gain_flag: clipped,
                        file: file.to_string_lossy().replace('\\', "/"),
                    });
                }
                write_json(
                    &meta_path,
                    &RecordingMeta {
                        fingerprint: fp.clone(),
                        segments: metas.clone(),
                    },
                )?;
                Ok(metas)
            })();
            match result {
                Ok(metas) => {
                    report.processed += 1;
                    if metas.is_empty() {
                        log::warn!(
                            "{}/{} is shorter than one window; no segments",
                            rec.dataset_id,
                            rec.recording_id
                        );
                        too_short.push(format!("{}/{}", rec.dataset_id, rec.recording_id));
                    }
                    segments.extend(metas);
                }
                Err(e) => report.failures.push(PrepFailure {
                    dataset_id: rec.dataset_id.clone(),
                    recording_id: rec.recording_id.clone(),
                    error: e.to_string(),
                }),
            }
        }
    }
    report.segments = segments.len();
    report.too_short = too_short.len();
    let index = CacheIndex {
        format_version: crate::container::FORMAT_VERSION,
        resampler_id: RESAMPLER_ID.into(),
        prep: prep.clone(),
        features: feat.clone(),
        level_stats: stats,
        feature_shape: shape,
        segments,
        too_short,
        failures: report.failures.clone(),
    };
    write_json(&root.join(INDEX_FILE), &index)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{MedicationFlag, PatientRecord};
    use std::collections::BTreeSet;

    fn fixture(dir: &Path) -> CohortManifest {
        let mut patients = Vec::new();
        let mut recordings = Vec::new();
        for (i, (label, amp)) in [(ClassLabel::HC, 0.2), (ClassLabel::PD, 0.05)].iter().enumerate() {
            let pid = format!("p{i}");
            patients.push(PatientRecord {
                patient_id: pid.clone(),
                dataset_id: "ds".into(),
                class_label: Some(*label),
                gender: Some(Gender::F),
                age: Some(60),
                exclusion_codes: BTreeSet::new(),
                medication_flag: MedicationFlag::Standard,
            });
            let x: Vec<f64> = (0..16000 * 3)
                .map(|n| amp * (n as f64 * 0.07).sin() * (1.0 + 0.3 * (n as f64 * 0.0011).sin()))
                .collect();
            let path = dir.join(format!("{pid}.wav"));
            wav::write_wav_i16(&path, &x, 16000).unwrap();
            recordings.push(RecordingRecord {
                recording_id: format!("r{i}"),
                patient_id: pid,
                dataset_id: "ds".into(),
                audio_path: path,
                sample_rate_hz: None,
                duration_s: None,
            });
        }
        CohortManifest::new(patients, recordings, Role::Source).unwrap()
    }

    #[test]
    fn prep_writes_index_and_is_deterministic_and_resumable() {
        let tmp = tempfile::tempdir().unwrap();
        let m = fixture(tmp.path());
        let prep = PrepConfig::default();
        let feat = FeatureConfig::default();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let r1 = prep_cohort(&[&m], &prep, &feat, &a).unwrap();
        assert_eq!(r1.processed, 2);
        assert!(r1.failures.is_empty());
        let cache = FeatureCache::open(&a).unwrap();
        assert_eq!(cache.index.feature_shape, [64, 198]);
        assert_eq!(cache.index.resampler_id, RESAMPLER_ID);
        // 3 s at 8 kHz, 2 s windows, 1 s hop, minus VAD trimming.
        assert!(cache.index.segments.len() >= 2);
        let t = cache.load(&cache.index.segments[0]).unwrap();
        assert_eq!(t.shape(), &[64, 198]);
        assert!(t.all_finite());

        prep_cohort(&[&m], &prep, &feat, &b).unwrap();
        for s in &cache.index.segments {
            let x = std::fs::read(a.join(&s.file)).unwrap();
            let y = std::fs::read(b.join(&s.file)).unwrap();
            assert_eq!(x, y);
        }

        let r2 = prep_cohort(&[&m], &prep, &feat, &a).unwrap();
        assert_eq!(r2.reused, 2);
        assert_eq!(r2.processed, 0);
        assert_eq!(FeatureCache::open(&a).unwrap().index, cache.index);
    }

    #[test]
    fn failures_are_collected() {
        let tmp = tempfile::tempdir().unwrap();
        let mut m = fixture(tmp.path());
        m.recordings[1].audio_path = tmp.path().join("missing.wav");
        let r = prep_cohort(&[&m], &PrepConfig::default(), &FeatureConfig::default(), &tmp.path().join("c"))
            .unwrap();
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].recording_id, "r1");
        assert_eq!(r.processed, 1);
    }
}
