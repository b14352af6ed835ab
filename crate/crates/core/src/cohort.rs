//! Multi-cohort manifests, inclusion filtering and patient-level splits.
//!
//! A manifest is a flat CSV with one row per recording; patient fields are
//! repeated on every row of that patient. Patients are identified globally by
//! their [`PatientRecord::key`] (`dataset_id/patient_id`), which is what split
//! plans refer to.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::derive_seed;

pub const NUM_CLASSES: usize = 3;

pub const MANIFEST_HEADER: [&str; 9] = [
    "patient_id",
    "dataset_id",
    "class_label",
    "gender",
    "age",
    "exclusion_codes",
    "medication_flag",
    "recording_id",
    "audio_path",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ClassLabel {
    HC,
    PD,
    ALS,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; NUM_CLASSES] = [ClassLabel::HC, ClassLabel::PD, ClassLabel::ALS];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::HC => "HC",
            ClassLabel::PD => "PD",
            ClassLabel::ALS => "ALS",
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "HC" => Ok(ClassLabel::HC),
            "PD" => Ok(ClassLabel::PD),
            "ALS" => Ok(ClassLabel::ALS),
            other => Err(format!("invalid class_label {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::M => "M",
            Gender::F => "F",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Gender {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "M" => Ok(Gender::M),
            "F" => Ok(Gender::F),
            other => Err(format!("invalid gender {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MedicationFlag {
    Standard,
    NonStandard,
    #[default]
    Missing,
}

impl MedicationFlag {
    fn parse(s: &str) -> std::result::Result<Self, String> {
        match s {
            "standard" => Ok(MedicationFlag::Standard),
            "non_standard" => Ok(MedicationFlag::NonStandard),
            "" | "missing" => Ok(MedicationFlag::Missing),
            other => Err(format!("invalid medication_flag {other:?}")),
        }
    }

    fn as_csv(self) -> &'static str {
        match self {
            MedicationFlag::Standard => "standard",
            MedicationFlag::NonStandard => "non_standard",
            MedicationFlag::Missing => "",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    #[default]
    Source,
    Target,
}

/// One subject. Optional fields are `None` when the manifest cell is empty;
/// [`apply_filters`] removes incomplete patients.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub dataset_id: String,
    pub class_label: Option<ClassLabel>,
    pub gender: Option<Gender>,
    pub age: Option<u32>,
    pub exclusion_codes: BTreeSet<String>,
    pub medication_flag: MedicationFlag,
}

impl PatientRecord {
    pub fn key(&self) -> String {
        patient_key(&self.dataset_id, &self.patient_id)
    }

    pub fn is_complete(&self) -> bool {
        self.class_label.is_some() && self.gender.is_some() && self.age.is_some()
    }

    pub fn label(&self) -> Result<ClassLabel> {
        self.class_label
            .ok_or_else(|| Error::Integrity(format!("patient {} has no class label", self.key())))
    }

    pub fn gender(&self) -> Result<Gender> {
        self.gender
            .ok_or_else(|| Error::Integrity(format!("patient {} has no gender", self.key())))
    }
}

pub fn patient_key(dataset_id: &str, patient_id: &str) -> String {
    format!("{dataset_id}/{patient_id}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecordingRecord {
    pub recording_id: String,
    pub patient_id: String,
    pub dataset_id: String,
    pub audio_path: PathBuf,
    /// Filled by [`CohortManifest::probe_audio`].
    pub sample_rate_hz: Option<u32>,
    pub duration_s: Option<f64>,
}

impl RecordingRecord {
    pub fn patient_key(&self) -> String {
        patient_key(&self.dataset_id, &self.patient_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CohortManifest {
    pub patients: Vec<PatientRecord>,
    pub recordings: Vec<RecordingRecord>,
    pub role: Role,
    pub label_space: BTreeSet<ClassLabel>,
    /// Relative audio paths resolve against this directory.
    pub base_dir: PathBuf,
}

impl CohortManifest {
    /// Build and validate a manifest; `label_space` is derived.
    pub fn new(
        patients: Vec<PatientRecord>,
        recordings: Vec<RecordingRecord>,
        role: Role,
    ) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for p in &patients {
            if !seen.insert(p.key()) {
                return Err(Error::Integrity(format!("duplicate patient {}", p.key())));
            }
        }
        let mut rec_ids = BTreeSet::new();
        for r in &recordings {
            if !seen.contains(&r.patient_key()) {
                return Err(Error::Integrity(format!(
                    "recording {} references unknown patient {}",
                    r.recording_id,
                    r.patient_key()
                )));
            }
            if !rec_ids.insert((r.dataset_id.clone(), r.recording_id.clone())) {
                return Err(Error::Integrity(format!(
                    "duplicate recording {}/{}",
                    r.dataset_id, r.recording_id
                )));
            }
        }
        let label_space = patients.iter().filter_map(|p| p.class_label).collect();
        Ok(Self {
            patients,
            recordings,
            role,
            label_space,
            base_dir: PathBuf::new(),
        })
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn dataset_ids(&self) -> BTreeSet<String> {
        self.patients.iter().map(|p| p.dataset_id.clone()).collect()
    }

    pub fn patient(&self, key: &str) -> Option<&PatientRecord> {
        self.patients.iter().find(|p| p.key() == key)
    }

    pub fn patient_keys(&self) -> BTreeSet<String> {
        self.patients.iter().map(PatientRecord::key).collect()
    }

    pub fn resolve_audio(&self, rec: &RecordingRecord) -> PathBuf {
        if rec.audio_path.is_absolute() {
            rec.audio_path.clone()
        } else {
            self.base_dir.join(&rec.audio_path)
        }
    }

    /// Concatenate manifests of the same role.
    pub fn merge(parts: &[CohortManifest]) -> Result<Self> {
        let role = parts.first().map(|m| m.role).unwrap_or_default();
        if parts.iter().any(|m| m.role != role) {
            return Err(Error::Validation("cannot merge source and target manifests".into()));
        }
        let mut patients = Vec::new();
        let mut recordings = Vec::new();
        for m in parts {
            patients.extend(m.patients.iter().cloned());
            recordings.extend(m.recordings.iter().map(|r| {
                let mut r = r.clone();
                r.audio_path = m.resolve_audio(&r);
                r
            }));
        }
        Self::new(patients, recordings, role)
    }

    /// Read sample rate and duration of every recording from its WAV header.
    pub fn probe_audio(&mut self) -> Result<()> {
        let base = self.base_dir.clone();
        for r in &mut self.recordings {
            let path = if r.audio_path.is_absolute() {
                r.audio_path.clone()
            } else {
                base.join(&r.audio_path)
            };
            let reader = hound::WavReader::open(&path).map_err(|e| Error::Wav {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            let spec = reader.spec();
            r.sample_rate_hz = Some(spec.sample_rate);
            r.duration_s = Some(reader.duration() as f64 / spec.sample_rate as f64);
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_io(path, e))?;
        let by_key: BTreeMap<String, &PatientRecord> =
            self.patients.iter().map(|p| (p.key(), p)).collect();
        let mut with_recordings = BTreeSet::new();
        for r in &self.recordings {
            let p = by_key[&r.patient_key()];
            with_recordings.insert(p.key());
            w.write_record(patient_row(p, &r.recording_id, &r.audio_path.to_string_lossy()))
                .map_err(|e| csv_io(path, e))?;
        }
        for p in &self.patients {
            if !with_recordings.contains(&p.key()) {
                w.write_record(patient_row(p, "", ""))
                    .map_err(|e| csv_io(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn patient_row(p: &PatientRecord, recording_id: &str, audio: &str) -> Vec<String> {
    vec![
        p.patient_id.clone(),
        p.dataset_id.clone(),
        p.class_label.map(|c| c.to_string()).unwrap_or_default(),
        p.gender.map(|g| g.to_string()).unwrap_or_default(),
        p.age.map(|a| a.to_string()).unwrap_or_default(),
        p.exclusion_codes.iter().cloned().collect::<Vec<_>>().join(";"),
        p.medication_flag.as_csv().to_string(),
        recording_id.to_string(),
        audio.to_string(),
    ]
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            msg: format!("{other:?}"),
        },
    }
}

fn parse_opt<T: FromStr<Err = String>>(s: &str, line: u64) -> Result<Option<T>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|msg| Error::Validation(format!("line {line}: {msg}")))
}

/// Load a manifest CSV as a source-role manifest.
pub fn load_manifest(path: &Path) -> Result<CohortManifest> {
    load_manifest_with_role(path, Role::Source)
}

pub fn load_manifest_with_role(path: &Path, role: Role) -> Result<CohortManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_io(path, e))?;
    let header = reader.headers().map_err(|e| Error::Parse {
        line: 1,
        msg: e.to_string(),
    })?;
    if header.iter().map(str::trim).ne(MANIFEST_HEADER.iter().copied()) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header {}", MANIFEST_HEADER.join(",")),
        });
    }
    let mut patients: Vec<PatientRecord> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut recordings = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let f: Vec<&str> = row.iter().map(str::trim).collect();
        if f[0].is_empty() || f[1].is_empty() {
            return Err(Error::Parse {
                line,
                msg: "patient_id and dataset_id are required".into(),
            });
        }
        let age = if f[4].is_empty() {
            None
        } else {
            Some(f[4].parse::<u32>().map_err(|_| {
                Error::Validation(format!("line {line}: invalid age {:?}", f[4]))
            })?)
        };
        let patient = PatientRecord {
            patient_id: f[0].to_string(),
            dataset_id: f[1].to_string(),
            class_label: parse_opt(f[2], line)?,
            gender: parse_opt(f[3], line)?,
            age,
            exclusion_codes: f[5]
                .split(';')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect(),
            medication_flag: MedicationFlag::parse(f[6])
                .map_err(|m| Error::Validation(format!("line {line}: {m}")))?,
        };
        let key = patient.key();
        match index.get(&key) {
            Some(&i) if patients[i] != patient => {
                return Err(Error::Integrity(format!(
                    "line {line}: patient {key} repeated with conflicting fields"
                )));
            }
            Some(_) => {}
            None => {
                index.insert(key, patients.len());
                patients.push(patient);
            }
        }
        match (f[7].is_empty(), f[8].is_empty()) {
            (true, true) => {}
            (false, false) => recordings.push(RecordingRecord {
                recording_id: f[7].to_string(),
                patient_id: f[0].to_string(),
                dataset_id: f[1].to_string(),
                audio_path: PathBuf::from(f[8]),
                sample_rate_hz: None,
                duration_s: None,
            }),
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: "recording_id and audio_path must both be set or both empty".into(),
                })
            }
        }
    }
    let mut m = CohortManifest::new(patients, recordings, role)?;
    m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(m)
}

/// Inclusion criteria.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub min_age: u32,
    pub max_age: u32,
    pub excluded_codes: BTreeSet<String>,
    pub require_medication_standard: bool,
}

/// Speech-affecting comorbidities excluded by default. This list is a
/// reasonable starting point, not an authoritative clinical list; supply the
/// study-specific set through configuration.
pub const DEFAULT_EXCLUDED_CODES: [&str; 10] = [
    "stroke",
    "brain_tumor",
    "multiple_sclerosis",
    "dementia",
    "laryngeal_cancer",
    "vocal_fold_paralysis",
    "vocal_fold_nodules",
    "head_neck_surgery",
    "hearing_loss",
    "chronic_laryngitis",
];

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_age: 34,
            max_age: 80,
            excluded_codes: DEFAULT_EXCLUDED_CODES.iter().map(|s| s.to_string()).collect(),
            require_medication_standard: false,
        }
    }
}

pub fn apply_filters(m: &CohortManifest, f: &FilterConfig) -> Result<CohortManifest> {
    if f.min_age > f.max_age {
        return Err(Error::Config(format!(
            "min_age {} > max_age {}",
            f.min_age, f.max_age
        )));
    }
    let keep = |p: &PatientRecord| {
        let Some(age) = p.age else { return false };
        p.is_complete()
            && (f.min_age..=f.max_age).contains(&age)
            && p.exclusion_codes.is_disjoint(&f.excluded_codes)
            && (!f.require_medication_standard || p.medication_flag == MedicationFlag::Standard)
    };
    let patients: Vec<PatientRecord> = m.patients.iter().filter(|p| keep(p)).cloned().collect();
    if patients.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let kept: BTreeSet<String> = patients.iter().map(PatientRecord::key).collect();
    let recordings = m
        .recordings
        .iter()
        .filter(|r| kept.contains(&r.patient_key()))
        .cloned()
        .collect();
    let mut out = CohortManifest::new(patients, recordings, m.role)?;
    out.base_dir = m.base_dir.clone();
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Patient-level split assignments. All ids are patient keys.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub folds: Vec<Fold>,
    pub uda_adaptation: Vec<String>,
    pub uda_external_eval: Vec<String>,
}

impl SplitPlan {
    /// Combine a cross-validation plan with UDA assignments.
    pub fn with_uda(mut self, uda: &SplitPlan) -> Self {
        self.uda_adaptation.extend(uda.uda_adaptation.iter().cloned());
        self.uda_external_eval
            .extend(uda.uda_external_eval.iter().cloned());
        self.uda_adaptation.sort();
        self.uda_external_eval.sort();
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Patients grouped by `(dataset_id, class_label)`, in stable order.
fn strata(m: &CohortManifest) -> Result<BTreeMap<(String, ClassLabel), Vec<String>>> {
    let mut out: BTreeMap<(String, ClassLabel), Vec<String>> = BTreeMap::new();
    for p in &m.patients {
        out.entry((p.dataset_id.clone(), p.label()?))
            .or_default()
            .push(p.key());
    }
    for v in out.values_mut() {
        v.sort();
    }
    Ok(out)
}

/// Stratified patient-level k-fold assignment.
///
/// Each `(dataset, class)` stratum is shuffled and dealt round-robin over the
/// folds; the dealing position carries over between strata so that strata
/// smaller than `k` still spread evenly.
pub fn make_cv_splits(m: &CohortManifest, k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("need at least 2 folds, got {k}")));
    }
    if k > m.patients.len() {
        return Err(Error::Validation(format!(
            "{k} folds for {} patients",
            m.patients.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "cv"));
    let mut tests: Vec<Vec<String>> = vec![Vec::new(); k];
    let mut cursor = 0;
    for (_, mut ids) in strata(m)? {
        ids.shuffle(&mut rng);
        for id in ids {
            tests[cursor % k].push(id);
            cursor += 1;
        }
    }
    let all = m.patient_keys();
    let folds = tests
        .into_iter()
        .map(|mut test| {
            test.sort();
            let test_set: BTreeSet<&String> = test.iter().collect();
            let train = all.iter().filter(|p| !test_set.contains(p)).cloned().collect();
            Fold { train, test }
        })
        .collect();
    Ok(SplitPlan {
        seed,
        folds,
        ..SplitPlan::default()
    })
}

/// Per-dataset, class-stratified selection of `⌊fraction·n⌋` (at least 1)
/// unlabelled adaptation patients; the rest are held out for external
/// evaluation.
pub fn make_uda_split(m: &CohortManifest, fraction: f64, seed: u64) -> Result<SplitPlan> {
    if m.role != Role::Target {
        return Err(Error::Validation("UDA split needs a target manifest".into()));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1)")));
    }
    let mut by_dataset: BTreeMap<String, BTreeMap<ClassLabel, Vec<String>>> = BTreeMap::new();
    for ((ds, label), ids) in strata(m)? {
        by_dataset.entry(ds).or_default().insert(label, ids);
    }
    let mut adaptation = Vec::new();
    let mut external = Vec::new();
    for (ds, classes) in by_dataset {
        let n: usize = classes.values().map(Vec::len).sum();
        let n_adapt = (((fraction * n as f64) + 1e-9).floor() as usize).max(1);
        if n_adapt >= n {
            return Err(Error::Validation(format!(
                "target dataset {ds} has {n} patients; fraction {fraction} leaves no evaluation set"
            )));
        }
        let counts: Vec<usize> = classes.values().map(Vec::len).collect();
        let quotas = apportion(n_adapt, &counts);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("uda/{ds}")));
        for ((_, mut ids), q) in classes.into_iter().zip(quotas) {
            ids.shuffle(&mut rng);
            let rest = ids.split_off(q);
            adaptation.extend(ids);
            external.extend(rest);
        }
    }
    adaptation.sort();
    external.sort();
    Ok(SplitPlan {
        seed,
        folds: Vec::new(),
        uda_adaptation: adaptation,
        uda_external_eval: external,
    })
}

/// Largest-remainder apportionment of `total` over groups sized `counts`.
fn apportion(total: usize, counts: &[usize]) -> Vec<usize> {
    let n: usize = counts.iter().sum();
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| total as f64 * c as f64 / n as f64)
        .collect();
    let mut quotas: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - quotas.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for i in order.into_iter().cycle() {
        if left == 0 {
            break;
        }
        if quotas[i] < counts[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}
