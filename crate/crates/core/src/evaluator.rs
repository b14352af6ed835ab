//! Patient-level pooling, classification metrics, gender fairness gaps and
//! paired significance tests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{ClassLabel, Gender, NUM_CLASSES};
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::util::mean_std;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Internal,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientPrediction {
    /// Global patient key (`dataset/patient`).
    pub patient_id: String,
    pub pooled_probs: Vec<f64>,
    pub predicted_class: ClassLabel,
    pub true_class: ClassLabel,
    pub gender: Gender,
    pub cohort: Cohort,
    pub fold: usize,
}

impl PatientPrediction {
    pub fn correct(&self) -> bool {
        self.predicted_class == self.true_class
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean of the segment probability vectors and its argmax.
pub fn pool_patient(segment_probs: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
    let first = segment_probs
        .first()
        .ok_or_else(|| Error::Validation("patient has no segments".into()))?;
    let k = first.len();
    let mut pooled = vec![0.0; k];
    for p in segment_probs {
        if p.len() != k {
            return Err(Error::Shape("segment probability vectors differ in length".into()));
        }
        for (a, b) in pooled.iter_mut().zip(p) {
            *a += b;
        }
    }
    let n = segment_probs.len() as f64;
    pooled.iter_mut().for_each(|v| *v /= n);
    let c = argmax(&pooled);
    Ok((pooled, c))
}

/// `K × K` confusion matrix indexed `[truth][prediction]`.
pub fn confusion_matrix(truth: &[usize], pred: &[usize], k: usize) -> Result<Vec<Vec<u64>>> {
    if truth.is_empty() || truth.len() != pred.len() {
        return Err(Error::Validation("confusion matrix needs paired, non-empty labels".into()));
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= k || p >= k {
            return Err(Error::Validation(format!("class index out of range for K={k}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub balacc: f64,
    pub mcc: f64,
    pub macro_f1: f64,
}

/// Balanced accuracy and macro-F1 (0-100) over the classes present in the
/// truth, and the multiclass Matthews correlation.
pub fn metrics_from_confusion(m: &[Vec<u64>]) -> Result<ConfusionMetrics> {
    let k = m.len();
    let row: Vec<f64> = m.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col: Vec<f64> = (0..k).map(|j| m.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let s: f64 = row.iter().sum();
    if s == 0.0 {
        return Err(Error::Validation("no patients to score".into()));
    }
    let present: Vec<usize> = (0..k).filter(|&c| row[c] > 0.0).collect();
    let recall: f64 = present.iter().map(|&c| m[c][c] as f64 / row[c]).sum::<f64>();
    let f1: f64 = present
        .iter()
        .map(|&c| {
            let tp = m[c][c] as f64;
            2.0 * tp / (row[c] + col[c])
        })
        .sum::<f64>();
    let correct: f64 = (0..k).map(|c| m[c][c] as f64).sum();
    let num = correct * s - (0..k).map(|c| row[c] * col[c]).sum::<f64>();
    let den = ((s * s - col.iter().map(|v| v * v).sum::<f64>())
        * (s * s - row.iter().map(|v| v * v).sum::<f64>()))
    .sqrt();
    let mcc = if den > 0.0 { num / den } else { 0.0 };
    Ok(ConfusionMetrics {
        balacc: 100.0 * recall / present.len() as f64,
        mcc,
        macro_f1: 100.0 * f1 / present.len() as f64,
    })
}

pub fn confusion_metrics(truth: &[usize], pred: &[usize]) -> Result<ConfusionMetrics> {
    metrics_from_confusion(&confusion_matrix(truth, pred, NUM_CLASSES)?)
}

/// How multiclass true/false-positive rates are reduced to one number per
/// gender group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapReduction {
    /// Mean of one-vs-rest rates over classes.
    #[default]
    Macro,
    /// Largest per-class gap.
    PerClassMax,
    /// Binary reading: any disease class against healthy controls.
    DiseasePositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessGaps {
    pub eod: Option<f64>,
    pub eog: Option<f64>,
}

/// One-vs-rest TPR and FPR for class `c` within a group; `None` when the
/// rate has no denominator.
fn ovr_rates(truth: &[usize], pred: &[usize], c: usize) -> (Option<f64>, Option<f64>) {
    let (mut tp, mut pos, mut fp, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for (&t, &p) in truth.iter().zip(pred) {
        if t == c {
            pos += 1.0;
            if p == c {
                tp += 1.0;
            }
        } else {
            neg += 1.0;
            if p == c {
                fp += 1.0;
            }
        }
    }
    ((pos > 0.0).then(|| tp / pos), (neg > 0.0).then(|| fp / neg))
}

fn mean_defined(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let d: Vec<f64> = v.flatten().collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Equal-opportunity difference (TPR gap) and equalised-odds gap
/// (max of TPR and FPR gaps) between the two gender groups.
///
/// Classes are those present in the pooled truth. A rate that is undefined
/// for one group (no positives or no negatives of that class) is dropped from
/// that group's average. An absent gender group gives `None`.
pub fn fairness_gaps(
    truth: &[usize],
    pred: &[usize],
    genders: &[Gender],
    reduction: GapReduction,
) -> Result<FairnessGaps> {
    if truth.len() != pred.len() || truth.len() != genders.len() {
        return Err(Error::Shape("fairness inputs differ in length".into()));
    }
    let (truth, pred): (Vec<usize>, Vec<usize>) = match reduction {
        GapReduction::DiseasePositive => (
            truth.iter().map(|&t| usize::from(t != 0)).collect(),
            pred.iter().map(|&p| usize::from(p != 0)).collect(),
        ),
        _ => (truth.to_vec(), pred.to_vec()),
    };
    let group = |g: Gender| -> (Vec<usize>, Vec<usize>) {
        truth
            .iter()
            .zip(&pred)
            .zip(genders)
            .filter(|(_, &gg)| gg == g)
            .map(|((&t, &p), _)| (t, p))
            .unzip()
    };
    let (tm, pm) = group(Gender::M);
    let (tf, pf) = group(Gender::F);
    if tm.is_empty() || tf.is_empty() {
        log::warn!("a gender group is absent; fairness gaps undefined");
        return Ok(FairnessGaps { eod: None, eog: None });
    }
    let mut classes: Vec<usize> = truth.clone();
    classes.sort_unstable();
    classes.dedup();
    let rates = |t: &[usize], p: &[usize]| -> Vec<(Option<f64>, Option<f64>)> {
        classes.iter().map(|&c| ovr_rates(t, p, c)).collect()
    };
    let (rm, rf) = (rates(&tm, &pm), rates(&tf, &pf));
    let (tpr_gap, fpr_gap) = match reduction {
        GapReduction::DiseasePositive => {
            let pos = classes.iter().position(|&c| c == 1);
            let pick = |r: &[(Option<f64>, Option<f64>)]| pos.map(|i| r[i]).unwrap_or((None, None));
            let ((a, b), (c, d)) = (pick(&rm), pick(&rf));
            (diff(a, c), diff(b, d))
        }
        GapReduction::Macro => (
            diff(
                mean_defined(rm.iter().map(|r| r.0)),
                mean_defined(rf.iter().map(|r| r.0)),
            ),
            diff(
                mean_defined(rm.iter().map(|r| r.1)),
                mean_defined(rf.iter().map(|r| r.1)),
            ),
        ),
        GapReduction::PerClassMax => {
            let max_gap = |sel: fn(&(Option<f64>, Option<f64>)) -> Option<f64>| {
                rm.iter()
                    .zip(&rf)
                    .filter_map(|(a, b)| diff(sel(a), sel(b)))
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))))
            };
            (max_gap(|r| r.0), max_gap(|r| r.1))
        }
    };
    let eog = match (tpr_gap, fpr_gap) {
        (Some(a), Some(b)) => Some(a.max(b)),
        (a, b) => a.or(b),
    };
    Ok(FairnessGaps { eod: tpr_gap, eog })
}

fn diff(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some((a? - b?).abs())
}

/// Two-sided paired sign-flip permutation test on per-patient scores
/// (typically 0/1 correctness). Returns `(count + 1) / (R + 1)` where
/// `count` is the number of resamples whose absolute summed difference is at
/// least the observed one.
pub fn paired_test(a: &[f64], b: &[f64], n_resamples: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Validation(format!(
            "paired test over {} and {} patients",
            a.len(),
            b.len()
        )));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let observed = d.iter().sum::<f64>().abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut count = 0usize;
    for _ in 0..n_resamples {
        let s: f64 = d
            .iter()
            .map(|v| if rng.random::<bool>() { *v } else { -*v })
            .sum();
        // Tolerance guards against summation-order noise on real-valued scores.
        if s.abs() >= observed - 1e-9 {
            count += 1;
        }
    }
    Ok((count + 1) as f64 / (n_resamples + 1) as f64)
}

/// Significance annotation: `**` below 0.05, `*` below 0.1.
pub fn significance_mark(p: f64) -> &'static str {
    if p < 0.05 {
        "**"
    } else if p < 0.1 {
        "*"
    } else {
        ""
    }
}

/// All metrics for one fold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub int_balacc: f64,
    pub int_mcc: f64,
    pub int_macro_f1: f64,
    pub ext_balacc: Option<f64>,
    pub ext_mcc: Option<f64>,
    pub ext_macro_f1: Option<f64>,
    pub eod: Option<f64>,
    pub eog: Option<f64>,
}

impl FoldMetrics {
    /// Named metric values; `None` entries are undefined for this fold.
    pub fn values(&self) -> [(&'static str, Option<f64>); 8] {
        [
            ("int_balacc", Some(self.int_balacc)),
            ("int_mcc", Some(self.int_mcc)),
            ("int_macro_f1", Some(self.int_macro_f1)),
            ("ext_balacc", self.ext_balacc),
            ("ext_mcc", self.ext_mcc),
            ("ext_macro_f1", self.ext_macro_f1),
            ("eod", self.eod),
            ("eog", self.eog),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub run_name: String,
    pub folds: Vec<FoldMetrics>,
    /// Mean and spread over folds; metrics undefined in every fold are
    /// absent.
    pub aggregate: BTreeMap<String, MeanStd>,
    pub predictions: Vec<PatientPrediction>,
    /// `baseline run → cohort → p-value` against this run.
    #[serde(default)]
    pub p_values: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Per-fold metrics from patient predictions of that fold.
pub fn fold_metrics(fold: usize, preds: &[PatientPrediction], reduction: GapReduction) -> Result<FoldMetrics> {
    let split = |c: Cohort| -> (Vec<usize>, Vec<usize>, Vec<Gender>) {
        let mut t = Vec::new();
        let mut p = Vec::new();
        let mut g = Vec::new();
        for x in preds.iter().filter(|x| x.cohort == c && x.fold == fold) {
            t.push(x.true_class.index());
            p.push(x.predicted_class.index());
            g.push(x.gender);
        }
        (t, p, g)
    };
    let (ti, pi, _) = split(Cohort::Internal);
    let int = confusion_metrics(&ti, &pi)?;
    let (te, pe, ge) = split(Cohort::External);
    let (ext, gaps) = if te.is_empty() {
        (None, FairnessGaps { eod: None, eog: None })
    } else {
        (
            Some(confusion_metrics(&te, &pe)?),
            fairness_gaps(&te, &pe, &ge, reduction)?,
        )
    };
    Ok(FoldMetrics {
        fold,
        int_balacc: int.balacc,
        int_mcc: int.mcc,
        int_macro_f1: int.macro_f1,
        ext_balacc: ext.map(|m| m.balacc),
        ext_mcc: ext.map(|m| m.mcc),
        ext_macro_f1: ext.map(|m| m.macro_f1),
        eod: gaps.eod,
        eog: gaps.eog,
    })
}

impl MetricsReport {
    pub fn new(run_name: &str, folds: Vec<FoldMetrics>, predictions: Vec<PatientPrediction>) -> Self {
        let mut by_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for f in &folds {
            for (name, v) in f.values() {
                if let Some(v) = v {
                    by_metric.entry(name.to_string()).or_default().push(v);
                }
            }
        }
        let aggregate = by_metric
            .into_iter()
            .map(|(k, v)| {
                let (mean, std) = mean_std(&v);
                (k, MeanStd { mean, std, n: v.len() })
            })
            .collect();
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_name: run_name.to_string(),
            folds,
            aggregate,
            predictions,
            p_values: BTreeMap::new(),
        }
    }

    pub fn from_predictions(run_name: &str, predictions: Vec<PatientPrediction>, reduction: GapReduction) -> Result<Self> {
        let mut folds: Vec<usize> = predictions.iter().map(|p| p.fold).collect();
        folds.sort_unstable();
        folds.dedup();
        let rows = folds
            .iter()
            .map(|&f| fold_metrics(f, &predictions, reduction))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::new(run_name, rows, predictions))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported report schema version {}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Per-patient scores for a paired test. Internal patients appear in
    /// exactly one test fold, so their 0/1 correctness is used directly;
    /// external patients are scored by every fold, so their correctness is
    /// averaged over folds.
    pub fn patient_scores(&self, cohort: Cohort) -> BTreeMap<String, f64> {
        let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for p in self.predictions.iter().filter(|p| p.cohort == cohort) {
            let e = acc.entry(p.patient_id.clone()).or_insert((0.0, 0));
            e.0 += f64::from(u8::from(p.correct()));
            e.1 += 1;
        }
        acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }

    /// Paired test of this run against `baseline` on one cohort.
    pub fn compare(&self, baseline: &MetricsReport, cohort: Cohort, n_resamples: usize, seed: u64) -> Result<f64> {
        let a = self.patient_scores(cohort);
        let b = baseline.patient_scores(cohort);
        if a.len() != b.len() || a.keys().zip(b.keys()).any(|(x, y)| x != y) {
            return Err(Error::Validation(format!(
                "runs {} and {} were scored on different {cohort:?} patients",
                self.run_name, baseline.run_name
            )));
        }
        paired_test(
            &a.values().copied().collect::<Vec<_>>(),
            &b.values().copied().collect::<Vec<_>>(),
            n_resamples,
            seed,
        )
    }
}

/// Comparison table with one row per run: internal and external BalAcc and
/// MCC, EOD and EOG as `mean ± std`. When `reference` names a run, other
/// runs carry significance marks from its stored p-values on the external
/// cohort.
pub fn table_csv(reports: &[MetricsReport], reference: Option<&MetricsReport>) -> String {
    let cols = ["int_balacc", "ext_balacc", "int_mcc", "ext_mcc", "eod", "eog"];
    let mut out = String::from("method,Int BalAcc,Ext BalAcc,Int MCC,Ext MCC,EOD,EOG,p_ext\n");
    for r in reports {
        let _ = write!(out, "{}", r.run_name);
        for c in cols {
            let prec = if c.ends_with("balacc") { 1 } else { 2 };
            match r.aggregate.get(c) {
                Some(m) => {
                    let _ = write!(out, ",{:.prec$} ± {:.prec$}", m.mean, m.std);
                }
                None => out.push_str(",n/a"),
            }
        }
        let p = reference
            .and_then(|refr| refr.p_values.get(&r.run_name))
            .and_then(|m| m.get("external"));
        match p {
            Some(p) => {
                let _ = write!(out, ",{p:.4}{}", significance_mark(*p));
            }
            None => out.push(','),
        }
        out.push('\n');
    }
    out
}
