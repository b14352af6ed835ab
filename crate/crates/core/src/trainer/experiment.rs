use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use super::batches::SegmentBank;
use super::state::LossHistory;
use super::train::Trainer;
use super::TrainProtocol;
use crate::cohort::{ClassLabel, SplitPlan};
use crate::error::{Error, Result};
use crate::evaluator::{pool_patient, Cohort, GapReduction, MetricsReport, PatientPrediction};
use crate::model::{FairPdaModel, ModelConfig};
use crate::util::derive_seed;

/// Rows per inference call.
const EVAL_CHUNK: usize = 64;

/// Bank rows of one fold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FoldData {
    pub fold: usize,
    pub train: Vec<usize>,
    pub internal: Vec<usize>,
    pub adaptation: Vec<usize>,
    pub external: Vec<usize>,
}

impl FoldData {
    /// Resolve a fold of `plan` against the bank and check that no
    /// evaluation patient is also used for training or adaptation.
    pub fn from_plan(bank: &SegmentBank, plan: &SplitPlan, fold: usize) -> Result<Self> {
        let f = plan
            .folds
            .get(fold)
            .ok_or_else(|| Error::Validation(format!("split plan has no fold {fold}")))?;
        let set = |v: &[String]| v.iter().cloned().collect::<BTreeSet<String>>();
        let (train, test) = (set(&f.train), set(&f.test));
        let (adapt, ext) = (set(&plan.uda_adaptation), set(&plan.uda_external_eval));
        let used: BTreeSet<&String> = train.union(&adapt).collect();
        if let Some(p) = test.iter().chain(&ext).find(|p| used.contains(p)) {
            return Err(Error::Integrity(format!("patient {p} is both trained on and evaluated in fold {fold}")));
        }
        if let Some(p) = test.intersection(&ext).next() {
            return Err(Error::Integrity(format!("patient {p} is in both evaluation cohorts")));
        }
        Ok(Self {
            fold,
            train: bank.rows_for(&train),
            internal: bank.rows_for(&test),
            adaptation: bank.rows_for(&adapt),
            external: bank.rows_for(&ext),
        })
    }
}

/// Patient-level soft-voting predictions for `rows`.
pub fn evaluate_patients(
    model: &FairPdaModel,
    bank: &SegmentBank,
    rows: &[usize],
    cohort: Cohort,
    fold: usize,
) -> Result<Vec<PatientPrediction>> {
    let mut probs: Vec<Vec<f64>> = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(EVAL_CHUNK) {
        let items: Vec<_> = chunk.iter().map(|&r| &bank.features[r]).collect();
        let out = model.infer(&items)?;
        probs.extend((0..chunk.len()).map(|i| out.p.row(i).to_vec()));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, &r) in rows.iter().enumerate() {
        by_patient.entry(bank.patient_key(r)).or_default().push(i);
    }
    by_patient
        .into_iter()
        .map(|(key, idx)| {
            let segs: Vec<Vec<f64>> = idx.iter().map(|&i| probs[i].clone()).collect();
            let (pooled, class) = pool_patient(&segs)?;
            let meta = &bank.metas[rows[idx[0]]];
            Ok(PatientPrediction {
                patient_id: key.to_string(),
                pooled_probs: pooled,
                predicted_class: ClassLabel::from_index(class).expect("three classes"),
                true_class: meta.label,
                gender: meta.gender,
                cohort,
                fold,
            })
        })
        .collect()
}

pub struct ExperimentOutput {
    pub report: MetricsReport,
    pub histories: Vec<LossHistory>,
}

/// Train and evaluate every fold of `plan`.
///
/// Fold `i` trains with seed `derive_seed(protocol.seed, "fold/i")`. With
/// `out_dir`, each fold writes its checkpoint and loss curves under
/// `fold_<i>/`.
pub fn run_experiment(
    run_name: &str,
    protocol: &TrainProtocol,
    model_config: &ModelConfig,
    bank: &SegmentBank,
    plan: &SplitPlan,
    reduction: GapReduction,
    out_dir: Option<&Path>,
) -> Result<ExperimentOutput> {
    if plan.folds.is_empty() {
        return Err(Error::Validation("split plan has no folds".into()));
    }
    let mut predictions = Vec::new();
    let mut histories = Vec::new();
    for fold in 0..plan.folds.len() {
        let data = FoldData::from_plan(bank, plan, fold)?;
        let p = TrainProtocol {
            seed: fold_seed(protocol.seed, fold),
            ..protocol.clone()
        };
        let trainer = Trainer::new(p, model_config.clone(), bank, data.train.clone(), data.adaptation.clone())?;
        let mut state = trainer.init_state()?;
        let dir = out_dir.map(|d| d.join(format!("fold_{fold}")));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        log::info!("{run_name}: fold {fold}, {} steps", trainer.total_steps());
        trainer.run(&mut state, None, dir.as_deref())?;
        predictions.extend(evaluate_patients(&state.model, bank, &data.internal, Cohort::Internal, fold)?);
        predictions.extend(evaluate_patients(&state.model, bank, &data.external, Cohort::External, fold)?);
        histories.push(state.history);
    }
    let report = MetricsReport::from_predictions(run_name, predictions, reduction)?;
    Ok(ExperimentOutput { report, histories })
}

pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, &format!("fold/{fold}"))
}
