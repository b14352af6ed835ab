//! In-memory cohorts for training tests: no audio, just feature maps whose
//! class shows up as a band of raised energy.

#![allow(dead_code)]

use fairpda::audio::SegmentMeta;
use fairpda::cohort::{ClassLabel, Fold, Gender, SplitPlan};
use fairpda::model::ModelConfig;
use fairpda::nn::Tensor;
use fairpda::trainer::{SegmentBank, TrainProtocol};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SHAPE: [usize; 2] = [8, 16];
pub const SEGMENTS_PER_PATIENT: usize = 2;

/// `(dataset, classes, patients per class)`; patients alternate gender.
pub const DATASETS: [(&str, &[ClassLabel], usize); 3] = [
    ("src_a", &[ClassLabel::HC, ClassLabel::PD], 6),
    ("src_b", &[ClassLabel::HC, ClassLabel::ALS], 6),
    ("tgt", &[ClassLabel::HC, ClassLabel::PD], 6),
];

pub fn toy_bank(seed: u64) -> SegmentBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut metas = Vec::new();
    let mut features = Vec::new();
    for (d, (ds, classes, n)) in DATASETS.iter().enumerate() {
        for &class in *classes {
            for i in 0..*n {
                let pid = format!("{}{i}", class.as_str().to_lowercase());
                let gender = if i % 2 == 0 { Gender::M } else { Gender::F };
                for s in 0..SEGMENTS_PER_PATIENT {
                    let band = 2 * class.index();
                    let data = (0..SHAPE[0] * SHAPE[1])
                        .map(|k| {
                            let row = k / SHAPE[1];
                            let signal = if row == band || row == band + 1 { 1.5 } else { 0.0 };
                            signal + 0.3 * d as f64 + rng.random_range(-0.5..0.5)
                        })
                        .collect();
                    features.push(Tensor::new(&SHAPE, data).unwrap());
                    metas.push(SegmentMeta {
                        patient_id: pid.clone(),
                        recording_id: format!("{pid}_r{s}"),
                        segment_index: 0,
                        label: class,
                        gender,
                        dataset_id: ds.to_string(),
                        clipped_gain_flag: false,
                        file: String::new(),
                    });
                }
            }
        }
    }
    SegmentBank::from_parts(metas, features, SHAPE).unwrap()
}

pub fn keys(bank: &SegmentBank, dataset: &str) -> Vec<String> {
    let mut k: Vec<String> = bank
        .metas
        .iter()
        .filter(|m| m.dataset_id == dataset)
        .map(|m| m.patient_key())
        .collect();
    k.dedup();
    k
}

/// Two folds over the sources (every other patient), a third of the target
/// patients for adaptation and the rest for external evaluation.
pub fn toy_plan(bank: &SegmentBank) -> SplitPlan {
    let src: Vec<String> = ["src_a", "src_b"].iter().flat_map(|d| keys(bank, d)).collect();
    let half = |r: usize| src.iter().enumerate().filter(|(i, _)| i % 2 == r).map(|(_, k)| k.clone()).collect::<Vec<_>>();
    let tgt = keys(bank, "tgt");
    let n_adapt = tgt.len() / 3;
    SplitPlan {
        seed: 0,
        folds: vec![
            Fold {
                train: half(0),
                test: half(1),
            },
            Fold {
                train: half(1),
                test: half(0),
            },
        ],
        uda_adaptation: tgt.iter().step_by(3).take(n_adapt).cloned().collect(),
        uda_external_eval: tgt.iter().enumerate().filter(|(i, _)| i % 3 != 0 || *i / 3 >= n_adapt).map(|(_, k)| k.clone()).collect(),
    }
}

pub fn small_model() -> ModelConfig {
    let mut m = ModelConfig::default();
    m.backbone.feature_dim = 16;
    m.heads.domain_hidden = vec![16];
    m.heads.gender_hidden = vec![16, 8];
    m
}

pub fn protocol(epochs: usize) -> TrainProtocol {
    TrainProtocol {
        epochs,
        batch_size: 8,
        seed: 11,
        ..TrainProtocol::default()
    }
}
