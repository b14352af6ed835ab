use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ProtocolMode, TrainProtocol};
use crate::audio::{FeatureCache, SegmentMeta};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::util::derive_seed;

/// Features of every segment an experiment touches, loaded once.
#[derive(Clone, Debug)]
pub struct SegmentBank {
    pub metas: Vec<SegmentMeta>,
    pub features: Vec<Tensor>,
    /// Sorted dataset ids; a row's domain index points into this list.
    pub datasets: Vec<String>,
    pub feature_shape: [usize; 2],
    domain: Vec<usize>,
    keys: Vec<String>,
}

impl SegmentBank {
    /// Load the segments of `patients` (patient keys) from a cache.
    pub fn load(cache: &FeatureCache, patients: &BTreeSet<String>) -> Result<Self> {
        let mut metas = Vec::new();
        let mut features = Vec::new();
        for m in cache.index.segments.iter().filter(|m| patients.contains(&m.patient_key())) {
            let t = cache.load(m).map_err(|e| {
                Error::Integrity(format!(
                    "segment {} #{} of {}: {e}",
                    m.recording_id,
                    m.segment_index,
                    m.patient_key()
                ))
            })?;
            metas.push(m.clone());
            features.push(t);
        }
        Self::from_parts(metas, features, cache.index.feature_shape)
    }

    pub fn from_parts(metas: Vec<SegmentMeta>, features: Vec<Tensor>, feature_shape: [usize; 2]) -> Result<Self> {
        if metas.len() != features.len() {
            return Err(Error::Shape(format!("{} metas for {} tensors", metas.len(), features.len())));
        }
        if let Some(t) = features.iter().find(|t| t.shape() != feature_shape) {
            return Err(Error::Shape(format!("segment {:?}, bank expects {feature_shape:?}", t.shape())));
        }
        let datasets: Vec<String> = metas
            .iter()
            .map(|m| m.dataset_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let domain = metas
            .iter()
            .map(|m| datasets.binary_search(&m.dataset_id).expect("present"))
            .collect();
        let keys = metas.iter().map(SegmentMeta::patient_key).collect();
        Ok(Self {
            metas,
            features,
            datasets,
            feature_shape,
            domain,
            keys,
        })
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    /// Rows belonging to any of `patients`, in bank order.
    pub fn rows_for(&self, patients: &BTreeSet<String>) -> Vec<usize> {
        (0..self.len()).filter(|&i| patients.contains(&self.keys[i])).collect()
    }

    pub fn domain(&self, row: usize) -> usize {
        self.domain[row]
    }

    pub fn patient_key(&self, row: usize) -> &str {
        &self.keys[row]
    }

    fn source_batch(&self, rows: Vec<usize>) -> SourceBatch {
        SourceBatch {
            labels: rows.iter().map(|&r| self.metas[r].label.index()).collect(),
            patients: rows.iter().map(|&r| self.keys[r].clone()).collect(),
            genders: rows.iter().map(|&r| self.metas[r].gender.index()).collect(),
            domains: rows.iter().map(|&r| self.domain[r]).collect(),
            rows,
        }
    }

    fn target_batch(&self, rows: Vec<usize>) -> TargetBatch {
        TargetBatch {
            genders: rows.iter().map(|&r| self.metas[r].gender.index()).collect(),
            domains: rows.iter().map(|&r| self.domain[r]).collect(),
            rows,
        }
    }
}

/// Labelled rows for the task loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceBatch {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
    pub patients: Vec<String>,
    pub genders: Vec<usize>,
    pub domains: Vec<usize>,
}

/// Unlabelled adaptation rows. There is deliberately no class label field,
/// so target labels cannot reach a loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetBatch {
    pub rows: Vec<usize>,
    pub genders: Vec<usize>,
    pub domains: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StepBatch {
    pub source: SourceBatch,
    pub target: Option<TargetBatch>,
}

/// One epoch of batches, a pure function of `(protocol.seed, epoch)`.
///
/// Source rows are shuffled and cut into batches; a trailing batch of a
/// single row is dropped. In UDA mode each source batch is paired with an
/// equally sized target batch drawn from a reshuffled cycle over the
/// adaptation rows.
pub fn build_batches(
    bank: &SegmentBank,
    source_rows: &[usize],
    target_rows: &[usize],
    protocol: &TrainProtocol,
    epoch: usize,
) -> Result<Vec<StepBatch>> {
    if source_rows.len() < 2 {
        return Err(Error::Validation(format!(
            "{} source segments; training needs at least 2",
            source_rows.len()
        )));
    }
    if protocol.mode == ProtocolMode::Uda && target_rows.is_empty() {
        return Err(Error::Validation("UDA training without target adaptation segments".into()));
    }
    if let Some(&r) = source_rows.iter().chain(target_rows).find(|&&r| r >= bank.len()) {
        return Err(Error::Validation(format!("row {r} outside a bank of {}", bank.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(protocol.seed, &format!("batches/{epoch}")));
    let mut src = source_rows.to_vec();
    src.shuffle(&mut rng);
    let mut tgt_order: Vec<usize> = Vec::new();
    let mut tgt_pos = 0;
    let mut out = Vec::new();
    for chunk in src.chunks(protocol.batch_size) {
        if chunk.len() < 2 {
            continue;
        }
        let target = match protocol.mode {
            ProtocolMode::Dg => None,
            ProtocolMode::Uda => {
                let mut rows = Vec::with_capacity(chunk.len());
                while rows.len() < chunk.len() {
                    if tgt_pos == tgt_order.len() {
                        tgt_order = target_rows.to_vec();
                        tgt_order.shuffle(&mut rng);
                        tgt_pos = 0;
                    }
                    rows.push(tgt_order[tgt_pos]);
                    tgt_pos += 1;
                }
                Some(bank.target_batch(rows))
            }
        };
        out.push(StepBatch {
            source: bank.source_batch(chunk.to_vec()),
            target,
        });
    }
    Ok(out)
}
