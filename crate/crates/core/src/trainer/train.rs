use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::batches::{build_batches, SegmentBank, StepBatch};
use super::state::{LossHistory, StepLosses, TrainState};
use super::{ProtocolMode, TrainProtocol};
use crate::error::{Error, Result};
use crate::model::{FairPdaModel, GrlCoefficients, Mode, ModelConfig, TrainCtx};
use crate::nn::{Graph, RmsProp, Tensor, Var};
use crate::objectives::{
    class_importance_weights, lambda_schedule, total_objective, AlignMode, PatientWeightTable, ScheduleConfig,
    DISC_CLAMP,
};
use crate::util::derive_seed;

/// Loss magnitude treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e4;
pub const CHECKPOINT_FILE: &str = "checkpoint.fpck";
pub const LAST_GOOD_FILE: &str = "last_good.fpck";
pub const LOSS_CURVES_FILE: &str = "loss_curves.json";

/// One training run over fixed source (and target) rows of a bank.
pub struct Trainer<'a> {
    pub protocol: TrainProtocol,
    pub model_config: ModelConfig,
    bank: &'a SegmentBank,
    source: Vec<usize>,
    target: Vec<usize>,
    weights: PatientWeightTable,
    steps_per_epoch: usize,
    /// Domain index that forms the "source" side of DG-mode alignment.
    dg_anchor: usize,
}

impl<'a> Trainer<'a> {
    /// Target rows are ignored in DG mode.
    pub fn new(
        protocol: TrainProtocol,
        mut model_config: ModelConfig,
        bank: &'a SegmentBank,
        source: Vec<usize>,
        target: Vec<usize>,
    ) -> Result<Self> {
        protocol.validate()?;
        let target = match protocol.mode {
            ProtocolMode::Dg => Vec::new(),
            ProtocolMode::Uda => target,
        };
        model_config.input_shape = bank.feature_shape;
        model_config.backbone.mixstyle.active &= !protocol.ablations.no_mixstyle;
        model_config.conditional_domain = protocol.align_mode.conditional();
        model_config.validate()?;
        let weights = PatientWeightTable::from_keys(source.iter().map(|&r| bank.patient_key(r)));
        let steps_per_epoch = build_batches(bank, &source, &target, &protocol, 0)?.len();
        let dg_anchor = source.iter().map(|&r| bank.domain(r)).min().unwrap_or(0);
        Ok(Self {
            protocol,
            model_config,
            bank,
            source,
            target,
            weights,
            steps_per_epoch,
            dg_anchor,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.protocol.epochs
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lambda_d_max: self.protocol.lambda_d_max,
            lambda_fair_max: self.protocol.lambda_fair_max,
            warmup_fraction: self.protocol.warmup_fraction,
            total_steps: self.total_steps(),
            warmup: !self.protocol.ablations.no_warmup,
        }
    }

    /// GRL strengths at `step`; switched-off branches report 0.
    pub fn lambdas(&self, step: usize) -> GrlCoefficients {
        let (ld, lf) = lambda_schedule(step, &self.schedule());
        GrlCoefficients {
            lambda_d: if self.protocol.align_mode == AlignMode::None { 0.0 } else { ld },
            lambda_fair: if self.protocol.ablations.no_fairness { 0.0 } else { lf },
        }
    }

    /// Fresh model with input statistics from the training source rows.
    pub fn init_state(&self) -> Result<TrainState> {
        let mut model = FairPdaModel::new(self.model_config.clone(), derive_seed(self.protocol.seed, "init"))?;
        let [rows, frames] = self.bank.feature_shape;
        let mut sum = vec![0.0; rows];
        let mut sq = vec![0.0; rows];
        for &r in &self.source {
            for (i, row) in self.bank.features[r].data().chunks(frames).enumerate() {
                sum[i] += row.iter().sum::<f64>();
                sq[i] += row.iter().map(|v| v * v).sum::<f64>();
            }
        }
        let n = (self.source.len() * frames) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        model.set_input_stats(mean, std)?;
        Ok(TrainState {
            model,
            optim: RmsProp::new(self.protocol.learning_rate),
            step: 0,
            history: LossHistory::default(),
        })
    }

    pub fn batch_for_step(&self, step: usize) -> Result<StepBatch> {
        let epoch = step / self.steps_per_epoch;
        let mut b = build_batches(self.bank, &self.source, &self.target, &self.protocol, epoch)?;
        Ok(b.swap_remove(step % self.steps_per_epoch))
    }

    /// One optimisation step on `batch`. The state is left untouched when
    /// the loss is not finite or diverges.
    pub fn step(&self, state: &mut TrainState, batch: &StepBatch) -> Result<StepLosses> {
        let step = state.step;
        let coeffs = self.lambdas(step);
        let (sched_d, _) = lambda_schedule(step, &self.schedule());
        let mut src = batch.source.clone();
        if self.protocol.mode == ProtocolMode::Dg {
            // Put the anchor dataset first so both alignment sides are
            // contiguous row ranges.
            let mut order: Vec<usize> = (0..src.rows.len()).collect();
            order.sort_by_key(|&i| src.domains[i] != self.dg_anchor);
            let pick = |v: &Vec<usize>| order.iter().map(|&i| v[i]).collect::<Vec<_>>();
            src.patients = order.iter().map(|&i| src.patients[i].clone()).collect();
            src.rows = pick(&src.rows);
            src.labels = pick(&src.labels);
            src.genders = pick(&src.genders);
            src.domains = pick(&src.domains);
        }
        let ns = src.rows.len();
        let tgt_rows: &[usize] = batch.target.as_ref().map_or(&[], |t| &t.rows);
        let items: Vec<&Tensor> = src.rows.iter().chain(tgt_rows).map(|&r| &self.bank.features[r]).collect();
        let mut domains = src.domains.clone();
        let mut genders = src.genders.clone();
        if let Some(t) = &batch.target {
            domains.extend(&t.domains);
            genders.extend(&t.genders);
        }

        let g = Graph::new();
        let bound = state.model.store.bind(&g);
        let x = g.constant(state.model.prepare_batch(&items)?);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.protocol.seed, &format!("mixstyle/{step}")));
        let ctx = TrainCtx {
            rng: &mut rng,
            domains: &domains,
            force_lambda: None,
        };
        let out = state.model.forward(&g, &bound, x, coeffs, Mode::Train(ctx))?;

        let n = items.len();
        let src_logits = g.slice_rows(out.logits, 0, ns)?;
        let w = self.weights.weights_for(self.protocol.loss_mode, &src.patients)?;
        let l_y = g.cross_entropy(src_logits, &src.labels, &w)?;

        // Alignment sides: source vs target (UDA) or anchor vs other sources (DG).
        let split = match self.protocol.mode {
            ProtocolMode::Uda => ns,
            ProtocolMode::Dg => src.domains.iter().take_while(|&&d| d == self.dg_anchor).count(),
        };
        let side_b_labels: Option<Vec<usize>> = match self.protocol.mode {
            ProtocolMode::Uda => None,
            ProtocolMode::Dg => Some(src.labels[split..].to_vec()),
        };
        let l_d = if split == 0 || split == n {
            None
        } else {
            Some(self.alignment_loss(&g, &out, split, n, &src.labels[..split.min(ns)], side_b_labels.as_deref(), sched_d)?)
        };
        let l_fair = if self.protocol.ablations.no_fairness {
            None
        } else {
            Some(g.cross_entropy(out.gender_logits, &genders, &vec![1.0; n])?)
        };

        let mut total = l_y;
        for v in [l_d, l_fair].into_iter().flatten() {
            total = g.add(total, v)?;
        }
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let losses = StepLosses {
            step,
            l_y: g.value(l_y).item(),
            l_d: val(l_d),
            l_fair: val(l_fair),
            lambda_d: coeffs.lambda_d,
            lambda_fair: coeffs.lambda_fair,
            objective: 0.0,
        };
        let total_v = g.value(total).item();
        if !total_v.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("loss is {total_v} (L_y {}, L_d {}, L_fair {})", losses.l_y, losses.l_d, losses.l_fair),
            });
        }
        if total_v.abs() > DIVERGENCE_LIMIT {
            return Err(Error::Numerical {
                step,
                msg: format!("loss {total_v:.3e} exceeds the divergence limit"),
            });
        }
        let objective = total_objective(losses.l_y, losses.l_d, losses.l_fair, coeffs.lambda_d, coeffs.lambda_fair)?;
        let mut grads = g.backward(total)?;
        let named = bound.gradients(&g, &mut grads);
        if let Some((k, _)) = named.iter().find(|(_, t)| !t.all_finite()) {
            return Err(Error::Numerical {
                step,
                msg: format!("non-finite gradient for {k}"),
            });
        }
        state.optim.step(&mut state.model.store, &named)?;
        state.model.update_running_stats(&out.bn_stats)?;
        state.step += 1;
        let losses = StepLosses { objective, ..losses };
        state.history.steps.push(losses);
        Ok(losses)
    }

    /// Rows `[0, split)` form side "s" (label 1) and `[split, n)` side "t".
    fn alignment_loss(
        &self,
        g: &Graph,
        out: &crate::model::ForwardOutput,
        split: usize,
        n: usize,
        side_a_labels: &[usize],
        side_b_labels: Option<&[usize]>,
        lambda_d: f64,
    ) -> Result<Var> {
        let k = self.model_config.heads.num_classes;
        match self.protocol.align_mode {
            AlignMode::None => Ok(g.constant(Tensor::scalar(0.0))),
            AlignMode::Coral => {
                if split < 2 || n - split < 2 {
                    return Ok(g.constant(Tensor::scalar(0.0)));
                }
                let fs = g.slice_rows(out.f, 0, split)?;
                let ft = g.slice_rows(out.f, split, n - split)?;
                let c = g.coral(fs, ft)?;
                Ok(g.scale(c, lambda_d))
            }
            mode => {
                let ds = g.slice_rows(out.domain_logit, 0, split)?;
                let dt = g.slice_rows(out.domain_logit, split, n - split)?;
                let (wa, wb) = if mode == AlignMode::PartialCdan {
                    let p = g.value(out.p);
                    let pa = &p.data()[..split * k];
                    let pb = &p.data()[split * k..n * k];
                    let gamma_from_b = class_importance_weights(pb, k)?;
                    let wa = side_a_labels.iter().map(|&y| gamma_from_b[y]).collect();
                    // DG: both sides are labelled sources, weighted symmetrically.
                    let wb = match side_b_labels {
                        Some(lb) => {
                            let gamma_from_a = class_importance_weights(pa, k)?;
                            lb.iter().map(|&y| gamma_from_a[y]).collect()
                        }
                        None => vec![1.0; n - split],
                    };
                    (wa, wb)
                } else {
                    (vec![1.0; split], vec![1.0; n - split])
                };
                g.domain_bce(ds, &wa, dt, &wb, DISC_CLAMP)
            }
        }
    }

    /// Train until `until` (or the configured total) steps have run.
    ///
    /// With `out_dir`, writes periodic and final checkpoints plus the loss
    /// curves; on a numerical abort the state before the failing step is
    /// written as the last good checkpoint.
    pub fn run(&self, state: &mut TrainState, until: Option<usize>, out_dir: Option<&Path>) -> Result<()> {
        let end = until.unwrap_or(usize::MAX).min(self.total_steps());
        let log_every = (self.steps_per_epoch).max(1);
        while state.step < end {
            let batch = self.batch_for_step(state.step)?;
            let before = out_dir.map(|_| state.clone());
            match self.step(state, &batch) {
                Ok(l) => {
                    if state.step % log_every == 0 {
                        log::info!(
                            "step {}/{}: L_y {:.4} L_d {:.4} L_fair {:.4}",
                            state.step,
                            self.total_steps(),
                            l.l_y,
                            l.l_d,
                            l.l_fair
                        );
                    }
                }
                Err(e) => {
                    if let (Some(dir), Some(good)) = (out_dir, before) {
                        good.save(&self.protocol, &dir.join(LAST_GOOD_FILE))?;
                        good.history.write(&dir.join(LOSS_CURVES_FILE))?;
                    }
                    return Err(e);
                }
            }
            if let Some(dir) = out_dir {
                let every = self.protocol.checkpoint_every;
                if every > 0 && state.step % every == 0 {
                    state.save(&self.protocol, &dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            state.save(&self.protocol, &dir.join(CHECKPOINT_FILE))?;
            state.history.write(&dir.join(LOSS_CURVES_FILE))?;
        }
        Ok(())
    }
}
