//! Loss functions, class-importance weights and the adversarial schedule.
//!
//! The scalar functions here are the reference definitions. Training builds
//! the same quantities on the autograd tape (see [`crate::nn::Graph`]) and
//! uses [`PatientWeightTable`], [`class_importance_weights`] and
//! [`lambda_schedule`] to supply per-row weights and coefficients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{log_sum_exp, sigmoid};

/// Probability clamp applied before taking logs of discriminator outputs.
pub const DISC_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Ce,
    #[default]
    CePn,
}

/// How the domain discriminator is fed, or which non-adversarial
/// alignment replaces it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignMode {
    None,
    /// Features `f`, unit weights.
    Dann,
    /// Multilinear map `f ⊗ p`, unit weights.
    Cdan,
    /// Multilinear map with class-importance weights on the source side.
    #[default]
    PartialCdan,
    Coral,
}

impl AlignMode {
    pub fn adversarial(self) -> bool {
        matches!(self, Self::Dann | Self::Cdan | Self::PartialCdan)
    }

    pub fn conditional(self) -> bool {
        matches!(self, Self::Cdan | Self::PartialCdan)
    }
}

/// Segment counts per patient over a whole training split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PatientWeightTable {
    pub n: BTreeMap<String, usize>,
}

impl PatientWeightTable {
    /// Count occurrences of each patient key.
    pub fn from_keys<'a>(keys: impl IntoIterator<Item = &'a str>) -> Self {
        let mut n = BTreeMap::new();
        for k in keys {
            *n.entry(k.to_string()).or_insert(0) += 1;
        }
        Self { n }
    }

    /// `1/n_i` for each row.
    pub fn weights<S: AsRef<str>>(&self, keys: &[S]) -> Result<Vec<f64>> {
        keys.iter()
            .map(|k| match self.n.get(k.as_ref()) {
                Some(&n) if n > 0 => Ok(1.0 / n as f64),
                _ => Err(Error::Validation(format!(
                    "patient {} missing from weight table",
                    k.as_ref()
                ))),
            })
            .collect()
    }

    /// Row weights for the configured loss: `1/n_i` under CE+PN, ones under CE.
    pub fn weights_for<S: AsRef<str>>(&self, mode: LossMode, keys: &[S]) -> Result<Vec<f64>> {
        match mode {
            LossMode::CePn => self.weights(keys),
            LossMode::Ce => Ok(vec![1.0; keys.len()]),
        }
    }
}

/// Weighted mean `Σ w_j ℓ_j / Σ w_j` with `w_j = 1/n_{patient(j)}`.
pub fn patient_normalized_ce<S: AsRef<str>>(
    losses: &[f64],
    patients: &[S],
    table: &PatientWeightTable,
) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    if losses.len() != patients.len() {
        return Err(Error::Shape(format!(
            "{} losses for {} patient ids",
            losses.len(),
            patients.len()
        )));
    }
    let w = table.weights(patients)?;
    let num: f64 = w.iter().zip(losses).map(|(w, l)| w * l).sum();
    Ok(num / w.iter().sum::<f64>())
}

/// Per-sample cross-entropy of row-major logits.
pub fn per_sample_ce(logits: &[f64], k: usize, labels: &[usize]) -> Result<Vec<f64>> {
    if k == 0 || logits.len() != k * labels.len() {
        return Err(Error::Shape(format!(
            "{} logits for {} labels and {k} classes",
            logits.len(),
            labels.len()
        )));
    }
    logits
        .chunks(k)
        .zip(labels)
        .map(|(row, &y)| {
            if y >= k {
                return Err(Error::Validation(format!("label {y} out of range")));
            }
            Ok(log_sum_exp(row) - row[y])
        })
        .collect()
}

/// Class-importance weights: column means of the target batch's predicted
/// class probabilities.
pub fn class_importance_weights(probs: &[f64], k: usize) -> Result<Vec<f64>> {
    if k == 0 || probs.is_empty() || probs.len() % k != 0 {
        return Err(Error::Validation(
            "class importance weights need a non-empty target batch".into(),
        ));
    }
    let rows = probs.len() / k;
    let mut gamma = vec![0.0; k];
    for row in probs.chunks(k) {
        for (g, p) in gamma.iter_mut().zip(row) {
            *g += p;
        }
    }
    gamma.iter_mut().for_each(|g| *g /= rows as f64);
    Ok(gamma)
}

/// Exponential moving average of γ; `momentum = 0` keeps only the fresh value.
pub fn smooth_gamma(prev: Option<&[f64]>, fresh: &[f64], momentum: f64) -> Vec<f64> {
    match prev {
        Some(p) if momentum > 0.0 => p
            .iter()
            .zip(fresh)
            .map(|(a, b)| momentum * a + (1.0 - momentum) * b)
            .collect(),
        _ => fresh.to_vec(),
    }
}

/// `−mean_s[γ(y_s)·ln D_s] − mean_t[ln(1 − D_t)]` over discriminator
/// probabilities, clamped to `[DISC_CLAMP, 1 − DISC_CLAMP]`.
pub fn domain_adversarial_loss(
    src_probs: &[f64],
    src_labels: &[usize],
    tgt_probs: &[f64],
    gamma: &[f64],
) -> Result<f64> {
    if src_probs.is_empty() || tgt_probs.is_empty() {
        return Err(Error::Validation("domain loss needs both sides".into()));
    }
    if src_probs.len() != src_labels.len() {
        return Err(Error::Shape("one label per source probability".into()));
    }
    let c = |p: f64| p.clamp(DISC_CLAMP, 1.0 - DISC_CLAMP);
    let mut s = 0.0;
    for (&p, &y) in src_probs.iter().zip(src_labels) {
        let g = *gamma
            .get(y)
            .ok_or_else(|| Error::Validation(format!("no weight for class {y}")))?;
        s -= g * c(p).ln();
    }
    let t: f64 = tgt_probs.iter().map(|&p| -(1.0 - c(p)).ln()).sum();
    Ok(s / src_probs.len() as f64 + t / tgt_probs.len() as f64)
}

/// Same loss on discriminator logits.
pub fn domain_adversarial_loss_logits(
    src_logits: &[f64],
    src_labels: &[usize],
    tgt_logits: &[f64],
    gamma: &[f64],
) -> Result<f64> {
    let s: Vec<f64> = src_logits.iter().map(|&z| sigmoid(z)).collect();
    let t: Vec<f64> = tgt_logits.iter().map(|&z| sigmoid(z)).collect();
    domain_adversarial_loss(&s, src_labels, &t, gamma)
}

/// Mean cross-entropy of two-way gender logits.
pub fn fairness_loss(logits: &[f64], genders: &[usize]) -> Result<f64> {
    if genders.is_empty() {
        return Err(Error::Validation("empty batch".into()));
    }
    let l = per_sample_ce(logits, 2, genders)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

/// Unbiased covariance of `n × d` row-major data.
pub fn covariance(x: &[f64], d: usize) -> Vec<f64> {
    let n = x.len() / d;
    let mut mean = vec![0.0; d];
    for row in x.chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / n as f64;
        }
    }
    let mut c = vec![0.0; d * d];
    for row in x.chunks(d) {
        for i in 0..d {
            for j in 0..d {
                c[i * d + j] += (row[i] - mean[i]) * (row[j] - mean[j]);
            }
        }
    }
    c.iter_mut().for_each(|v| *v /= (n - 1) as f64);
    c
}

/// `‖C_s − C_t‖²_F / (4d²)`.
pub fn coral_loss(src: &[f64], tgt: &[f64], d: usize) -> Result<f64> {
    if d == 0 || src.len() % d != 0 || tgt.len() % d != 0 {
        return Err(Error::Shape("feature width must divide both batches".into()));
    }
    if src.len() / d < 2 || tgt.len() / d < 2 {
        return Err(Error::Validation("CORAL needs at least two samples per side".into()));
    }
    let (cs, ct) = (covariance(src, d), covariance(tgt, d));
    let fro: f64 = cs.iter().zip(&ct).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(fro / (4.0 * (d * d) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub lambda_d_max: f64,
    pub lambda_fair_max: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// `false` reproduces the no-warm-up ablation.
    pub warmup: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda_d_max: 1.0,
            lambda_fair_max: 1.0,
            warmup_fraction: 0.2,
            total_steps: 1,
            warmup: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_d_max < 0.0 || self.lambda_fair_max < 0.0 {
            return Err(Error::Config("lambda maxima must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must lie in [0, 1]".into()));
        }
        if self.warmup && self.warmup_fraction * (self.total_steps as f64) < 1.0 {
            return Err(Error::Config("warm-up must span at least one step".into()));
        }
        Ok(())
    }
}

/// `(λ_d, λ_fair)` at `step`: linear ramp over the first
/// `warmup_fraction · total_steps` steps, constant afterwards.
pub fn lambda_schedule(step: usize, cfg: &ScheduleConfig) -> (f64, f64) {
    let ramp = if cfg.warmup {
        let span = cfg.warmup_fraction * cfg.total_steps as f64;
        if span <= 0.0 {
            1.0
        } else {
            (step as f64 / span).min(1.0)
        }
    } else {
        1.0
    };
    (cfg.lambda_d_max * ramp, cfg.lambda_fair_max * ramp)
}

/// The saddle-point objective `E = L_y − λ_d·L_d − λ_fair·L_fair`, reported
/// for logging. Optimisation itself minimises `L_y + L_d + L_fair` with the
/// gradient reversal layers producing the sign flip on the shared features.
pub fn total_objective(l_y: f64, l_d: f64, l_fair: f64, lambda_d: f64, lambda_fair: f64) -> Result<f64> {
    for (name, v) in [("L_y", l_y), ("L_d", l_d), ("L_fair", l_fair)] {
        if !v.is_finite() {
            return Err(Error::Numerical {
                step: 0,
                msg: format!("{name} is {v}"),
            });
        }
    }
    Ok(l_y - lambda_d * l_d - lambda_fair * l_fair)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Graph, Tensor};
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn patient_normalization_examples() {
        let t = PatientWeightTable::from_keys(["A", "A", "B"]);
        let v = patient_normalized_ce(&[1.0, 3.0, 2.0], &["A", "A", "B"], &t).unwrap();
        assert!(close(v, 2.0, 1e-12));
        let t1 = PatientWeightTable::from_keys(["A"]);
        assert!(close(patient_normalized_ce(&[0.7], &["A"], &t1).unwrap(), 0.7, 1e-15));
        let t2 = PatientWeightTable::from_keys(["A", "A", "B", "B"]);
        let v = patient_normalized_ce(&[1.0, 2.0, 3.0, 6.0], &["A", "A", "B", "B"], &t2).unwrap();
        assert!(close(v, 3.0, 1e-12));
        assert!(patient_normalized_ce(&[1.0], &["Z"], &t).is_err());
        assert!(patient_normalized_ce::<&str>(&[], &[], &t).is_err());
        assert_eq!(t.weights_for(LossMode::Ce, &["A", "B"]).unwrap(), vec![1.0, 1.0]);
    }

    #[test]
    fn gamma_examples() {
        let g = class_importance_weights(&[0.2, 0.5, 0.3, 0.4, 0.1, 0.5], 3).unwrap();
        for (a, b) in g.iter().zip([0.3, 0.3, 0.4]) {
            assert!(close(*a, b, 1e-12));
        }
        assert_eq!(class_importance_weights(&[1.0, 0.0, 0.0], 3).unwrap(), vec![1.0, 0.0, 0.0]);
        let u = class_importance_weights(&[1.0 / 3.0; 9], 3).unwrap();
        assert!(u.iter().all(|v| close(*v, 1.0 / 3.0, 1e-12)));
        assert!(class_importance_weights(&[], 3).is_err());
        assert_eq!(smooth_gamma(Some(&[1.0, 0.0]), &[0.0, 1.0], 0.5), vec![0.5, 0.5]);
        assert_eq!(smooth_gamma(None, &[0.2, 0.8], 0.9), vec![0.2, 0.8]);
    }

    #[test]
    fn domain_loss_examples() {
        // Independent scalar computation: 0.5·(−ln 0.8) + (−ln 0.4).
        let expected = 0.5 * -(0.8f64).ln() - (0.4f64).ln();
        let v = domain_adversarial_loss(&[0.8], &[0], &[0.6], &[0.5, 1.0, 1.0]).unwrap();
        assert!(close(v, expected, 1e-12));
        assert!(close(v, 1.0279, 5e-5));
        let ones = [1.0; 3];
        let bce = domain_adversarial_loss(&[0.7, 0.9], &[0, 2], &[0.2, 0.4], &ones).unwrap();
        let plain = (-(0.7f64).ln() - (0.9f64).ln()) / 2.0 + (-(0.8f64).ln() - (0.6f64).ln()) / 2.0;
        assert!(close(bce, plain, 1e-12));
        let zero = domain_adversarial_loss(&[0.7, 0.9], &[0, 2], &[0.2, 0.4], &[0.0; 3]).unwrap();
        assert!(close(zero, (-(0.8f64).ln() - (0.6f64).ln()) / 2.0, 1e-12));
        // Clamping keeps saturated outputs finite.
        assert!(domain_adversarial_loss(&[0.0], &[0], &[1.0], &ones).unwrap().is_finite());
        assert!(domain_adversarial_loss(&[], &[], &[0.5], &ones).is_err());
    }

    #[test]
    fn domain_loss_matches_graph_op() {
        let zs = [0.3, -1.2, 2.0];
        let zt = [0.1, -0.4];
        let labels = [0, 1, 2];
        let gamma = [0.5, 0.2, 0.3];
        let g = Graph::new();
        let s = g.constant(Tensor::new(&[3], zs.to_vec()).unwrap());
        let t = g.constant(Tensor::new(&[2], zt.to_vec()).unwrap());
        let w: Vec<f64> = labels.iter().map(|&y| gamma[y]).collect();
        let l = g.domain_bce(s, &w, t, &[1.0; 2], DISC_CLAMP).unwrap();
        let reference = domain_adversarial_loss_logits(&zs, &labels, &zt, &gamma).unwrap();
        assert!(close(g.value(l).item(), reference, 1e-12));
    }

    #[test]
    fn fairness_examples() {
        assert!(close(fairness_loss(&[50.0, -50.0, -50.0, 50.0], &[0, 1]).unwrap(), 0.0, 1e-12));
        assert!(close(fairness_loss(&[0.3, 0.3], &[1]).unwrap(), 2f64.ln(), 1e-12));
        let logits: [f64; 6] = [0.2, -0.5, 1.5, 0.1, -0.3, -0.3];
        let labels = [1, 0, 0];
        let oracle: f64 = logits
            .chunks(2)
            .zip(labels)
            .map(|(r, y)| {
                let p = r[y].exp() / (r[0].exp() + r[1].exp());
                -p.ln()
            })
            .sum::<f64>()
            / 3.0;
        assert!(close(fairness_loss(&logits, &labels).unwrap(), oracle, 1e-12));
        assert!(fairness_loss(&[], &[]).is_err());
    }

    #[test]
    fn coral_examples() {
        let s = [1.0, 2.0, 3.0, 1.0, 0.0, 4.0, 2.0, 2.0];
        assert_eq!(coral_loss(&s, &s, 2).unwrap(), 0.0);
        let shifted: Vec<f64> = s.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 5.0 } else { -1.0 }).collect();
        assert!(coral_loss(&s, &shifted, 2).unwrap() < 1e-24);
        // Brute-force oracle: covariance via explicit sums on 2-D toy data.
        let t = [0.0, 0.0, 2.0, 1.0, 4.0, 0.0];
        let cov = |x: &[f64]| {
            let n = x.len() / 2;
            let (mx, my) = (
                x.iter().step_by(2).sum::<f64>() / n as f64,
                x.iter().skip(1).step_by(2).sum::<f64>() / n as f64,
            );
            let mut c = [0.0; 4];
            for r in x.chunks(2) {
                let (a, b) = (r[0] - mx, r[1] - my);
                c[0] += a * a;
                c[1] += a * b;
                c[2] += b * a;
                c[3] += b * b;
            }
            c.map(|v| v / (n - 1) as f64)
        };
        let (cs, ct) = (cov(&s), cov(&t));
        let oracle: f64 = (0..4).map(|i| (cs[i] - ct[i]).powi(2)).sum::<f64>() / 16.0;
        assert!(close(coral_loss(&s, &t, 2).unwrap(), oracle, 1e-12));
        assert!(coral_loss(&[1.0, 2.0], &t, 2).is_err());
    }

    #[test]
    fn schedule_examples() {
        let cfg = ScheduleConfig {
            lambda_d_max: 0.8,
            lambda_fair_max: 0.4,
            warmup_fraction: 0.2,
            total_steps: 100,
            warmup: true,
        };
        assert_eq!(lambda_schedule(0, &cfg), (0.0, 0.0));
        assert_eq!(lambda_schedule(20, &cfg), (0.8, 0.4));
        let (d, f) = lambda_schedule(10, &cfg);
        assert!(close(d, 0.4, 1e-15) && close(f, 0.2, 1e-15));
        assert_eq!(lambda_schedule(100, &cfg), (0.8, 0.4));
        let flat = ScheduleConfig { warmup: false, ..cfg.clone() };
        assert_eq!(lambda_schedule(0, &flat), (0.8, 0.4));
        assert!(ScheduleConfig { total_steps: 4, ..cfg }.validate().is_err());
    }

    #[test]
    fn objective_sign_and_nan_guard() {
        assert!(close(total_objective(1.0, 0.5, 0.7, 1.0, 2.0).unwrap(), 1.0 - 0.5 - 1.4, 1e-15));
        assert!(total_objective(f64::NAN, 0.0, 0.0, 1.0, 1.0).is_err());
    }

    /// Two-layer toy model: `f = relu(W1 x)`, task logits `W2 f`, domain
    /// discriminator `Wd · GRL(f)`. Returns the gradients of W1, W2 and Wd.
    fn toy_grads(lambda: f64, with_adv: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let x = Tensor::new(&[3, 2], vec![0.5, -1.0, 1.5, 0.3, -0.7, 0.9]).unwrap();
        let w1 = Tensor::new(&[4, 2], vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, 0.7]).unwrap();
        let w2 = Tensor::new(&[3, 4], (0..12).map(|i| 0.1 * (i as f64 - 5.0)).collect()).unwrap();
        let wd = Tensor::new(&[1, 4], vec![0.4, -0.3, 0.2, 0.6]).unwrap();
        let g = Graph::new();
        let xv = g.constant(x);
        let (p1, p2, pd) = (g.param(w1), g.param(w2), g.param(wd));
        let zero = |n| g.constant(Tensor::zeros(&[n]));
        let f = g.relu(g.linear(xv, p1, zero(4)).unwrap());
        let logits = g.linear(f, p2, zero(3)).unwrap();
        let mut loss = g.cross_entropy(logits, &[0, 2, 1], &[1.0; 3]).unwrap();
        if with_adv {
            let d = g.linear(g.grl(f, lambda), pd, zero(1)).unwrap();
            let ds = g.slice_rows(d, 0, 2).unwrap();
            let dt = g.slice_rows(d, 2, 1).unwrap();
            let ld = g.domain_bce(ds, &[1.0, 0.5], dt, &[1.0], DISC_CLAMP).unwrap();
            loss = g.add(loss, ld).unwrap();
        }
        let mut grads = g.backward(loss).unwrap();
        let get = |v| grads.get(v).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 4]);
        let out = (get(p1), get(p2), get(pd));
        let _ = grads.take(p1);
        out
    }

    #[test]
    fn zero_lambda_reduces_to_task_training() {
        let (a1, a2, _) = toy_grads(0.0, true);
        let (b1, b2, _) = toy_grads(0.0, false);
        assert_eq!(a1, b1);
        assert_eq!(a2, b2);
    }

    #[test]
    fn feature_gradient_is_reversed_adversarial_gradient() {
        // Finite-difference oracle on the adversarial term alone, with the
        // discriminator path taken without reversal.
        let lambda = 0.7;
        let (with, _, _) = toy_grads(lambda, true);
        let (task, _, _) = toy_grads(lambda, false);
        let x = [0.5, -1.0, 1.5, 0.3, -0.7, 0.9];
        let wd = [0.4, -0.3, 0.2, 0.6];
        let adv = |w1: &[f64]| {
            let mut z = [0.0; 3];
            for r in 0..3 {
                for h in 0..4 {
                    let a = (w1[h * 2] * x[r * 2] + w1[h * 2 + 1] * x[r * 2 + 1]).max(0.0);
                    z[r] += wd[h] * a;
                }
            }
            let c = |p: f64| p.clamp(DISC_CLAMP, 1.0 - DISC_CLAMP);
            -(1.0 * c(sigmoid(z[0])).ln() + 0.5 * c(sigmoid(z[1])).ln()) / 2.0
                - (1.0 - c(sigmoid(z[2]))).ln()
        };
        let w1 = [0.3, -0.2, 0.5, 0.1, -0.4, 0.6, 0.2, 0.7];
        for i in 0..8 {
            let h = 1e-6;
            let mut p = w1;
            let mut m = w1;
            p[i] += h;
            m[i] -= h;
            let fd = (adv(&p) - adv(&m)) / (2.0 * h);
            let adv_part = with[i] - task[i];
            assert!((adv_part - (-lambda * fd)).abs() < 1e-6, "w1[{i}]: {adv_part} vs {}", -lambda * fd);
        }
    }

    #[test]
    fn discriminator_gradient_ignores_lambda() {
        let (_, _, d1) = toy_grads(0.3, true);
        let (_, _, d2) = toy_grads(2.5, true);
        assert_eq!(d1, d2);
    }

    proptest! {
        #[test]
        fn gamma_is_a_distribution(rows in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 3), 1..20)) {
            let probs: Vec<f64> = rows
                .iter()
                .flat_map(|r| {
                    let s: f64 = r.iter().sum();
                    r.iter().map(move |v| v / s)
                })
                .collect();
            let g = class_importance_weights(&probs, 3).unwrap();
            prop_assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(g.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn absent_target_class_is_suppressed(
            eps in 0.0f64..0.05,
            n in 1usize..10,
            d in 0.01f64..0.99,
        ) {
            // Class 2 gets at most eps in every target row.
            let probs: Vec<f64> = (0..n).flat_map(|i| {
                let c = eps * (i as f64 / n as f64);
                let a = (1.0 - c) * 0.6;
                vec![a, 1.0 - c - a, c]
            }).collect();
            let g = class_importance_weights(&probs, 3).unwrap();
            prop_assert!(g[2] <= eps + 1e-12);
            let full = domain_adversarial_loss(&[d], &[2], &[0.5], &g).unwrap();
            let tgt_only = domain_adversarial_loss(&[d], &[2], &[0.5], &[0.0; 3]).unwrap();
            prop_assert!(full - tgt_only <= eps * -d.ln() + 1e-12);
        }

        #[test]
        fn schedule_is_monotone(total in 5usize..500, frac in 0.2f64..1.0, a in 0usize..500, b in 0usize..500) {
            let cfg = ScheduleConfig { total_steps: total, warmup_fraction: frac, ..ScheduleConfig::default() };
            let (lo, hi) = (a.min(b).min(total), a.max(b).min(total));
            let (d1, f1) = lambda_schedule(lo, &cfg);
            let (d2, f2) = lambda_schedule(hi, &cfg);
            prop_assert!(d1 <= d2 && f1 <= f2);
        }

        #[test]
        fn duplicating_a_segment_keeps_patient_mean(
            a in proptest::collection::vec(0.0f64..5.0, 1..5),
            b in proptest::collection::vec(0.0f64..5.0, 1..5),
            dup in 0usize..4,
        ) {
            let keys: Vec<&str> = a.iter().map(|_| "A").chain(b.iter().map(|_| "B")).collect();
            let losses: Vec<f64> = a.iter().chain(&b).copied().collect();
            let t = PatientWeightTable::from_keys(keys.iter().copied());
            let base = patient_normalized_ce(&losses, &keys, &t).unwrap();
            let expected = (a.iter().sum::<f64>() / a.len() as f64 + b.iter().sum::<f64>() / b.len() as f64) / 2.0;
            prop_assert!((base - expected).abs() < 1e-9);
            // Duplicate one of A's segments that equals A's mean keeps A's mean.
            let i = dup % a.len();
            let mut a2 = a.clone();
            a2[i] = a.iter().sum::<f64>() / a.len() as f64;
            let mean_a2 = a2.iter().sum::<f64>() / a2.len() as f64;
            a2.push(mean_a2);
            let keys2: Vec<&str> = a2.iter().map(|_| "A").chain(b.iter().map(|_| "B")).collect();
            let losses2: Vec<f64> = a2.iter().chain(&b).copied().collect();
            let t2 = PatientWeightTable::from_keys(keys2.iter().copied());
            let v = patient_normalized_ce(&losses2, &keys2, &t2).unwrap();
            let exp2 = (mean_a2 + b.iter().sum::<f64>() / b.len() as f64) / 2.0;
            prop_assert!((v - exp2).abs() < 1e-9);
        }
    }
}
