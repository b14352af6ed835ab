//! The three-branch network: spectrogram backbone with MixStyle, task head,
//! domain discriminator and gender discriminator.
//!
//! Both discriminators sit behind gradient reversal layers, so a single
//! minimisation of `L_y + L_d + L_fair` trains the discriminators to separate
//! and the backbone to confuse them. The domain discriminator sees either the
//! features `f` or the multilinear map `f ⊗ p`; `p` is detached there so the
//! class head is trained by the task loss alone.
//!
//! Backbones: `tiny` is four stride-2 conv/batch-norm/ReLU blocks with
//! widths D/8, D/4, D/2, D; `resnet18` is the usual basic-block network
//! with a single-channel stem. MixStyle follows the first two blocks.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::container::{write_atomic, Reader, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::{instance_stats, BatchStats, Bound, Graph, NormMode, ParamStore, Tensor, Var};

/// Epsilon inside the square root of MixStyle's standard deviation.
pub const MIXSTYLE_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
/// Weight of the current batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneVariant {
    Resnet18,
    #[default]
    Tiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixStyleConfig {
    pub active: bool,
    pub alpha: f64,
    pub p_apply: f64,
    /// Draw partners from a different domain when the batch has one.
    pub cross_domain: bool,
}

impl Default for MixStyleConfig {
    fn default() -> Self {
        Self {
            active: true,
            alpha: 0.1,
            p_apply: 0.5,
            cross_domain: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: BackboneVariant,
    pub feature_dim: usize,
    pub mixstyle: MixStyleConfig,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            variant: BackboneVariant::Tiny,
            feature_dim: 64,
            mixstyle: MixStyleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadsConfig {
    pub num_classes: usize,
    pub domain_hidden: Vec<usize>,
    pub gender_hidden: Vec<usize>,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            domain_hidden: vec![256, 256],
            gender_hidden: vec![256, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadsConfig,
    /// Feed `f ⊗ p` rather than `f` to the domain discriminator.
    pub conditional_domain: bool,
    /// `[rows, frames]` of one input spectrogram.
    pub input_shape: [usize; 2],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            heads: HeadsConfig::default(),
            conditional_domain: true,
            input_shape: [64, 198],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let b = &self.backbone;
        match b.variant {
            BackboneVariant::Tiny => {
                if b.feature_dim == 0 || b.feature_dim > 128 || b.feature_dim % 8 != 0 {
                    return bad("tiny backbone needs feature_dim in 8..=128, divisible by 8");
                }
            }
            BackboneVariant::Resnet18 => {
                if b.feature_dim != 512 {
                    return bad("resnet18 backbone has feature_dim 512");
                }
            }
        }
        if !(0.0..=1.0).contains(&b.mixstyle.p_apply) || !(b.mixstyle.alpha > 0.0) {
            return bad("mixstyle needs 0 <= p_apply <= 1 and alpha > 0");
        }
        if self.heads.num_classes != 3 {
            return bad("the task head has exactly 3 classes");
        }
        if self.heads.gender_hidden.len() != 2 {
            return bad("the gender discriminator has exactly 3 layers");
        }
        if self.heads.domain_hidden.is_empty() {
            return bad("the domain discriminator needs at least one hidden layer");
        }
        if self.input_shape.iter().any(|&d| d < 8) {
            return bad("input spectrogram too small");
        }
        Ok(())
    }
}

/// Gradient-reversal strengths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrlCoefficients {
    pub lambda_d: f64,
    pub lambda_fair: f64,
}

/// Randomness for one training forward pass.
pub struct TrainCtx<'a> {
    pub rng: &'a mut ChaCha8Rng,
    /// Domain id per row, used by cross-domain MixStyle pairing.
    pub domains: &'a [usize],
    /// Overrides the sampled mixing weight (tests and diagnostics).
    pub force_lambda: Option<f64>,
}

pub enum Mode<'a> {
    Train(TrainCtx<'a>),
    Eval,
}

pub struct ForwardOutput {
    pub f: Var,
    pub logits: Var,
    pub p: Var,
    /// `[N, 1]` discriminator logits.
    pub domain_logit: Var,
    pub gender_logits: Var,
    /// Batch statistics of every batch-norm layer, keyed by layer prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
    /// Whether MixStyle fired at each placement.
    pub mixstyle_applied: [bool; 2],
}

/// Plain-tensor outputs of [`FairPdaModel::infer`].
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub f: Tensor,
    pub p: Tensor,
    pub domain_logit: Tensor,
    pub gender_logits: Tensor,
}

/// Sample per-row mixing weights and partners.
///
/// Partners come from a random permutation, or with `cross_domain` from a
/// random row of a different domain when one exists.
pub fn mixstyle_plan(
    n: usize,
    cfg: &MixStyleConfig,
    domains: &[usize],
    rng: &mut ChaCha8Rng,
) -> (Vec<f64>, Vec<usize>) {
    let beta = Beta::new(cfg.alpha, cfg.alpha).expect("alpha > 0");
    let lambdas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    let perm = if cfg.cross_domain && domains.len() == n {
        (0..n)
            .map(|i| {
                let others: Vec<usize> = (0..n).filter(|&j| domains[j] != domains[i]).collect();
                if others.is_empty() {
                    rng.random_range(0..n)
                } else {
                    others[rng.random_range(0..others.len())]
                }
            })
            .collect()
    } else {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        p
    };
    (lambdas, perm)
}

/// Plain-tensor MixStyle for a `[N, C, H, W]` tensor.
pub fn mixstyle(x: &Tensor, lambdas: &[f64], perm: &[usize]) -> Result<Tensor> {
    let g = Graph::new();
    let v = g.constant(x.clone());
    let out = g.mixstyle(v, lambdas, perm, MIXSTYLE_EPS)?;
    Ok((*g.value(out)).clone())
}

/// `h[i·K + j] = f[i]·p[j]`.
pub fn multilinear_map(f: &[f64], p: &[f64]) -> Vec<f64> {
    f.iter().flat_map(|&a| p.iter().map(move |&b| a * b)).collect()
}

/// Per-sample, per-channel mean and standard deviation (the statistics
/// MixStyle mixes).
pub fn style_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    instance_stats(x.data(), s[0] * s[1], s[2] * s[3], MIXSTYLE_EPS)
}

#[derive(Clone, Debug)]
pub struct FairPdaModel {
    pub config: ModelConfig,
    pub store: ParamStore,
}

fn tiny_channels(d: usize) -> [usize; 4] {
    [d / 8, d / 4, d / 2, d]
}

const RESNET_WIDTHS: [usize; 4] = [64, 128, 256, 512];

impl FairPdaModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let d = config.backbone.feature_dim;
        match config.backbone.variant {
            BackboneVariant::Tiny => {
                let mut cin = 1;
                for (i, c) in tiny_channels(d).into_iter().enumerate() {
                    s.init_layer(&format!("backbone.block{i}"), &[c, cin, 3, 3], cin * 9, &mut rng);
                    bn_params(&mut s, &format!("backbone.block{i}.bn"), c);
                    cin = c;
                }
            }
            BackboneVariant::Resnet18 => {
                s.init_layer("backbone.stem.conv", &[64, 1, 7, 7], 49, &mut rng);
                bn_params(&mut s, "backbone.stem.bn", 64);
                let mut cin = 64;
                for (li, &w) in RESNET_WIDTHS.iter().enumerate() {
                    for bi in 0..2 {
                        let p = format!("backbone.layer{}.{bi}", li + 1);
                        let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                        s.init_layer(&format!("{p}.conv1"), &[w, cin, 3, 3], cin * 9, &mut rng);
                        bn_params(&mut s, &format!("{p}.bn1"), w);
                        s.init_layer(&format!("{p}.conv2"), &[w, w, 3, 3], w * 9, &mut rng);
                        bn_params(&mut s, &format!("{p}.bn2"), w);
                        if stride != 1 || cin != w {
                            s.init_layer(&format!("{p}.down.conv"), &[w, cin, 1, 1], cin, &mut rng);
                            bn_params(&mut s, &format!("{p}.down.bn"), w);
                        }
                        cin = w;
                    }
                }
            }
        }
        let k = config.heads.num_classes;
        s.init_layer("cls", &[k, d], d, &mut rng);
        let mut din = if config.conditional_domain { d * k } else { d };
        for (i, &w) in config.heads.domain_hidden.iter().enumerate() {
            s.init_layer(&format!("dom.{i}"), &[w, din], din, &mut rng);
            din = w;
        }
        s.init_layer(&format!("dom.{}", config.heads.domain_hidden.len()), &[1, din], din, &mut rng);
        let mut gin = d;
        for (i, &w) in config.heads.gender_hidden.iter().enumerate() {
            s.init_layer(&format!("gen.{i}"), &[w, gin], gin, &mut rng);
            gin = w;
        }
        s.init_layer("gen.2", &[2, gin], gin, &mut rng);
        let rows = config.input_shape[0];
        s.insert_buffer("input.mean", Tensor::zeros(&[rows]));
        s.insert_buffer("input.std", Tensor::full(&[rows], 1.0));
        Ok(Self { config, store: s })
    }

    /// Per-row (mel band) normalisation statistics, from training inputs.
    pub fn set_input_stats(&mut self, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        let rows = self.config.input_shape[0];
        if mean.len() != rows || std.len() != rows || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Validation("input statistics must be positive, one per row".into()));
        }
        *self.store.buffer_mut("input.mean")? = Tensor::new(&[rows], mean)?;
        *self.store.buffer_mut("input.std")? = Tensor::new(&[rows], std)?;
        Ok(())
    }

    /// Stack `[rows, frames]` spectrograms into a normalised `[N, 1, rows, frames]`.
    pub fn prepare_batch(&self, items: &[&Tensor]) -> Result<Tensor> {
        let [rows, frames] = self.config.input_shape;
        let mean = self.store.buffer("input.mean")?.data().to_vec();
        let std = self.store.buffer("input.std")?.data().to_vec();
        let mut data = Vec::with_capacity(items.len() * rows * frames);
        for t in items {
            if t.shape() != [rows, frames] {
                return Err(Error::Shape(format!(
                    "input {:?}, model expects [{rows}, {frames}]",
                    t.shape()
                )));
            }
            if !t.all_finite() {
                return Err(Error::Validation("non-finite value in model input".into()));
            }
            for (r, row) in t.data().chunks(frames).enumerate() {
                data.extend(row.iter().map(|v| (v - mean[r]) / std[r]));
            }
        }
        Tensor::new(&[items.len(), 1, rows, frames], data)
    }

    /// Build the forward pass of a prepared `[N, 1, rows, frames]` batch on `g`.
    pub fn forward(
        &self,
        g: &Graph,
        params: &Bound,
        x: Var,
        coeffs: GrlCoefficients,
        mut mode: Mode<'_>,
    ) -> Result<ForwardOutput> {
        let shape = g.shape(x);
        let [rows, frames] = self.config.input_shape;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != rows || shape[3] != frames {
            return Err(Error::Shape(format!(
                "batch {shape:?}, model expects [N, 1, {rows}, {frames}]"
            )));
        }
        let n = shape[0];
        let mut bn_stats = Vec::new();
        let mut applied = [false; 2];
        let ms = &self.config.backbone.mixstyle;
        let mut mix = |h: Var, slot: usize, mode: &mut Mode<'_>| -> Result<Var> {
            let Mode::Train(ctx) = mode else { return Ok(h) };
            if !ms.active || n < 2 {
                return Ok(h);
            }
            // Draw the gate and the plan unconditionally so the random
            // stream does not depend on whether mixing fires.
            let fire = ctx.rng.random::<f64>() < ms.p_apply;
            let (mut lambdas, perm) = mixstyle_plan(n, ms, ctx.domains, ctx.rng);
            if let Some(l) = ctx.force_lambda {
                lambdas.iter_mut().for_each(|v| *v = l);
            }
            if !fire && ctx.force_lambda.is_none() {
                return Ok(h);
            }
            applied[slot] = true;
            g.mixstyle(h, &lambdas, &perm, MIXSTYLE_EPS)
        };
        let training = matches!(mode, Mode::Train(_));
        let mut bn = |h: Var, prefix: &str| -> Result<Var> {
            let (gamma, beta) = (params.get(&format!("{prefix}.gamma"))?, params.get(&format!("{prefix}.beta"))?);
            if training {
                let (y, stats) = g.batch_norm(h, gamma, beta, NormMode::Batch, BN_EPS)?;
                if let Some(s) = stats {
                    bn_stats.push((prefix.to_string(), s));
                }
                Ok(y)
            } else {
                let mean = self.store.buffer(&format!("{prefix}.running_mean"))?.data().to_vec();
                let var = self.store.buffer(&format!("{prefix}.running_var"))?.data().to_vec();
                Ok(g.batch_norm(h, gamma, beta, NormMode::Running { mean: &mean, var: &var }, BN_EPS)?.0)
            }
        };
        let f = match self.config.backbone.variant {
            BackboneVariant::Tiny => {
                let mut h = x;
                for i in 0..4 {
                    let p = format!("backbone.block{i}");
                    h = g.conv2d(h, params.get(&format!("{p}.weight"))?, params.get(&format!("{p}.bias"))?, 2, 1)?;
                    h = g.relu(bn(h, &format!("{p}.bn"))?);
                    if i < 2 {
                        h = mix(h, i, &mut mode)?;
                    }
                }
                g.global_avg_pool(h)?
            }
            BackboneVariant::Resnet18 => {
                let conv = |h: Var, prefix: &str, stride: usize, pad: usize| -> Result<Var> {
                    g.conv2d(h, params.get(&format!("{prefix}.weight"))?, params.get(&format!("{prefix}.bias"))?, stride, pad)
                };
                let mut h = conv(x, "backbone.stem.conv", 2, 3)?;
                h = g.relu(bn(h, "backbone.stem.bn")?);
                h = g.max_pool2d(h, 3, 2, 1)?;
                for li in 0..4 {
                    for bi in 0..2 {
                        let p = format!("backbone.layer{}.{bi}", li + 1);
                        let stride = if li > 0 && bi == 0 { 2 } else { 1 };
                        let mut y = conv(h, &format!("{p}.conv1"), stride, 1)?;
                        y = g.relu(bn(y, &format!("{p}.bn1"))?);
                        y = conv(y, &format!("{p}.conv2"), 1, 1)?;
                        y = bn(y, &format!("{p}.bn2"))?;
                        let skip = if self.store.get(&format!("{p}.down.conv.weight")).is_some() {
                            let s = conv(h, &format!("{p}.down.conv"), stride, 0)?;
                            bn(s, &format!("{p}.down.bn"))?
                        } else {
                            h
                        };
                        h = g.relu(g.add(y, skip)?);
                    }
                    if li < 2 {
                        h = mix(h, li, &mut mode)?;
                    }
                }
                g.global_avg_pool(h)?
            }
        };
        let logits = g.linear(f, params.get("cls.weight")?, params.get("cls.bias")?)?;
        let p = g.softmax(logits)?;
        let dom_in = if self.config.conditional_domain {
            let pd = g.detach(p);
            g.multilinear(f, pd)?
        } else {
            f
        };
        let domain_logit = self.mlp(g, params, "dom", g.grl(dom_in, coeffs.lambda_d), self.config.heads.domain_hidden.len() + 1)?;
        let gender_logits = self.mlp(g, params, "gen", g.grl(f, coeffs.lambda_fair), 3)?;
        Ok(ForwardOutput {
            f,
            logits,
            p,
            domain_logit,
            gender_logits,
            bn_stats,
            mixstyle_applied: applied,
        })
    }

    fn mlp(&self, g: &Graph, params: &Bound, prefix: &str, x: Var, layers: usize) -> Result<Var> {
        let mut h = x;
        for i in 0..layers {
            h = g.linear(h, params.get(&format!("{prefix}.{i}.weight"))?, params.get(&format!("{prefix}.{i}.bias"))?)?;
            if i + 1 < layers {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Deterministic evaluation-mode pass over raw `[rows, frames]` inputs.
    pub fn infer(&self, items: &[&Tensor]) -> Result<Inference> {
        let g = Graph::new();
        let bound = self.store.bind_frozen(&g);
        let x = g.constant(self.prepare_batch(items)?);
        let out = self.forward(&g, &bound, x, GrlCoefficients::default(), Mode::Eval)?;
        let get = |v: Var| (*g.value(v)).clone();
        Ok(Inference {
            f: get(out.f),
            p: get(out.p),
            domain_logit: get(out.domain_logit),
            gender_logits: get(out.gender_logits),
        })
    }

    /// Fold batch statistics into the running batch-norm buffers.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)]) -> Result<()> {
        for (prefix, s) in stats {
            for (name, fresh) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let buf = self.store.buffer_mut(&format!("{prefix}.{name}"))?;
                for (r, v) in buf.data_mut().iter_mut().zip(fresh) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                }
            }
        }
        Ok(())
    }

    /// Every parameter and buffer by name, buffers prefixed `buffer/`.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = self.store.params().clone();
        for (k, v) in self.store.buffers() {
            out.insert(format!("buffer/{k}"), v.clone());
        }
        out
    }

    /// Inverse of [`FairPdaModel::named_tensors`]; names must match exactly.
    pub fn load_named_tensors(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.named_tensors();
        for (k, v) in &expected {
            let t = tensors
                .get(k)
                .ok_or_else(|| Error::Integrity(format!("checkpoint lacks tensor {k}")))?;
            if t.shape() != v.shape() {
                return Err(Error::Integrity(format!("tensor {k} has shape {:?}, expected {:?}", t.shape(), v.shape())));
            }
        }
        for (k, t) in tensors {
            if let Some(b) = k.strip_prefix("buffer/") {
                *self.store.buffer_mut(b)? = t.clone();
            } else if let Some(p) = self.store.get_mut(k) {
                *p = t.clone();
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config });
        Checkpoint {
            meta,
            tensors: self.named_tensors(),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::read(path)?;
        Self::from_checkpoint(&ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.meta["model"].clone()).map_err(|e| Error::Integrity(format!("checkpoint model config: {e}")))?;
        let mut m = Self::new(config, 0)?;
        let own: BTreeMap<String, Tensor> = ck
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim/"))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        m.load_named_tensors(&own)?;
        Ok(m)
    }
}

fn bn_params(s: &mut ParamStore, prefix: &str, c: usize) {
    s.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    s.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    s.insert_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    s.insert_buffer(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Self-describing checkpoint: a JSON metadata block followed by named
/// tensors in the feature-cache tensor encoding (f64 payloads).
///
/// ```text
/// "FPCK" | u16 version | u32 json_len | json | u32 count |
///   count × (u32 name_len | name | tensor record)
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = serde_json::to_vec(&self.meta)?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend(TensorRecord::f64(t.shape(), t.data().to_vec()).encode());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err("bad magic".into());
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let len = r.u32()? as usize;
        let meta = serde_json::from_slice(r.take(len)?).map_err(|e| e.to_string())?;
        let count = r.u32()?;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nl = r.u32()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|e| e.to_string())?;
            let (rec, used) = TensorRecord::decode(&bytes[r.pos..])?;
            r.pos += used;
            let t = Tensor::new(&rec.dims, rec.payload.to_f64()).map_err(|e| e.to_string())?;
            tensors.insert(name, t);
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes".into());
        }
        Ok(Self { meta, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|msg| Error::Format {
            path: path.to_path_buf(),
            msg,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::Normal;

    fn small_config() -> ModelConfig {
        ModelConfig {
            input_shape: [16, 40],
            ..ModelConfig::default()
        }
    }

    fn random_inputs(n: usize, shape: [usize; 2], seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| Tensor::new(&shape, (0..shape[0] * shape[1]).map(|_| d.sample(&mut rng)).collect()).unwrap())
            .collect()
    }

    #[test]
    fn forward_shapes_and_softmax() {
        let m = FairPdaModel::new(small_config(), 1).unwrap();
        let xs = random_inputs(4, [16, 40], 2);
        let refs: Vec<&Tensor> = xs.iter().collect();
        let out = m.infer(&refs).unwrap();
        assert_eq!(out.f.shape(), &[4, 64]);
        assert_eq!(out.p.shape(), &[4, 3]);
        assert_eq!(out.domain_logit.len(), 4);
        assert_eq!(out.gender_logits.shape(), &[4, 2]);
        for r in 0..4 {
            let s: f64 = out.p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(out.p.row(r).iter().all(|v| *v >= 0.0));
        }
        assert_eq!(out, m.infer(&refs).unwrap());
    }

    #[test]
    fn rejects_bad_input() {
        let m = FairPdaModel::new(small_config(), 1).unwrap();
        let wrong = random_inputs(1, [16, 41], 0);
        assert!(matches!(m.infer(&[&wrong[0]]), Err(Error::Shape(_))));
        let mut nan = random_inputs(1, [16, 40], 0).remove(0);
        nan.data_mut()[3] = f64::NAN;
        assert!(m.infer(&[&nan]).is_err());
    }

    #[test]
    fn resnet18_shapes() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                variant: BackboneVariant::Resnet18,
                feature_dim: 512,
                ..BackboneConfig::default()
            },
            input_shape: [32, 32],
            ..ModelConfig::default()
        };
        let m = FairPdaModel::new(cfg, 3).unwrap();
        let xs = random_inputs(2, [32, 32], 5);
        let out = m.infer(&[&xs[0], &xs[1]]).unwrap();
        assert_eq!(out.f.shape(), &[2, 512]);
        assert!(out.p.all_finite());
        // Training pass produces batch statistics for every norm layer.
        let g = Graph::new();
        let b = m.store.bind(&g);
        let x = g.constant(m.prepare_batch(&[&xs[0], &xs[1]]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ctx = TrainCtx { rng: &mut rng, domains: &[], force_lambda: None };
        let o = m.forward(&g, &b, x, GrlCoefficients::default(), Mode::Train(ctx)).unwrap();
        assert_eq!(o.bn_stats.len(), 1 + 8 * 2 + 3);
        let tiny = FairPdaModel::new(small_config(), 1).unwrap();
        assert_eq!(tiny.store.buffers().len(), 2 + 4 * 2);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.backbone.feature_dim = 256;
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.heads.gender_hidden = vec![32];
        assert!(c.validate().is_err());
        let mut c = small_config();
        c.backbone.mixstyle.p_apply = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn multilinear_examples() {
        assert_eq!(multilinear_map(&[1.0, 2.0], &[0.5, 0.5]), vec![0.5, 0.5, 1.0, 1.0]);
        assert_eq!(multilinear_map(&[3.0, 4.0], &[0.0, 1.0, 0.0]), vec![0.0, 3.0, 0.0, 0.0, 4.0, 0.0]);
        let f = [0.3, -1.2, 2.0];
        let p = [0.2, 0.5, 0.3];
        let h = multilinear_map(&f, &p);
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((n(&h) - n(&f) * n(&p)).abs() < 1e-12);
    }

    fn random_4d(n: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = Normal::new(0.0, 3.0).unwrap();
        let unit = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        for _ in 0..n * c {
            let (mu, sd) = (shift.sample(&mut rng), 0.2 + f64::abs(unit.sample(&mut rng)) * 2.0);
            data.extend((0..30).map(|_| mu + sd * unit.sample(&mut rng)));
        }
        Tensor::new(&[n, c, 5, 6], data).unwrap()
    }

    #[test]
    fn mixstyle_identities() {
        let x = random_4d(4, 3, 9);
        let id: Vec<usize> = (0..4).collect();
        let y = mixstyle(&x, &[0.3; 4], &id).unwrap();
        let z = mixstyle(&x, &[1.0; 4], &[2, 0, 3, 1]).unwrap();
        for ((a, b), c) in x.data().iter().zip(y.data()).zip(z.data()) {
            assert!((a - b).abs() < 1e-6);
            assert!((a - c).abs() < 1e-6);
        }
    }

    #[test]
    fn mixstyle_statistics_law() {
        // Statistics recomputed with a plain two-pass routine.
        fn stats(x: &Tensor) -> Vec<(f64, f64)> {
            let plane = x.shape()[2] * x.shape()[3];
            x.data()
                .chunks(plane)
                .map(|p| {
                    let m = p.iter().sum::<f64>() / plane as f64;
                    let v = p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64;
                    (m, (v + MIXSTYLE_EPS).sqrt())
                })
                .collect()
        }
        let x = random_4d(4, 3, 11);
        let perm = [3, 2, 0, 1];
        let l = 0.3;
        let y = mixstyle(&x, &[l; 4], &perm).unwrap();
        let (sx, sy) = (stats(&x), stats(&y));
        for i in 0..4 {
            for c in 0..3 {
                let (a, b) = (sx[i * 3 + c], sx[perm[i] * 3 + c]);
                let got = sy[i * 3 + c];
                assert!((got.0 - (l * a.0 + (1.0 - l) * b.0)).abs() < 1e-5);
                // The output plane has variance σ_mix²·v/(v+eps), v the input variance.
                let s_mix = l * a.1 + (1.0 - l) * b.1;
                let v = a.1 * a.1 - MIXSTYLE_EPS;
                let want = (s_mix * s_mix * v / (v + MIXSTYLE_EPS) + MIXSTYLE_EPS).sqrt();
                assert!((got.1 - want).abs() < 1e-9, "{} vs {want}", got.1);
                assert!((got.1 - s_mix).abs() < 1e-3);
            }
        }
        // Instance-normalised content is unchanged.
        let plane = 30;
        for (px, py) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
            let z = |p: &[f64]| {
                let m = p.iter().sum::<f64>() / plane as f64;
                let s = (p.iter().map(|v| (v - m).powi(2)).sum::<f64>() / plane as f64).sqrt();
                p.iter().map(|v| (v - m) / s).collect::<Vec<_>>()
            };
            for (a, b) in z(px).iter().zip(z(py)) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mixstyle_inactive_matches_never_firing_mixstyle() {
        let run = |active: bool, p_apply: f64| {
            let mut cfg = small_config();
            cfg.backbone.mixstyle.active = active;
            cfg.backbone.mixstyle.p_apply = p_apply;
            let m = FairPdaModel::new(cfg, 4).unwrap();
            let xs = random_inputs(3, [16, 40], 8);
            let refs: Vec<&Tensor> = xs.iter().collect();
            let g = Graph::new();
            let b = m.store.bind(&g);
            let x = g.constant(m.prepare_batch(&refs).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let ctx = TrainCtx { rng: &mut rng, domains: &[], force_lambda: None };
            let o = m.forward(&g, &b, x, GrlCoefficients::default(), Mode::Train(ctx)).unwrap();
            (o.mixstyle_applied, (*g.value(o.f)).clone())
        };
        let (off_flags, off) = run(false, 0.5);
        let (never_flags, never) = run(true, 0.0);
        let (_, fired) = run(true, 1.0);
        assert_eq!(off_flags, [false, false]);
        assert_eq!(never_flags, [false, false]);
        assert_eq!(off, never);
        assert_ne!(off, fired);
    }

    #[test]
    fn cross_domain_partners_differ() {
        let cfg = MixStyleConfig { cross_domain: true, ..MixStyleConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let domains = [0, 0, 1, 1, 1];
        let (l, perm) = mixstyle_plan(5, &cfg, &domains, &mut rng);
        assert!(l.iter().all(|v| (0.0..=1.0).contains(v)));
        for (i, &j) in perm.iter().enumerate() {
            assert_ne!(domains[i], domains[j]);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let m = FairPdaModel::new(small_config(), 7).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("m.fpck");
        m.save(&path).unwrap();
        let back = FairPdaModel::load(&path).unwrap();
        assert_eq!(back.named_tensors(), m.named_tensors());
        assert_eq!(back.config, m.config);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(FairPdaModel::load(&path), Err(Error::Format { .. })));
    }
}
