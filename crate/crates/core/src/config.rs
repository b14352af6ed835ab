//! Run configuration: one TOML document with `[data]`, `[prep]`, `[model]`,
//! `[train]` and `[eval]` sections. Every key has a default, and the fully
//! resolved configuration is echoed into the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::{FeatureConfig, PrepConfig};
use crate::cohort::FilterConfig;
use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::evaluator::GapReduction;
use crate::model::ModelConfig;
use crate::synth::SynthSpec;
use crate::trainer::TrainProtocol;

/// Environment variable that overrides `[prep] cache_dir`.
pub const CACHE_ROOT_ENV: &str = "FAIRPDA_CACHE_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Where `synth` writes the synthetic benchmark.
    pub synth_dir: PathBuf,
    pub synth: SynthSpec,
    /// Source manifests; when empty, the synthetic benchmark's sources.
    pub source_manifests: Vec<PathBuf>,
    pub target_manifests: Vec<PathBuf>,
    pub filters: FilterConfig,
    pub apply_filters: bool,
    pub folds: usize,
    pub uda_fraction: f64,
    /// Use this split plan instead of generating one.
    pub split_plan: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth_dir: PathBuf::from("synth"),
            synth: SynthSpec::default(),
            source_manifests: Vec::new(),
            target_manifests: Vec::new(),
            filters: FilterConfig::default(),
            apply_filters: true,
            folds: 5,
            uda_fraction: 0.3,
            split_plan: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepSection {
    pub cache_dir: PathBuf,
    pub audio: PrepConfig,
    pub features: FeatureConfig,
}

impl Default for PrepSection {
    fn default() -> Self {
        Self {
            cache_dir: PathBuf::from("cache"),
            audio: PrepConfig::default(),
            features: FeatureConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub gap_reduction: GapReduction,
    pub n_resamples: usize,
    /// Run only the first this many folds (all when unset).
    pub max_folds: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gap_reduction: GapReduction::Macro,
            n_resamples: 10_000,
            max_folds: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_name: String,
    /// Seeds the split plan and training; the synthetic cohort has its own
    /// seed under `[data.synth]`.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub prep: PrepSection,
    pub model: ModelConfig,
    pub train: TrainProtocol,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "fairpda".into(),
            seed: 0,
            output_dir: PathBuf::from("runs/fairpda"),
            data: DataConfig::default(),
            prep: PrepSection::default(),
            model: ModelConfig::default(),
            train: TrainProtocol::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parse a config file; relative paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.data.synth_dir);
        fix(&mut self.prep.cache_dir);
        self.data.source_manifests.iter_mut().for_each(fix);
        self.data.target_manifests.iter_mut().for_each(fix);
        if let Some(p) = &mut self.data.split_plan {
            fix(p);
        }
    }

    /// Apply the cache-root environment override.
    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(CACHE_ROOT_ENV) {
            if !v.is_empty() {
                self.prep.cache_dir = PathBuf::from(v);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.prep.audio.validate()?;
        self.prep.features.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if (self.train.window_s - self.prep.audio.window_s).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "[train] window_s {} differs from [prep.audio] window_s {}",
                self.train.window_s, self.prep.audio.window_s
            )));
        }
        if self.data.folds < 2 {
            return Err(Error::Config("[data] folds must be at least 2".into()));
        }
        if !(self.data.uda_fraction > 0.0 && self.data.uda_fraction < 1.0) {
            return Err(Error::Config("[data] uda_fraction must lie in (0, 1)".into()));
        }
        if self.eval.n_resamples == 0 {
            return Err(Error::Config("[eval] n_resamples must be positive".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the resolved configuration as `config.toml` under `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("config.toml");
        write_atomic(&path, self.to_toml()?.as_bytes())?;
        Ok(path)
    }
}
