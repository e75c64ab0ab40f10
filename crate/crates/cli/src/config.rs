use std::path::{Path, PathBuf};

use ctxpose::losses::LossConfig;
use ctxpose::metrics::PckConfig;
use ctxpose::model::{AdamConfig, ContextMode};
use ctxpose::synthgen::{GridSpec, SkeletonSpec, SynthConfig};
use ctxpose::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Psm,
    Fcn,
    Gnn,
    Lcn,
    Contextpose,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Psm => "psm",
            Method::Fcn => "fcn",
            Method::Gnn => "gnn",
            Method::Lcn => "lcn",
            Method::Contextpose => "contextpose",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: u64,
    pub batch: usize,
    /// Write a checkpoint every k epochs; 0 writes only the final model.
    pub checkpoint_every: u64,
    /// Held-out metrics every k epochs; 0 disables them.
    pub validate_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        TrainConfig {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            adam_eps: a.eps,
            epochs: 10,
            batch: 8,
            checkpoint_every: 0,
            validate_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// One experiment. Relative paths are resolved against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Attention ablation for `contextpose`.
    pub context: ContextMode,
    /// An existing dataset directory. Without it, `synth` is generated in memory.
    pub dataset: Option<PathBuf>,
    pub synth: Option<SynthConfig>,
    /// Skeleton file; overrides the generator's skeleton.
    pub skeleton: Option<PathBuf>,
    /// Overrides the generator's grid.
    pub grid: Option<GridSpec>,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub alpha: f64,
    /// PSM admissibility window; defaults to half the voxel diagonal.
    pub psm_epsilon_mm: Option<f64>,
    pub pck: PckConfig,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::Contextpose,
            context: ContextMode::Full,
            dataset: None,
            synth: None,
            skeleton: None,
            grid: None,
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            alpha: 1500.0,
            psm_epsilon_mm: None,
            pck: PckConfig::default(),
            seeds: vec![0],
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        self.dataset.iter_mut().for_each(fix);
        self.skeleton.iter_mut().for_each(fix);
        self.out.iter_mut().for_each(fix);
        if let Some(SkeletonSpec::File { path }) = self.synth.as_mut().map(|s| &mut s.skeleton) {
            fix(path);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        let t = &self.train;
        if !(t.lr > 0.0) || !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || !(t.adam_eps > 0.0) {
            return bad("train: need lr > 0, betas in [0, 1) and adam_eps > 0");
        }
        if t.batch == 0 {
            return bad("train.batch must be positive");
        }
        if !(self.alpha > 0.0) {
            return bad("alpha must be positive");
        }
        if let Some(e) = self.psm_epsilon_mm {
            if !(e > 0.0) {
                return bad("psm_epsilon_mm must be positive");
            }
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty");
        }
        self.loss.validate()?;
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        Ok(())
    }

    /// `--seed` replaces the seed list and the generator seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        if let Some(s) = self.synth.as_mut() {
            s.seed = seed;
        }
        self
    }

    /// Generator settings with the skeleton and grid overrides applied.
    pub fn synth_config(&self) -> Result<SynthConfig> {
        let mut s = self
            .synth
            .clone()
            .ok_or_else(|| Error::InvalidConfig("no `dataset` and no `synth` section".into()))?;
        if let Some(p) = &self.skeleton {
            s.skeleton = SkeletonSpec::File { path: p.clone() };
        }
        if let Some(g) = &self.grid {
            s.grid = g.clone();
        }
        s.validate()?;
        Ok(s)
    }

    pub fn context_mode(&self) -> ContextMode {
        match self.method {
            Method::Contextpose => self.context,
            _ => ContextMode::Baseline,
        }
    }
}
