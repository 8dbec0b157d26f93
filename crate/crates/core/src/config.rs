//! Run configuration, read from TOML. Unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//! fusion = "residual"        # residual | add | film
//! aggregation = "vlaq"       # vlaq | boq
//! assignment = "softmax"     # softmax | sinkhorn
//! blocks = 2
//! queries_per_block = 64
//! # projection_dim = 1024
//!
//! [ms]
//! alpha = 2.0
//! beta = 50.0
//! lambda = 1.0
//! epsilon = 0.1
//!
//! [opt]
//! lr = 2e-4
//! wd = 1e-3
//! warmup_epochs = 10
//! decay_every = 10
//! decay_factor = 0.1
//! group_multipliers = { queries = 1.0 }
//!
//! [train]
//! epochs = 40
//! places_per_batch = 110
//! images_per_place = 4
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aggregation::{AggregationKind, AssignmentKind, HeadConfig, SinkhornOptions};
use crate::error::{Error, Result};
use crate::fusion::FusionVariant;
use crate::io::synth::SynthSpec;
use crate::loss::MsParams;
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, Schedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptConfig {
    pub lr: f64,
    pub wd: f64,
    pub warmup_epochs: f64,
    pub decay_every: f64,
    pub decay_factor: f64,
    pub group_multipliers: BTreeMap<String, f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Also decay biases and query banks.
    pub decay_all: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        let s = Schedule::default();
        let a = AdamWConfig::default();
        Self {
            lr: s.base_lr,
            wd: a.weight_decay,
            warmup_epochs: s.warmup_epochs,
            decay_every: s.decay_every,
            decay_factor: s.decay_factor,
            group_multipliers: BTreeMap::new(),
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            decay_all: false,
        }
    }
}

impl OptConfig {
    pub fn schedule(&self) -> Schedule {
        Schedule {
            base_lr: self.lr,
            warmup_epochs: self.warmup_epochs,
            decay_every: self.decay_every,
            decay_factor: self.decay_factor,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.wd,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule().validate()?;
        if !(self.wd.is_finite() && self.wd >= 0.0) {
            return Err(Error::config("opt.wd must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("opt.beta1 and opt.beta2 must lie in [0, 1)"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return Err(Error::config("opt.eps must be positive"));
        }
        crate::optim::default_groups(&self.group_multipliers)?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: f64,
    /// Hard cap on optimizer steps, applied after `epochs`.
    pub max_steps: Option<u64>,
    pub places_per_batch: usize,
    pub images_per_place: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40.0,
            max_steps: None,
            places_per_batch: 110,
            images_per_place: 4,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub descriptors: Option<PathBuf>,
    pub index: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub fusion: FusionVariant,
    pub aggregation: AggregationKind,
    pub assignment: AssignmentKind,
    pub blocks: usize,
    pub queries_per_block: usize,
    pub projection_dim: Option<usize>,
    pub sinkhorn: SinkhornOptions,
    pub ms: MsParams,
    pub opt: OptConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let head = HeadConfig::default();
        Self {
            seed: 7,
            fusion: FusionVariant::Residual,
            aggregation: head.aggregation,
            assignment: head.assignment,
            blocks: head.blocks,
            queries_per_block: head.queries_per_block,
            projection_dim: head.projection_dim,
            sinkhorn: head.sinkhorn,
            ms: MsParams::default(),
            opt: OptConfig::default(),
            train: TrainConfig::default(),
            synth: SynthSpec::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.queries_per_block == 0 {
            return Err(Error::config("blocks and queries_per_block must be positive"));
        }
        if self.projection_dim == Some(0) {
            return Err(Error::config("projection_dim must be positive when set"));
        }
        if self.sinkhorn.iters == 0 || self.sinkhorn.tol.is_nan() || self.sinkhorn.tol <= 0.0 {
            return Err(Error::config("sinkhorn.iters and sinkhorn.tol must be positive"));
        }
        self.ms.validate()?;
        self.opt.validate()?;
        if self.train.places_per_batch < 2 || self.train.images_per_place < 2 {
            return Err(Error::config("train batches need at least 2 places with 2 images each"));
        }
        if !(self.train.epochs.is_finite() && self.train.epochs >= 0.0) {
            return Err(Error::config("train.epochs must be nonnegative"));
        }
        Ok(())
    }

    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            aggregation: self.aggregation,
            assignment: self.assignment,
            sinkhorn: self.sinkhorn,
            blocks: self.blocks,
            queries_per_block: self.queries_per_block,
            projection_dim: self.projection_dim,
        }
    }

    pub fn model(&self, dino_dim: usize, clip_dim: usize) -> ModelConfig {
        ModelConfig {
            dino_dim,
            clip_dim,
            fusion: self.fusion,
            head: self.head(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::parse(
            r#"
fusion = "film"
assignment = "sinkhorn"
projection_dim = 32
[ms]
beta = 40.0
[opt]
lr = 1e-3
group_multipliers = { queries = 0.2 }
"#,
        )
        .unwrap();
        assert_eq!(cfg.fusion, FusionVariant::Film);
        assert_eq!(cfg.assignment, AssignmentKind::Sinkhorn);
        assert_eq!(cfg.ms.beta, 40.0);
        assert_eq!(cfg.ms.alpha, 2.0);
        assert_eq!(cfg.opt.group_multipliers["queries"], 0.2);
        assert_eq!(cfg.head().descriptor_dim(8), 32);
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.opt.lr, 2e-4);
        assert_eq!(cfg.opt.wd, 1e-3);
        assert_eq!((cfg.blocks, cfg.queries_per_block), (2, 64));
        assert_eq!((cfg.train.places_per_batch, cfg.train.images_per_place), (110, 4));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse("fusoin = \"add\"").is_err());
        assert!(RunConfig::parse("[ms]\ngamma = 1.0").is_err());
        assert!(RunConfig::parse("[opt]\ngroup_multipliers = { backbone = 0.2 }").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
