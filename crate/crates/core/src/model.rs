//! The trainable descriptor model: fusion followed by the aggregation head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{Aggregator, GlobalDescriptor, HeadCache, HeadConfig};
use crate::error::{Error, Result};
use crate::fusion::{FusionCache, FusionParams, FusionVariant, TokenSet};
use crate::tensor::{Matrix, Parameter};

/// Norm tolerance on emitted descriptors.
pub const DESCRIPTOR_UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dino_dim: usize,
    pub clip_dim: usize,
    pub fusion: FusionVariant,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn descriptor_dim(&self) -> usize {
        self.head.descriptor_dim(self.dino_dim)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub fusion: FusionParams,
    pub aggregator: Aggregator,
}

#[derive(Clone, Debug)]
pub struct ModelCache {
    fusion: FusionCache,
    head: HeadCache,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.dino_dim == 0 || config.clip_dim == 0 {
            return Err(Error::config("token dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fusion = FusionParams::init(config.fusion, config.dino_dim, config.clip_dim, &mut rng);
        let aggregator = Aggregator::init(config.head, config.dino_dim, &mut rng)?;
        Ok(Self {
            config,
            fusion,
            aggregator,
        })
    }

    pub fn forward(&self, dino: &TokenSet, clip: &TokenSet) -> Result<(GlobalDescriptor, ModelCache)> {
        let (fused, fusion) = self.fusion.forward(dino, clip)?;
        let (desc, head) = self.aggregator.forward(&fused.tokens)?;
        Ok((desc, ModelCache { fusion, head }))
    }

    /// Accumulates gradients of all parameters for upstream `d_desc`.
    pub fn backward(&mut self, cache: &ModelCache, d_desc: &[f32]) -> Result<()> {
        let d_tokens: Matrix = self.aggregator.backward(&cache.head, d_desc)?;
        self.fusion.backward(&cache.fusion, &d_tokens)?;
        Ok(())
    }

    /// Descriptor for one image; degenerate (zero) descriptors are an error.
    pub fn encode(&self, dino: &TokenSet, clip: &TokenSet) -> Result<Vec<f32>> {
        let (desc, _) = self.forward(dino, clip)?;
        if desc.degenerate {
            return Err(Error::Numerical(format!("degenerate descriptor for {}", dino.image_id)));
        }
        let n = desc.norm();
        if (n - 1.0).abs() > DESCRIPTOR_UNIT_TOL {
            return Err(Error::Numerical(format!(
                "descriptor for {} has norm {n}",
                dino.image_id
            )));
        }
        Ok(desc.values)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.fusion.params();
        out.extend(self.aggregator.params());
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.fusion.params_mut();
        out.extend(self.aggregator.params_mut());
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Overwrites parameter values by name; shapes must match.
    pub fn load_values(&mut self, values: &[(String, Matrix)]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(Error::invalid(format!(
                "model has {} parameters, checkpoint has {}",
                params.len(),
                values.len()
            )));
        }
        for p in params.iter_mut() {
            let (_, v) = values
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks parameter {}", p.name)))?;
            if v.shape() != p.value.shape() {
                return Err(Error::Shape {
                    op: "load_values",
                    left: p.value.shape(),
                    right: v.shape(),
                });
            }
            p.value = v.clone();
        }
        Ok(())
    }
}
