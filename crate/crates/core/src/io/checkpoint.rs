//! Versioned binary checkpoints (`VPRC`) holding all parameters, the
//! optimizer state and the step counter.
//!
//! Body layout (little-endian), framed with magic, version and CRC32:
//!
//! ```text
//! meta_len u32 | meta JSON (model + optimizer hyperparameters)
//! step u64
//! n_params u32 | n_params × (name str16 | rows u32 | cols u32 | f32 values)
//! has_optim u8 | [t u64 | n u32 | n × (name str16 | len u32 | m f64s | v f64s)]
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{frame, read_file, unframe, write_file, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::optim::{AdamWConfig, Moments, OptimState};
use crate::tensor::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPRC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    optim: Option<AdamWConfig>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub step: u64,
    pub params: Vec<(String, Matrix)>,
    pub optim: Option<OptimState>,
}

impl Checkpoint {
    pub fn capture(model: &Model, step: u64, optim: Option<&OptimState>) -> Self {
        Self {
            model: model.config,
            step,
            params: model
                .params()
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            optim: optim.cloned(),
        }
    }

    /// Rebuilds the model with the stored parameter values.
    pub fn restore(&self) -> Result<Model> {
        let mut model = Model::init(self.model, 0)?;
        model.load_values(&self.params)?;
        Ok(model)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::default();
        let meta = serde_json::to_vec(&Meta {
            model: self.model,
            optim: self.optim.as_ref().map(|o| o.config),
        })
        .map_err(|e| Error::invalid(format!("checkpoint metadata: {e}")))?;
        w.u32(meta.len() as u32);
        w.bytes(&meta);
        w.u64(self.step);
        w.u32(self.params.len() as u32);
        for (name, m) in &self.params {
            w.str16(name)?;
            w.u32(m.rows() as u32);
            w.u32(m.cols() as u32);
            w.f32s(m.data());
        }
        match &self.optim {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                w.u64(o.t);
                w.u32(o.moments.len() as u32);
                for mo in &o.moments {
                    w.str16(&mo.name)?;
                    w.u32(mo.m.len() as u32);
                    w.f64s(&mo.m);
                    w.f64s(&mo.v);
                }
            }
        }
        Ok(frame(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, &w.buf))
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let body = unframe(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, path)?;
        let mut r = ByteReader::new(body, path);
        let meta_len = r.u32()? as usize;
        let meta: Meta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| r.malformed(&format!("metadata: {e}")))?;
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut params = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let name = r.str16()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let data = r.f32s(rows * cols)?;
            params.push((name.clone(), Matrix::from_vec_finite(rows, cols, data, &name)?));
        }
        let optim = match r.u8()? {
            0 => None,
            1 => {
                let config = meta
                    .optim
                    .ok_or_else(|| r.malformed("optimizer state without hyperparameters"))?;
                let t = r.u64()?;
                let count = r.u32()? as usize;
                let mut moments = Vec::with_capacity(count.min(1024));
                for _ in 0..count {
                    let name = r.str16()?;
                    let len = r.u32()? as usize;
                    let m = r.f64s(len)?;
                    let v = r.f64s(len)?;
                    moments.push(Moments { name, m, v });
                }
                Some(OptimState { config, t, moments })
            }
            t => return Err(r.malformed(&format!("bad optimizer flag {t}"))),
        };
        r.expect_end()?;
        Ok(Self {
            model: meta.model,
            step,
            params,
            optim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::HeadConfig;
    use crate::error::FormatErrorKind;
    use crate::fusion::FusionVariant;

    fn model() -> Model {
        Model::init(
            ModelConfig {
                dino_dim: 4,
                clip_dim: 5,
                fusion: FusionVariant::Film,
                head: HeadConfig {
                    blocks: 1,
                    queries_per_block: 2,
                    projection_dim: Some(3),
                    ..HeadConfig::default()
                },
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn restores_parameters_and_state() {
        let m = model();
        let mut st = OptimState::new(AdamWConfig::default(), &m.params());
        st.t = 17;
        st.moments[0].m[0] = 0.25;
        let ck = Checkpoint::capture(&m, 17, Some(&st));
        let back = Checkpoint::decode(&ck.encode().unwrap(), Path::new("c")).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        for (a, b) in restored.params().iter().zip(m.params()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn checksum_guards_body() {
        let mut b = Checkpoint::capture(&model(), 0, None).encode().unwrap();
        let n = b.len();
        b[n / 2] ^= 0x10;
        assert!(matches!(
            Checkpoint::decode(&b, Path::new("c")),
            Err(Error::Format {
                kind: FormatErrorKind::CrcMismatch,
                ..
            })
        ));
    }
}
