use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ModelConfig, ParamKind, ParamSet};
use crate::error::{Result, SpeftError};
use crate::io::{Container, DType, Entry};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "speft.checkpoint";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    pub params: ParamSet,
    pub dtype: DType,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    seed: u64,
    kinds: Vec<ParamKind>,
    fingerprint: String,
}

impl Checkpoint {
    pub fn new(config: ModelConfig, seed: u64, params: ParamSet) -> Self {
        Checkpoint {
            config,
            seed,
            params,
            dtype: DType::F64,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        if self.dtype == DType::U64 {
            return Err(SpeftError::InvalidConfig("checkpoints store floats".into()));
        }
        let mut params = self.params.clone();
        if self.dtype == DType::F32 {
            for p in params.iter_mut() {
                p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        let meta = Meta {
            model: self.config.clone(),
            seed: self.seed,
            kinds: params.iter().map(|p| p.kind).collect(),
            fingerprint: params.fingerprint(),
        };
        let mut c = Container::new(CHECKPOINT_FORMAT, json!(meta));
        for p in params.iter() {
            c.push(Entry::float(
                p.name.clone(),
                p.value.shape().to_vec(),
                p.value.data().to_vec(),
                self.dtype,
            ));
        }
        Ok(c)
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        if c.format != CHECKPOINT_FORMAT {
            return Err(SpeftError::format(origin, format!("not a checkpoint: `{}`", c.format)));
        }
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| SpeftError::format(origin, format!("checkpoint metadata: {e}")))?;
        if meta.kinds.len() != c.entries.len() {
            return Err(SpeftError::format(origin, "kind list does not match entries"));
        }
        let mut params = ParamSet::default();
        let mut dtype = DType::F64;
        for (e, kind) in c.entries.iter().zip(meta.kinds) {
            let data = e
                .floats()
                .ok_or_else(|| SpeftError::format(origin, format!("`{}` is not a float tensor", e.name)))?;
            dtype = e.dtype;
            let t = Tensor::new(e.shape.clone(), data.to_vec())
                .map_err(|err| SpeftError::format(origin, err.to_string()))?;
            params
                .push(e.name.clone(), kind, t)
                .map_err(|err| SpeftError::format(origin, err.to_string()))?;
        }
        if params.fingerprint() != meta.fingerprint {
            return Err(SpeftError::format(origin, "fingerprint does not match tensor data"));
        }
        meta.model.validate()?;
        Ok(Checkpoint {
            config: meta.model,
            seed: meta.seed,
            params,
            dtype,
        })
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    ckpt.to_container()?.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let c = Container::load(path)?;
    Checkpoint::from_container(&c, path)
}
