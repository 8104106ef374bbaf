//! Sparse delta `W_sp` over frozen base weights, its optimizers and files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SpeftError};
use crate::io::{Container, DType, Entry};
use crate::masking::SparsityMask;
use crate::model::{save_checkpoint, Checkpoint, ParamSet};
use crate::tensor::Tensor;

pub const ADAPTER_FORMAT: &str = "speft.adapter";
/// Bytes per stored coordinate.
pub const INDEX_BYTES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaLayer {
    pub param_index: usize,
    pub name: String,
    pub shape: Vec<usize>,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct SparseDelta {
    pub layers: Vec<DeltaLayer>,
}

pub fn gather(dense: &[f64], indices: &[usize]) -> Vec<f64> {
    indices.iter().map(|i| dense[*i]).collect()
}

pub fn scatter(indices: &[usize], values: &[f64], numel: usize) -> Vec<f64> {
    let mut out = vec![0.0; numel];
    for (i, v) in indices.iter().zip(values) {
        out[*i] = *v;
    }
    out
}

/// Zero delta on the support of `mask`.
pub fn attach(mask: &SparsityMask, base: &ParamSet) -> Result<SparseDelta> {
    let layers = mask
        .layers
        .iter()
        .map(|l| {
            let param_index = base
                .index_of(&l.name)
                .ok_or_else(|| SpeftError::UnknownLayer(l.name.clone()))?;
            let shape = base.value(param_index).shape().to_vec();
            if shape != l.shape {
                return Err(SpeftError::ShapeMismatch {
                    op: "attach",
                    lhs: l.shape.clone(),
                    rhs: shape,
                });
            }
            Ok(DeltaLayer {
                param_index,
                name: l.name.clone(),
                shape,
                indices: l.indices.clone(),
                values: vec![0.0; l.indices.len()],
            })
        })
        .collect::<Result<_>>()?;
    Ok(SparseDelta { layers })
}

/// Graph bindings from [`SparseDelta::bind`].
pub struct DeltaBinding {
    /// Effective weights aligned with the base [`ParamSet`].
    pub weights: Vec<Var>,
    /// One dense leaf `θ₀ + W_sp` per delta layer.
    pub leaves: Vec<Var>,
}

impl SparseDelta {
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.values.iter().filter(|v| **v != 0.0).count())
            .sum()
    }

    /// `θ₀ + W_sp` as a dense tensor for one layer.
    fn dense_layer(&self, l: &DeltaLayer, base: &ParamSet) -> Tensor {
        let mut t = base.value(l.param_index).clone();
        let data = t.data_mut();
        for (i, v) in l.indices.iter().zip(&l.values) {
            data[*i] += v;
        }
        t
    }

    pub fn materialize(&self, base: &ParamSet) -> ParamSet {
        let mut out = base.clone();
        for l in &self.layers {
            *out.value_mut(l.param_index) = self.dense_layer(l, base);
        }
        out
    }

    /// Binds the base as constants with each adapted weight replaced by a
    /// trainable dense copy of `θ₀ + W_sp`.
    pub fn bind(&self, g: &mut Graph, base: &ParamSet) -> DeltaBinding {
        let mut weights = base.bind_constants(g);
        let leaves = self
            .layers
            .iter()
            .map(|l| {
                let v = g.param(self.dense_layer(l, base));
                weights[l.param_index] = v;
                v
            })
            .collect();
        DeltaBinding { weights, leaves }
    }

    /// `τ ⊙ ∂ℓ/∂W` restricted to the support, per layer.
    pub fn masked_gradient(&self, dense_grads: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        if dense_grads.len() != self.layers.len() {
            return Err(SpeftError::MismatchedLayers(format!(
                "{} gradients for {} delta layers",
                dense_grads.len(),
                self.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(dense_grads)
            .map(|(l, g)| {
                if g.shape() != l.shape.as_slice() {
                    return Err(SpeftError::ShapeMismatch {
                        op: "masked_gradient",
                        lhs: l.shape.clone(),
                        rhs: g.shape().to_vec(),
                    });
                }
                Ok(gather(g.data(), &l.indices))
            })
            .collect()
    }

    pub fn groups_mut<'a>(&'a mut self, grads: &'a [Vec<f64>]) -> Vec<ParamGroup<'a>> {
        self.layers
            .iter_mut()
            .zip(grads)
            .map(|(l, g)| ParamGroup {
                name: &l.name,
                values: &mut l.values,
                grad: g,
            })
            .collect()
    }

    /// `(θ, W_sp) ← (θ + W_sp, 0)`.
    pub fn merge_and_reset(&mut self, base: &mut ParamSet) {
        for l in &mut self.layers {
            let data = base.value_mut(l.param_index).data_mut();
            for (i, v) in l.indices.iter().zip(l.values.iter_mut()) {
                data[*i] += *v;
                *v = 0.0;
            }
        }
    }

    pub fn to_container(&self, base_fingerprint: &str, dtype: DType) -> Result<Container> {
        if dtype == DType::U64 {
            return Err(SpeftError::InvalidConfig("adapter values are floats".into()));
        }
        let meta = json!({
            "base_fingerprint": base_fingerprint,
            "layers": self.layers.iter().map(|l| json!({
                "name": l.name,
                "shape": l.shape,
                "count": l.indices.len(),
            })).collect::<Vec<_>>(),
        });
        let mut c = Container::new(ADAPTER_FORMAT, meta);
        for l in &self.layers {
            c.push(Entry::index(
                format!("{}.indices", l.name),
                vec![l.indices.len()],
                l.indices.iter().map(|i| *i as u64).collect(),
            ));
            c.push(Entry::float(
                format!("{}.values", l.name),
                vec![l.values.len()],
                l.values.clone(),
                dtype,
            ));
        }
        Ok(c)
    }
}

/// An adapter file: the delta plus the fingerprint of the base it belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterFile {
    pub base_fingerprint: String,
    pub layers: Vec<(String, Vec<usize>, Vec<usize>, Vec<f64>)>,
}

impl AdapterFile {
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct LayerMeta {
            name: String,
            shape: Vec<usize>,
            count: usize,
        }
        #[derive(Deserialize)]
        struct Meta {
            base_fingerprint: String,
            layers: Vec<LayerMeta>,
        }
        let c = Container::load_expecting(path, ADAPTER_FORMAT)?;
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| SpeftError::format(path, format!("adapter metadata: {e}")))?;
        let mut layers = Vec::with_capacity(meta.layers.len());
        for lm in meta.layers {
            let idx = c
                .entry(&format!("{}.indices", lm.name))
                .and_then(|e| e.indices())
                .ok_or_else(|| SpeftError::format(path, format!("missing indices for `{}`", lm.name)))?;
            let vals = c
                .entry(&format!("{}.values", lm.name))
                .and_then(|e| e.floats())
                .ok_or_else(|| SpeftError::format(path, format!("missing values for `{}`", lm.name)))?;
            if idx.len() != lm.count || vals.len() != lm.count {
                return Err(SpeftError::format(path, format!("`{}` counts disagree with header", lm.name)));
            }
            layers.push((
                lm.name,
                lm.shape,
                idx.iter().map(|i| *i as usize).collect(),
                vals.to_vec(),
            ));
        }
        Ok(AdapterFile {
            base_fingerprint: meta.base_fingerprint,
            layers,
        })
    }

    /// Rebuilds the delta against `base`, refusing a base with another fingerprint.
    pub fn into_delta(self, base: &ParamSet) -> Result<SparseDelta> {
        let found = base.fingerprint();
        if found != self.base_fingerprint {
            return Err(SpeftError::FingerprintMismatch {
                expected: self.base_fingerprint,
                found,
            });
        }
        let layers = self
            .layers
            .into_iter()
            .map(|(name, shape, indices, values)| {
                let param_index = base.index_of(&name).ok_or_else(|| SpeftError::UnknownLayer(name.clone()))?;
                let numel: usize = shape.iter().product();
                if base.value(param_index).shape() != shape.as_slice() || indices.iter().any(|i| *i >= numel) {
                    return Err(SpeftError::MismatchedLayers(format!("adapter layer `{name}` does not fit the base")));
                }
                Ok(DeltaLayer {
                    param_index,
                    name,
                    shape,
                    indices,
                    values,
                })
            })
            .collect::<Result<_>>()?;
        Ok(SparseDelta { layers })
    }
}

/// Writes `θ₀ + W_sp` as a checkpoint and the delta alone as an adapter file.
pub fn export_merged(ckpt_path: &Path, adapter_path: Option<&Path>, base: &Checkpoint, delta: &SparseDelta) -> Result<()> {
    let merged = Checkpoint {
        params: delta.materialize(&base.params),
        ..base.clone()
    };
    save_checkpoint(ckpt_path, &merged)?;
    if let Some(p) = adapter_path {
        delta.to_container(&base.params.fingerprint(), base.dtype)?.save(p)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub nnz: usize,
    pub index_bytes: usize,
    pub value_bytes: usize,
    pub dense_bytes: usize,
    /// Index bytes over dense model bytes.
    pub index_fraction: f64,
    /// Index plus value bytes over dense model bytes.
    pub adapter_fraction: f64,
}

/// Storage of a sparse adapter with `nnz` entries next to a dense model of
/// `dense_params` parameters, both with `weight_bytes`-wide values.
pub fn storage_report(nnz: usize, dense_params: usize, weight_bytes: usize) -> StorageReport {
    let index_bytes = nnz * INDEX_BYTES;
    let value_bytes = nnz * weight_bytes;
    let dense_bytes = dense_params * weight_bytes;
    StorageReport {
        nnz,
        index_bytes,
        value_bytes,
        dense_bytes,
        index_fraction: index_bytes as f64 / dense_bytes as f64,
        adapter_fraction: (index_bytes + value_bytes) as f64 / dense_bytes as f64,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adamw,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adamw,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// A named slice of trainable values with its gradient.
pub struct ParamGroup<'a> {
    pub name: &'a str,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, sizes: &[usize]) -> Self {
        let mut s = OptimizerState {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        };
        s.reinitialize(sizes);
        s
    }

    /// Fresh state for groups of the given sizes: zero moments, step 0.
    pub fn reinitialize(&mut self, sizes: &[usize]) {
        self.step = 0;
        let moments = self.config.kind == OptimizerKind::Adamw;
        self.m = sizes.iter().map(|n| vec![0.0; if moments { *n } else { 0 }]).collect();
        self.v = self.m.clone();
    }

    pub fn is_reset(&self) -> bool {
        self.step == 0 && self.m.iter().chain(&self.v).all(|b| b.iter().all(|x| *x == 0.0))
    }

    /// One update at learning rate `lr`. Gradients are checked before any
    /// value changes.
    pub fn step(&mut self, groups: &mut [ParamGroup<'_>], lr: f64) -> Result<()> {
        if groups.len() != self.m.len() {
            return Err(SpeftError::MismatchedLayers(format!(
                "optimizer holds {} groups, got {}",
                self.m.len(),
                groups.len()
            )));
        }
        for g in groups.iter() {
            if g.values.len() != g.grad.len() {
                return Err(SpeftError::ShapeMismatch {
                    op: "optimizer step",
                    lhs: vec![g.values.len()],
                    rhs: vec![g.grad.len()],
                });
            }
            if let Some(index) = g.grad.iter().position(|x| !x.is_finite()) {
                return Err(SpeftError::NonFiniteGradient {
                    layer: g.name.to_string(),
                    index,
                });
            }
        }
        self.step += 1;
        let c = self.config;
        match c.kind {
            OptimizerKind::Sgd => {
                for g in groups.iter_mut() {
                    for (p, d) in g.values.iter_mut().zip(g.grad) {
                        *p -= lr * (d + c.weight_decay * *p);
                    }
                }
            }
            OptimizerKind::Adamw => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for ((g, m), v) in groups.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    if m.len() != g.values.len() {
                        return Err(SpeftError::MismatchedLayers(format!("moment buffer size for `{}`", g.name)));
                    }
                    for (((p, d), mi), vi) in g.values.iter_mut().zip(g.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *p -= lr * c.weight_decay * *p;
                        *mi = c.beta1 * *mi + (1.0 - c.beta1) * d;
                        *vi = c.beta2 * *vi + (1.0 - c.beta2) * d * d;
                        let m_hat = *mi / bc1;
                        let v_hat = *vi / bc2;
                        *p -= lr * m_hat / (v_hat.sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
