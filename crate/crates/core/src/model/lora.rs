//! Low-rank adapter baseline: each adapted matrix computes `θ₀ + (α/r)·B·A`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdaptFilter, ParamSet};
use crate::autodiff::{Graph, Var};
use crate::error::{Result, SpeftError};
use crate::tensor::Tensor;

pub const DEFAULT_LORA_RANK: usize = 8;
pub const DEFAULT_LORA_ALPHA: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub param_index: usize,
    pub name: String,
    /// `[d₁, r]`, zero at initialization.
    pub b: Tensor,
    /// `[r, d₂]`, normal(0, 1/√r) at initialization.
    pub a: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<LoraLayer>,
}

pub fn apply_low_rank_adapter(
    params: &ParamSet,
    filter: &AdaptFilter,
    rank: usize,
    alpha: f64,
    seed: u64,
) -> Result<LowRankAdapter> {
    if rank == 0 {
        return Err(SpeftError::InvalidConfig("rank must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (rank as f64).sqrt();
    let layers = params
        .adaptable(filter)
        .into_iter()
        .map(|i| {
            let p = params.param(i);
            let (d1, d2) = (p.value.shape()[0], p.value.shape()[1]);
            if rank > d1.min(d2) {
                return Err(SpeftError::RankTooLarge {
                    layer: p.name.clone(),
                    rank,
                    max: d1.min(d2),
                });
            }
            Ok(LoraLayer {
                param_index: i,
                name: p.name.clone(),
                b: Tensor::zeros(&[d1, rank]),
                a: Tensor::randn(&[rank, d2], std, &mut rng),
            })
        })
        .collect::<Result<_>>()?;
    Ok(LowRankAdapter { rank, alpha, layers })
}

/// Graph bindings produced by [`LowRankAdapter::bind`].
pub struct LoraBinding {
    /// Effective weights for the model, aligned with the base [`ParamSet`].
    pub weights: Vec<Var>,
    /// Trainable leaves, `(b, a)` per adapted layer.
    pub leaves: Vec<(Var, Var)>,
}

impl LowRankAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `Σ r·(d₁ + d₂)` over adapted layers.
    pub fn trainable_count(&self) -> usize {
        self.layers.iter().map(|l| l.a.numel() + l.b.numel()).sum()
    }

    pub fn bind(&self, g: &mut Graph, base: &ParamSet) -> Result<LoraBinding> {
        let mut weights = base.bind_constants(g);
        let mut leaves = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let b = g.param(l.b.clone());
            let a = g.param(l.a.clone());
            let ba = g.matmul(b, a)?;
            let ba = g.scale(ba, self.scaling())?;
            weights[l.param_index] = g.add(weights[l.param_index], ba)?;
            leaves.push((b, a));
        }
        Ok(LoraBinding { weights, leaves })
    }

    /// Dense `θ₀ + (α/r)·B·A` for every adapted layer.
    pub fn merged(&self, base: &ParamSet) -> Result<ParamSet> {
        let mut out = base.clone();
        for l in &self.layers {
            let delta = l.b.matmul(&l.a)?.scale(self.scaling());
            out.value_mut(l.param_index).add_assign(&delta)?;
        }
        Ok(out)
    }

    /// Mutable views over trainable values, `b` then `a` per layer.
    pub fn values_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.b.data_mut(), l.a.data_mut()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, Activation, Batch, Inputs, ModelConfig, MlpTask, Targets};

    #[test]
    fn trainable_count_is_rank_times_dims() {
        let cfg = ModelConfig::mlp(&[64, 64, 64, 64, 64], Activation::Relu, MlpTask::Regression);
        let (_, params) = build_model(&cfg, 0).unwrap();
        let lora = apply_low_rank_adapter(&params, &AdaptFilter::all(), 8, 8.0, 0).unwrap();
        assert_eq!(lora.layers.len(), 4);
        assert_eq!(lora.trainable_count(), 4 * 8 * 128);
    }

    #[test]
    fn rank_exceeding_dimension_is_rejected() {
        let cfg = ModelConfig::mlp(&[16, 4], Activation::Relu, MlpTask::Regression);
        let (_, params) = build_model(&cfg, 0).unwrap();
        let err = apply_low_rank_adapter(&params, &AdaptFilter::all(), 8, 8.0, 0).unwrap_err();
        assert!(matches!(err, SpeftError::RankTooLarge { rank: 8, max: 4, .. }));
    }

    #[test]
    fn zero_b_leaves_forward_unchanged() {
        let cfg = ModelConfig::mlp(&[8, 16, 8], Activation::Tanh, MlpTask::Regression);
        let (model, params) = build_model(&cfg, 3).unwrap();
        let lora = apply_low_rank_adapter(&params, &AdaptFilter::all(), 4, 8.0, 1).unwrap();
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = Batch {
            inputs: Inputs::Dense(Tensor::new(vec![3, 8], x).unwrap()),
            targets: Targets::Regression(Tensor::ones(&[3, 8])),
        };
        let base = model.loss(&params, &batch).unwrap();
        let mut g = Graph::new();
        let bound = lora.bind(&mut g, &params).unwrap();
        let l = model.forward(&mut g, &bound.weights, &batch).unwrap();
        assert_eq!(g.value(l).item().to_bits(), base.to_bits());
        assert_eq!(lora.merged(&params).unwrap(), params);
    }
}
