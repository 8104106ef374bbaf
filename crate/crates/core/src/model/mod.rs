//! Model zoo: small MLPs and tiny transformers whose 2-D weight matrices are
//! the fine-tuning targets.

mod checkpoint;
mod lora;
mod params;
mod transformer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};
pub use lora::{apply_low_rank_adapter, LoraBinding, LoraLayer, LowRankAdapter, DEFAULT_LORA_ALPHA, DEFAULT_LORA_RANK};
pub use params::{AdaptFilter, Param, ParamKind, ParamSet};
pub use transformer::TransformerConfig;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SpeftError};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weight matrices and embeddings.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MlpTask {
    #[default]
    Regression,
    Classification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    /// Layer widths, input first: `[4, 8, 2]` is 4 → 8 → 2.
    pub widths: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub task: MlpTask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case")]
pub enum ModelConfig {
    Mlp(MlpConfig),
    TransformerEncoder(TransformerConfig),
    TransformerLm(TransformerConfig),
}

impl ModelConfig {
    pub fn mlp(widths: &[usize], activation: Activation, task: MlpTask) -> Self {
        ModelConfig::Mlp(MlpConfig {
            widths: widths.to_vec(),
            activation,
            task,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Mlp(c) => {
                if c.widths.len() < 2 || c.widths.contains(&0) {
                    return Err(SpeftError::InvalidConfig(format!(
                        "mlp widths must have >= 2 positive entries, got {:?}",
                        c.widths
                    )));
                }
                if c.task == MlpTask::Classification && c.widths.last() == Some(&1) {
                    return Err(SpeftError::InvalidConfig(
                        "classification needs at least 2 output classes".into(),
                    ));
                }
                Ok(())
            }
            ModelConfig::TransformerEncoder(c) => {
                c.validate()?;
                if c.n_classes < 2 {
                    return Err(SpeftError::InvalidConfig("n_classes must be >= 2".into()));
                }
                Ok(())
            }
            ModelConfig::TransformerLm(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Mlp(_) => "mlp",
            ModelConfig::TransformerEncoder(_) => "transformer-encoder",
            ModelConfig::TransformerLm(_) => "transformer-lm",
        }
    }
}

/// Model inputs for one mini-batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Inputs {
    /// `[batch, features]`
    Dense(Tensor),
    /// Row-major `batch × seq` token ids.
    Tokens { ids: Vec<usize>, batch: usize, seq: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// `[batch, outputs]`
    Regression(Tensor),
    Classes(Vec<usize>),
    /// Row-major `batch × seq` next-token ids.
    NextTokens(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Inputs,
    pub targets: Targets,
}

impl Batch {
    pub fn len(&self) -> usize {
        match &self.inputs {
            Inputs::Dense(x) => x.shape().first().copied().unwrap_or(0),
            Inputs::Tokens { batch, .. } => *batch,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One step of the linearized network used by SynFlow.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ChainLink {
    /// `h ← h · |W|`
    Single(usize),
    /// `h ← Σ_i h · |W_i|`, for parallel projections of equal shape.
    Parallel(Vec<usize>),
}

/// Ordered linear view of a model: weights (ParamSet indices) in execution
/// order, applied to an all-ones input of `input_width`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearChain {
    pub input_width: usize,
    pub links: Vec<ChainLink>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    config: ModelConfig,
}

/// Builds a model and its deterministic initialization: normal(0, 0.02) for
/// matrices and embeddings, zeros for biases, ones for normalization gains.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<(Model, ParamSet)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::default();
    match config {
        ModelConfig::Mlp(c) => {
            for (i, w) in c.widths.windows(2).enumerate() {
                params.push(
                    format!("fc{i}.weight"),
                    ParamKind::Matrix,
                    Tensor::randn(&[w[0], w[1]], INIT_STD, &mut rng),
                )?;
                params.push(format!("fc{i}.bias"), ParamKind::Bias, Tensor::zeros(&[w[1]]))?;
            }
        }
        ModelConfig::TransformerEncoder(c) => transformer::init(c, c.n_classes, &mut params, &mut rng)?,
        ModelConfig::TransformerLm(c) => transformer::init(c, c.vocab_size, &mut params, &mut rng)?,
    }
    Ok((
        Model {
            config: config.clone(),
        },
        params,
    ))
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Mini-batch mean loss with weights bound to `weights` (aligned with the
    /// model's [`ParamSet`] order).
    pub fn forward(&self, g: &mut Graph, weights: &[Var], batch: &Batch) -> Result<Var> {
        Ok(self.forward_with_output(g, weights, batch)?.1)
    }

    /// Returns `(output, loss)`: predictions for regression, logits otherwise.
    pub fn forward_with_output(&self, g: &mut Graph, weights: &[Var], batch: &Batch) -> Result<(Var, Var)> {
        if batch.is_empty() {
            return Err(SpeftError::EmptyBatch);
        }
        match &self.config {
            ModelConfig::Mlp(c) => mlp_forward(c, g, weights, batch),
            ModelConfig::TransformerEncoder(c) => transformer::forward(c, false, g, weights, batch),
            ModelConfig::TransformerLm(c) => transformer::forward(c, true, g, weights, batch),
        }
    }

    /// Convenience: loss value with every parameter bound as a constant.
    pub fn loss(&self, params: &ParamSet, batch: &Batch) -> Result<f64> {
        let mut g = Graph::new();
        let w = params.bind_constants(&mut g);
        let l = self.forward(&mut g, &w, batch)?;
        Ok(g.value(l).item())
    }

    pub fn linear_chain(&self, params: &ParamSet) -> Result<LinearChain> {
        let idx = |name: &str| params.index_of(name).ok_or_else(|| SpeftError::UnknownLayer(name.into()));
        match &self.config {
            ModelConfig::Mlp(c) => Ok(LinearChain {
                input_width: c.widths[0],
                links: (0..c.widths.len() - 1)
                    .map(|i| idx(&format!("fc{i}.weight")).map(ChainLink::Single))
                    .collect::<Result<_>>()?,
            }),
            ModelConfig::TransformerEncoder(c) | ModelConfig::TransformerLm(c) => {
                let mut links = Vec::new();
                for b in 0..c.n_layers {
                    let p = |s: &str| idx(&format!("blocks.{b}.{s}"));
                    links.push(ChainLink::Parallel(vec![
                        p("attn.q.weight")?,
                        p("attn.k.weight")?,
                        p("attn.v.weight")?,
                    ]));
                    links.push(ChainLink::Single(p("attn.o.weight")?));
                    links.push(ChainLink::Single(p("mlp.fc1.weight")?));
                    links.push(ChainLink::Single(p("mlp.fc2.weight")?));
                }
                links.push(ChainLink::Single(idx("head.weight")?));
                Ok(LinearChain {
                    input_width: c.d_model,
                    links,
                })
            }
        }
    }
}

fn mlp_forward(c: &MlpConfig, g: &mut Graph, w: &[Var], batch: &Batch) -> Result<(Var, Var)> {
    let x = match &batch.inputs {
        Inputs::Dense(x) => x,
        Inputs::Tokens { .. } => {
            return Err(SpeftError::InvalidConfig("mlp expects dense inputs".into()));
        }
    };
    let layers = c.widths.len() - 1;
    if w.len() != 2 * layers {
        return Err(SpeftError::ShapeMismatch {
            op: "mlp_forward",
            lhs: vec![2 * layers],
            rhs: vec![w.len()],
        });
    }
    let mut h = g.constant(x.clone());
    for i in 0..layers {
        h = g.matmul(h, w[2 * i])?;
        h = g.add(h, w[2 * i + 1])?;
        if i + 1 < layers {
            h = c.activation.apply(g, h)?;
        }
    }
    let loss = match (&batch.targets, c.task) {
        (Targets::Regression(y), MlpTask::Regression) => {
            let y = g.constant(y.clone());
            g.mse(h, y)?
        }
        (Targets::Classes(labels), MlpTask::Classification) => g.cross_entropy(h, labels)?,
        _ => {
            return Err(SpeftError::InvalidConfig(
                "batch targets do not match the mlp task".into(),
            ))
        }
    };
    Ok((h, loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mlp_parameter_count() {
        let cfg = ModelConfig::mlp(&[4, 8, 2], Activation::Relu, MlpTask::Regression);
        let (_, params) = build_model(&cfg, 0).unwrap();
        assert_eq!(params.numel(), 4 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn initialization_is_deterministic() {
        let cfg = ModelConfig::TransformerLm(TransformerConfig::tiny(16));
        let (_, a) = build_model(&cfg, 11).unwrap();
        let (_, b) = build_model(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let (_, c) = build_model(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn transformer_projections_are_square() {
        let mut t = TransformerConfig::tiny(10);
        t.d_model = 32;
        t.n_heads = 4;
        let (_, params) = build_model(&ModelConfig::TransformerEncoder(t), 0).unwrap();
        for proj in ["q", "k", "v", "o"] {
            let p = params.get(&format!("blocks.0.attn.{proj}.weight")).unwrap();
            assert_eq!(p.value.shape(), &[32, 32]);
        }
    }

    #[test]
    fn invalid_dimensions_rejected() {
        let mut t = TransformerConfig::tiny(10);
        t.n_heads = 3;
        assert!(build_model(&ModelConfig::TransformerLm(t), 0).is_err());
        assert!(build_model(&ModelConfig::mlp(&[4], Activation::Relu, MlpTask::Regression), 0).is_err());
        assert!(build_model(&ModelConfig::mlp(&[4, 0, 1], Activation::Relu, MlpTask::Regression), 0).is_err());
    }

    #[test]
    fn zero_classifier_has_uniform_loss() {
        let cfg = ModelConfig::mlp(&[3, 5], Activation::Relu, MlpTask::Classification);
        let (model, mut params) = build_model(&cfg, 0).unwrap();
        for p in params.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = Batch {
            inputs: Inputs::Dense(Tensor::matrix(&[&[1.0, 2.0, 3.0], &[-1.0, 0.0, 4.0]])),
            targets: Targets::Classes(vec![0, 4]),
        };
        let loss = model.loss(&params, &batch).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    /// y = w2 · relu(w1 · x) with scalar weights and zero biases.
    #[test]
    fn hand_computed_regression_loss() {
        let cfg = ModelConfig::mlp(&[1, 1, 1], Activation::Relu, MlpTask::Regression);
        let (model, mut params) = build_model(&cfg, 0).unwrap();
        params.value_mut(0).data_mut()[0] = 1.5;
        params.value_mut(2).data_mut()[0] = -2.0;
        let batch = Batch {
            inputs: Inputs::Dense(Tensor::matrix(&[&[2.0]])),
            targets: Targets::Regression(Tensor::matrix(&[&[1.0]])),
        };
        // relu(3) * -2 = -6; (−6 − 1)² = 49
        assert_eq!(model.loss(&params, &batch).unwrap(), 49.0);
    }

    #[test]
    fn empty_batch_rejected() {
        let cfg = ModelConfig::mlp(&[2, 1], Activation::Relu, MlpTask::Regression);
        let (model, params) = build_model(&cfg, 0).unwrap();
        let batch = Batch {
            inputs: Inputs::Dense(Tensor::zeros(&[0, 2])),
            targets: Targets::Regression(Tensor::zeros(&[0, 1])),
        };
        assert!(matches!(model.loss(&params, &batch), Err(SpeftError::EmptyBatch)));
    }

    #[test]
    fn identical_sequences_match_single_sequence_loss() {
        let cfg = ModelConfig::TransformerLm(TransformerConfig::tiny(6));
        let (model, params) = build_model(&cfg, 4).unwrap();
        let seq = vec![1, 4, 2, 5];
        let tgt = vec![4, 2, 5, 0];
        let single = Batch {
            inputs: Inputs::Tokens { ids: seq.clone(), batch: 1, seq: 4 },
            targets: Targets::NextTokens(tgt.clone()),
        };
        let triple = Batch {
            inputs: Inputs::Tokens { ids: seq.repeat(3), batch: 3, seq: 4 },
            targets: Targets::NextTokens(tgt.repeat(3)),
        };
        let a = model.loss(&params, &single).unwrap();
        let b = model.loss(&params, &triple).unwrap();
        assert!((a - b).abs() < 1e-14);
    }
}
