//! Pre-norm transformer: token + learned position embeddings, `n_layers`
//! blocks of multi-head attention and a two-layer feed-forward network, a
//! final layer norm and a linear head. The encoder mean-pools over positions
//! and classifies; the LM variant uses causal attention and predicts the next
//! token at every position.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Activation, Batch, Inputs, ParamKind, ParamSet, Targets, INIT_STD};
use crate::autodiff::{AttentionShape, Graph, Var};
use crate::error::{Result, SpeftError};
use crate::tensor::Tensor;

fn default_classes() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    /// Encoder only.
    #[serde(default = "default_classes")]
    pub n_classes: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Gelu
}

impl TransformerConfig {
    /// A one-block, 16-wide model for tests.
    pub fn tiny(vocab_size: usize) -> Self {
        TransformerConfig {
            vocab_size,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            max_seq_len: 8,
            n_classes: 2,
            activation: Activation::Gelu,
        }
    }

    pub(super) fn validate(&self) -> Result<()> {
        let dims = [
            self.vocab_size,
            self.d_model,
            self.n_heads,
            self.n_layers,
            self.d_ff,
            self.max_seq_len,
        ];
        if dims.contains(&0) {
            return Err(SpeftError::InvalidConfig(
                "transformer dimensions must be positive".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(SpeftError::InvalidConfig(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        Ok(())
    }
}

pub(super) fn init<R: Rng>(c: &TransformerConfig, out_dim: usize, p: &mut ParamSet, rng: &mut R) -> Result<()> {
    let d = c.d_model;
    p.push("tok_emb", ParamKind::Embedding, Tensor::randn(&[c.vocab_size, d], INIT_STD, rng))?;
    p.push("pos_emb", ParamKind::Embedding, Tensor::randn(&[c.max_seq_len, d], INIT_STD, rng))?;
    for b in 0..c.n_layers {
        let norm = |p: &mut ParamSet, name: &str| -> Result<()> {
            p.push(format!("blocks.{b}.{name}.gain"), ParamKind::Norm, Tensor::ones(&[d]))?;
            p.push(format!("blocks.{b}.{name}.bias"), ParamKind::Norm, Tensor::zeros(&[d]))
        };
        norm(p, "ln1")?;
        for proj in ["q", "k", "v", "o"] {
            p.push(
                format!("blocks.{b}.attn.{proj}.weight"),
                ParamKind::Matrix,
                Tensor::randn(&[d, d], INIT_STD, rng),
            )?;
            p.push(format!("blocks.{b}.attn.{proj}.bias"), ParamKind::Bias, Tensor::zeros(&[d]))?;
        }
        norm(p, "ln2")?;
        p.push(
            format!("blocks.{b}.mlp.fc1.weight"),
            ParamKind::Matrix,
            Tensor::randn(&[d, c.d_ff], INIT_STD, rng),
        )?;
        p.push(format!("blocks.{b}.mlp.fc1.bias"), ParamKind::Bias, Tensor::zeros(&[c.d_ff]))?;
        p.push(
            format!("blocks.{b}.mlp.fc2.weight"),
            ParamKind::Matrix,
            Tensor::randn(&[c.d_ff, d], INIT_STD, rng),
        )?;
        p.push(format!("blocks.{b}.mlp.fc2.bias"), ParamKind::Bias, Tensor::zeros(&[d]))?;
    }
    p.push("ln_f.gain", ParamKind::Norm, Tensor::ones(&[d]))?;
    p.push("ln_f.bias", ParamKind::Norm, Tensor::zeros(&[d]))?;
    p.push("head.weight", ParamKind::Matrix, Tensor::randn(&[d, out_dim], INIT_STD, rng))?;
    p.push("head.bias", ParamKind::Bias, Tensor::zeros(&[out_dim]))?;
    Ok(())
}

/// Parameters per block, in `init` order.
const PER_BLOCK: usize = 2 + 8 + 2 + 2 + 2;

pub(super) fn forward(
    c: &TransformerConfig,
    causal: bool,
    g: &mut Graph,
    w: &[Var],
    batch: &Batch,
) -> Result<(Var, Var)> {
    let (ids, bsz, seq) = match &batch.inputs {
        Inputs::Tokens { ids, batch, seq } => (ids, *batch, *seq),
        Inputs::Dense(_) => {
            return Err(SpeftError::InvalidConfig(
                "transformer expects token inputs".into(),
            ))
        }
    };
    let expected = 2 + PER_BLOCK * c.n_layers + 4;
    if w.len() != expected || ids.len() != bsz * seq || seq == 0 || seq > c.max_seq_len {
        return Err(SpeftError::ShapeMismatch {
            op: "transformer_forward",
            lhs: vec![expected, c.max_seq_len],
            rhs: vec![w.len(), seq],
        });
    }
    let positions: Vec<usize> = (0..bsz).flat_map(|_| 0..seq).collect();
    let tok = g.embedding(w[0], ids)?;
    let pos = g.embedding(w[1], &positions)?;
    let mut x = g.add(tok, pos)?;
    let shape = AttentionShape {
        batch: bsz,
        seq,
        heads: c.n_heads,
        causal,
    };
    for b in 0..c.n_layers {
        let p = &w[2 + b * PER_BLOCK..2 + (b + 1) * PER_BLOCK];
        let a = norm(g, x, p[0], p[1])?;
        let q = linear(g, a, p[2], p[3])?;
        let k = linear(g, a, p[4], p[5])?;
        let v = linear(g, a, p[6], p[7])?;
        let att = g.attention(q, k, v, shape)?;
        let o = linear(g, att, p[8], p[9])?;
        x = g.add(x, o)?;
        let m = norm(g, x, p[10], p[11])?;
        let m = linear(g, m, p[12], p[13])?;
        let m = c.activation.apply(g, m)?;
        let m = linear(g, m, p[14], p[15])?;
        x = g.add(x, m)?;
    }
    let tail = &w[2 + c.n_layers * PER_BLOCK..];
    let x = norm(g, x, tail[0], tail[1])?;
    if causal {
        let targets = match &batch.targets {
            Targets::NextTokens(t) if t.len() == ids.len() => t,
            _ => {
                return Err(SpeftError::InvalidConfig(
                    "language model needs next-token targets".into(),
                ))
            }
        };
        let logits = linear(g, x, tail[2], tail[3])?;
        let loss = g.cross_entropy(logits, targets)?;
        Ok((logits, loss))
    } else {
        let labels = match &batch.targets {
            Targets::Classes(l) if l.len() == bsz => l,
            _ => {
                return Err(SpeftError::InvalidConfig(
                    "encoder classifier needs one class label per sequence".into(),
                ))
            }
        };
        let pooled = g.mean_pool(x, bsz, seq)?;
        let logits = linear(g, pooled, tail[2], tail[3])?;
        let loss = g.cross_entropy(logits, labels)?;
        Ok((logits, loss))
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let h = g.matmul(x, w)?;
    g.add(h, b)
}

fn norm(g: &mut Graph, x: Var, gain: Var, bias: Var) -> Result<Var> {
    let n = g.layer_norm(x)?;
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}
