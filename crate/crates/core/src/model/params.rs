use std::collections::HashMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::error::{Result, SpeftError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// 2-D weight matrix; the only kind that can be adapted.
    Matrix,
    Bias,
    Embedding,
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub frozen: bool,
}

/// Named model parameters in a fixed, construction-determined order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(SpeftError::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        if kind == ParamKind::Matrix && value.ndim() != 2 {
            return Err(SpeftError::InvalidConfig(format!(
                "matrix parameter `{name}` has shape {:?}",
                value.shape()
            )));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            kind,
            value,
            frozen: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn value(&self, i: usize) -> &Tensor {
        &self.params[i].value
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.params[i].value
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.params.iter_mut().for_each(|p| p.frozen = frozen);
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Indices of parameters that may receive adapters.
    pub fn adaptable(&self, filter: &AdaptFilter) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.kind == ParamKind::Matrix && filter.matches(&p.name))
            .map(|(i, _)| i)
            .collect()
    }

    /// Binds every value as a constant leaf, in order.
    pub fn bind_constants(&self, g: &mut Graph) -> Vec<Var> {
        self.params.iter().map(|p| g.constant(p.value.clone())).collect()
    }

    /// SHA-256 over names, shapes and little-endian `f64` values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update((p.name.len() as u64).to_le_bytes());
            h.update(p.name.as_bytes());
            h.update((p.value.ndim() as u64).to_le_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Name filter over adaptable matrices. Empty means every 2-D matrix.
#[derive(Clone, Debug, Default)]
pub struct AdaptFilter {
    patterns: Vec<Regex>,
}

impl AdaptFilter {
    pub fn all() -> Self {
        AdaptFilter::default()
    }

    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self> {
        let patterns = patterns
            .iter()
            .map(|p| {
                Regex::new(p.as_ref())
                    .map_err(|e| SpeftError::InvalidConfig(format!("bad layer pattern `{}`: {e}", p.as_ref())))
            })
            .collect::<Result<_>>()?;
        Ok(AdaptFilter { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.is_empty() || self.patterns.iter().any(|p| p.is_match(name))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::default();
        p.push("a", ParamKind::Bias, Tensor::zeros(&[2])).unwrap();
        assert!(p.push("a", ParamKind::Bias, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn filter_selects_matrices_only() {
        let mut p = ParamSet::default();
        p.push("fc0.weight", ParamKind::Matrix, Tensor::zeros(&[2, 2])).unwrap();
        p.push("fc0.bias", ParamKind::Bias, Tensor::zeros(&[2])).unwrap();
        p.push("head.weight", ParamKind::Matrix, Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(p.adaptable(&AdaptFilter::all()), vec![0, 2]);
        assert_eq!(p.adaptable(&AdaptFilter::new(&["^head"]).unwrap()), vec![2]);
        assert_eq!(p.adaptable(&AdaptFilter::new(&["bias"]).unwrap()), Vec::<usize>::new());
    }

    #[test]
    fn fingerprint_tracks_values() {
        let mut p = ParamSet::default();
        p.push("w", ParamKind::Matrix, Tensor::zeros(&[2, 2])).unwrap();
        let before = p.fingerprint();
        p.value_mut(0).data_mut()[3] = 1e-300;
        assert_ne!(before, p.fingerprint());
    }
}
