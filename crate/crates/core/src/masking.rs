//! Top-ρ sparsity masks over salience scores.

use std::cmp::Ordering;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpeftError};
use crate::io::{Container, Entry};
use crate::salience::{Metric, SalienceScores};

pub const MASK_FORMAT: &str = "speft.mask";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    Global,
    Local,
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Global => "global",
            Scope::Local => "local",
        })
    }
}

impl FromStr for Scope {
    type Err = SpeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "global" | "g" => Ok(Scope::Global),
            "local" | "l" => Ok(Scope::Local),
            other => Err(SpeftError::InvalidConfig(format!(
                "unknown scope `{other}` (expected global or local)"
            ))),
        }
    }
}

/// Number of selected entries, `floor(ρ·n)`. The small guard keeps products
/// such as `0.0035 · 2000` from landing just under an integer.
pub fn budget(rho: f64, n: usize) -> usize {
    (rho * n as f64 + 1e-9).floor() as usize
}

fn check_density(rho: f64) -> Result<()> {
    if rho > 0.0 && rho <= 1.0 {
        Ok(())
    } else {
        Err(SpeftError::InvalidDensity(rho))
    }
}

/// Indices of the `k` largest scores, ties to the lowest index, returned in
/// increasing order.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(scores.len());
    if k == 0 {
        return Vec::new();
    }
    let rank = |a: &usize, b: &usize| -> Ordering {
        scores[*b]
            .partial_cmp(&scores[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, rank);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskLayer {
    pub name: String,
    pub shape: Vec<usize>,
    /// Row-major flat coordinates, strictly increasing.
    pub indices: Vec<usize>,
}

impl MaskLayer {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SparsityMask {
    pub scope: Scope,
    pub density: f64,
    pub metric: Metric,
    /// Training step at which the mask was built.
    pub step: u64,
    pub layers: Vec<MaskLayer>,
    pub warnings: Vec<String>,
}

impl SparsityMask {
    pub fn nnz(&self) -> usize {
        self.layers.iter().map(|l| l.indices.len()).sum()
    }

    pub fn total_len(&self) -> usize {
        self.layers.iter().map(MaskLayer::numel).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&MaskLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Dense 0/1 indicator per layer.
    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                let mut d = vec![0.0; l.numel()];
                for &i in &l.indices {
                    d[i] = 1.0;
                }
                d
            })
            .collect()
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "scope": self.scope,
            "density": self.density,
            "metric": self.metric,
            "step": self.step,
            "layers": self.layers.iter().map(|l| serde_json::json!({
                "name": l.name,
                "shape": l.shape,
                "count": l.indices.len(),
            })).collect::<Vec<_>>(),
            "warnings": self.warnings,
        });
        let mut c = Container::new(MASK_FORMAT, meta);
        for l in &self.layers {
            c.push(Entry::index(
                l.name.clone(),
                vec![l.indices.len()],
                l.indices.iter().map(|i| *i as u64).collect(),
            ));
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct LayerMeta {
            name: String,
            shape: Vec<usize>,
            count: usize,
        }
        #[derive(Deserialize)]
        struct Meta {
            scope: Scope,
            density: f64,
            metric: Metric,
            step: u64,
            layers: Vec<LayerMeta>,
            #[serde(default)]
            warnings: Vec<String>,
        }
        if c.format != MASK_FORMAT {
            return Err(SpeftError::format(origin, format!("not a mask file: `{}`", c.format)));
        }
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| SpeftError::format(origin, format!("mask metadata: {e}")))?;
        if meta.layers.len() != c.entries.len() {
            return Err(SpeftError::format(origin, "layer list does not match entries"));
        }
        let mut layers = Vec::with_capacity(meta.layers.len());
        for (lm, e) in meta.layers.into_iter().zip(&c.entries) {
            let raw = e
                .indices()
                .ok_or_else(|| SpeftError::format(origin, format!("`{}` is not an index array", e.name)))?;
            if e.name != lm.name || raw.len() != lm.count {
                return Err(SpeftError::format(origin, format!("entry `{}` disagrees with header", e.name)));
            }
            let numel: usize = lm.shape.iter().product();
            let indices: Vec<usize> = raw.iter().map(|i| *i as usize).collect();
            let sorted = indices.windows(2).all(|w| w[0] < w[1]);
            if !sorted || indices.last().is_some_and(|i| *i >= numel) {
                return Err(SpeftError::format(
                    origin,
                    format!("indices of `{}` are not strictly increasing within 0..{numel}", e.name),
                ));
            }
            layers.push(MaskLayer {
                name: lm.name,
                shape: lm.shape,
                indices,
            });
        }
        check_density(meta.density)?;
        Ok(SparsityMask {
            scope: meta.scope,
            density: meta.density,
            metric: meta.metric,
            step: meta.step,
            layers,
            warnings: meta.warnings,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SparsityMask::from_container(&Container::load(path)?, path)
    }
}

fn check_scores(scores: &SalienceScores) -> Result<()> {
    if scores.layers.is_empty() || scores.total_len() == 0 {
        return Err(SpeftError::EmptyScores);
    }
    for l in &scores.layers {
        if let Some(index) = l.values.iter().position(|v| !v.is_finite()) {
            return Err(SpeftError::NonFiniteScore {
                layer: l.name.clone(),
                index,
            });
        }
    }
    Ok(())
}

/// Top-ρ over the concatenation of every layer: exactly `floor(ρ·N)` entries.
pub fn build_global_mask(scores: &SalienceScores, rho: f64) -> Result<SparsityMask> {
    check_density(rho)?;
    check_scores(scores)?;
    let all: Vec<f64> = scores.layers.iter().flat_map(|l| l.values.iter().copied()).collect();
    let k = budget(rho, all.len());
    if k == 0 {
        return Err(SpeftError::BudgetRoundsToZero { rho, n: all.len() });
    }
    let picked = top_k(&all, k);
    let mut layers = Vec::with_capacity(scores.layers.len());
    let (mut offset, mut cursor) = (0usize, 0usize);
    for l in &scores.layers {
        let end = offset + l.values.len();
        let start = cursor;
        while cursor < picked.len() && picked[cursor] < end {
            cursor += 1;
        }
        layers.push(MaskLayer {
            name: l.name.clone(),
            shape: l.shape.clone(),
            indices: picked[start..cursor].iter().map(|i| i - offset).collect(),
        });
        offset = end;
    }
    Ok(SparsityMask {
        scope: Scope::Global,
        density: rho,
        metric: scores.metric,
        step: 0,
        layers,
        warnings: Vec::new(),
    })
}

/// Top-ρ within each layer: `floor(ρ·N_layer)` entries per layer. Layers
/// whose budget rounds to zero get no entries and a warning.
pub fn build_local_mask(scores: &SalienceScores, rho: f64) -> Result<SparsityMask> {
    check_density(rho)?;
    check_scores(scores)?;
    let mut warnings = Vec::new();
    let layers: Vec<MaskLayer> = scores
        .layers
        .iter()
        .map(|l| {
            let k = budget(rho, l.values.len());
            if k == 0 {
                let w = format!("layer `{}` ({} entries) receives no trainable entries at density {rho}", l.name, l.values.len());
                log::warn!("{w}");
                warnings.push(w);
            }
            MaskLayer {
                name: l.name.clone(),
                shape: l.shape.clone(),
                indices: top_k(&l.values, k),
            }
        })
        .collect();
    let n = scores.total_len();
    if layers.iter().all(|l| l.indices.is_empty()) {
        return Err(SpeftError::BudgetRoundsToZero { rho, n });
    }
    Ok(SparsityMask {
        scope: Scope::Local,
        density: rho,
        metric: scores.metric,
        step: 0,
        layers,
        warnings,
    })
}

pub fn build_mask(scores: &SalienceScores, rho: f64, scope: Scope) -> Result<SparsityMask> {
    match scope {
        Scope::Global => build_global_mask(scores, rho),
        Scope::Local => build_local_mask(scores, rho),
    }
}

/// Refresh interval; values `<= 0` mean a static mask built once at step 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MaskSchedule {
    pub interval: i64,
}

impl MaskSchedule {
    pub const STATIC: MaskSchedule = MaskSchedule { interval: -1 };

    pub fn every(interval: i64) -> Self {
        MaskSchedule { interval }
    }

    pub fn is_static(self) -> bool {
        self.interval <= 0
    }

    pub fn should_refresh(self, t: u64) -> bool {
        should_refresh(t, self)
    }

    /// Steps in `1..=total` at which a refresh happens.
    pub fn refresh_steps(self, total: u64) -> Vec<u64> {
        let mut steps = if total >= 1 { vec![1] } else { Vec::new() };
        if !self.is_static() {
            let i = self.interval as u64;
            steps.extend((1..=total / i).map(|m| m * i).filter(|t| *t != 1));
        }
        steps
    }
}

pub fn should_refresh(t: u64, schedule: MaskSchedule) -> bool {
    t == 1 || (!schedule.is_static() && t % schedule.interval as u64 == 0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskDiff {
    /// Per layer, indices selected by the new mask but not the old.
    pub entering: Vec<Vec<usize>>,
    pub leaving: Vec<Vec<usize>>,
    /// `|old ∩ new| / |old|`; 1 when the old mask is empty.
    pub overlap: f64,
}

pub fn mask_diff(old: &SparsityMask, new: &SparsityMask) -> Result<MaskDiff> {
    let same_layers = old.layers.len() == new.layers.len()
        && old
            .layers
            .iter()
            .zip(&new.layers)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !same_layers {
        return Err(SpeftError::MismatchedLayers("masks cover different layers".into()));
    }
    let mut entering = Vec::with_capacity(old.layers.len());
    let mut leaving = Vec::with_capacity(old.layers.len());
    let mut common = 0usize;
    for (a, b) in old.layers.iter().zip(&new.layers) {
        let (mut i, mut j) = (0, 0);
        let (mut enter, mut leave) = (Vec::new(), Vec::new());
        while i < a.indices.len() || j < b.indices.len() {
            match (a.indices.get(i), b.indices.get(j)) {
                (Some(x), Some(y)) if x == y => {
                    common += 1;
                    i += 1;
                    j += 1;
                }
                (Some(x), Some(y)) if x < y => {
                    leave.push(*x);
                    i += 1;
                }
                (Some(x), None) => {
                    leave.push(*x);
                    i += 1;
                }
                (_, Some(y)) => {
                    enter.push(*y);
                    j += 1;
                }
                (None, None) => unreachable!(),
            }
        }
        entering.push(enter);
        leaving.push(leave);
    }
    let n_old = old.nnz();
    Ok(MaskDiff {
        entering,
        leaving,
        overlap: if n_old == 0 { 1.0 } else { common as f64 / n_old as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::salience::LayerScores;
    use proptest::prelude::*;

    fn scores(layers: Vec<Vec<f64>>) -> SalienceScores {
        SalienceScores {
            metric: Metric::Gradient,
            layers: layers
                .into_iter()
                .enumerate()
                .map(|(i, values)| LayerScores {
                    name: format!("l{i}"),
                    shape: vec![values.len()],
                    values,
                })
                .collect(),
            batches_used: 1,
            reduction: "abs".into(),
            seed: 0,
        }
    }

    fn sort_oracle(values: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..values.len()).collect();
        idx.sort_by(|a, b| values[*b].partial_cmp(&values[*a]).unwrap().then(a.cmp(b)));
        let mut out = idx[..k].to_vec();
        out.sort();
        out
    }

    #[test]
    fn global_examples() {
        let m = build_global_mask(&scores(vec![vec![0.9, 0.1, 0.5, 0.7]]), 0.5).unwrap();
        assert_eq!(m.layers[0].indices, vec![0, 3]);
        let m = build_global_mask(&scores(vec![vec![1.0; 4]]), 0.25).unwrap();
        assert_eq!(m.layers[0].indices, vec![0]);
        let m = build_global_mask(&scores(vec![vec![3.0, 1.0], vec![2.0]]), 1.0).unwrap();
        assert_eq!(m.nnz(), 3);
    }

    #[test]
    fn local_examples() {
        let m = build_local_mask(&scores(vec![vec![9.0, 1.0], vec![2.0, 3.0]]), 0.5).unwrap();
        assert_eq!(m.layers[0].indices, vec![0]);
        assert_eq!(m.layers[1].indices, vec![1]);
        let m = build_local_mask(&scores(vec![vec![1.0, 2.0, 3.0], vec![1.0; 8]]), 0.25).unwrap();
        assert!(m.layers[0].indices.is_empty());
        assert_eq!(m.layers[1].indices.len(), 2);
        assert_eq!(m.warnings.len(), 1);
    }

    #[test]
    fn degenerate_budgets() {
        let s = scores(vec![vec![1.0; 58]]);
        let err = build_global_mask(&s, 0.0035).unwrap_err();
        assert!(err.to_string().contains("budget rounds to zero"));
        assert!(matches!(build_global_mask(&s, 0.0), Err(SpeftError::InvalidDensity(_))));
        assert!(matches!(build_global_mask(&s, 1.5), Err(SpeftError::InvalidDensity(_))));
        assert!(matches!(build_global_mask(&scores(vec![]), 0.5), Err(SpeftError::EmptyScores)));
        assert!(matches!(
            build_global_mask(&scores(vec![vec![1.0, f64::NAN]]), 0.5),
            Err(SpeftError::NonFiniteScore { index: 1, .. })
        ));
    }

    #[test]
    fn budget_is_exact_on_decimal_densities() {
        for (rho, per_10k) in [(0.0018, 18u64), (0.0024, 24), (0.0027, 27), (0.0035, 35), (0.0053, 53), (0.0097, 97)] {
            for n in 1..20_000usize {
                assert_eq!(budget(rho, n) as u64, per_10k * n as u64 / 10_000, "rho {rho} n {n}");
            }
        }
    }

    #[test]
    fn refresh_schedule() {
        let dynamic = MaskSchedule::every(1000);
        assert!(dynamic.should_refresh(1));
        assert!(dynamic.should_refresh(2000));
        assert!(!dynamic.should_refresh(1500));
        assert!(!MaskSchedule::STATIC.should_refresh(999_999));
        assert!(MaskSchedule::every(0).should_refresh(1));
        assert_eq!(dynamic.refresh_steps(2500), vec![1, 1000, 2000]);
        assert_eq!(MaskSchedule::every(1).refresh_steps(3), vec![1, 2, 3]);
        assert_eq!(MaskSchedule::STATIC.refresh_steps(50), vec![1]);
    }

    #[test]
    fn diff_examples() {
        let a = build_global_mask(&scores(vec![vec![4.0, 3.0, 2.0, 1.0]]), 0.5).unwrap();
        let b = build_global_mask(&scores(vec![vec![1.0, 2.0, 3.0, 4.0]]), 0.5).unwrap();
        let same = mask_diff(&a, &a).unwrap();
        assert_eq!(same.overlap, 1.0);
        assert!(same.entering[0].is_empty() && same.leaving[0].is_empty());
        let d = mask_diff(&a, &b).unwrap();
        assert_eq!(d.overlap, 0.0);
        assert_eq!(d.entering[0], vec![2, 3]);
        assert_eq!(d.leaving[0], vec![0, 1]);
        let other = build_global_mask(&scores(vec![vec![1.0; 4], vec![1.0]]), 0.5).unwrap();
        assert!(mask_diff(&a, &other).is_err());
    }

    #[test]
    fn file_round_trip_is_byte_exact() {
        let mut m = build_local_mask(&scores(vec![vec![0.3, 0.9, 0.1, 0.4], vec![5.0, 1.0]]), 0.5).unwrap();
        m.step = 1000;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.mask");
        m.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let back = SparsityMask::load(&p).unwrap();
        assert_eq!(back, m);
        back.save(&p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    fn layer_values() -> impl Strategy<Value = Vec<Vec<f64>>> {
        // Small integer-valued scores force plenty of ties.
        prop::collection::vec(prop::collection::vec((-5i32..5).prop_map(|v| v as f64 * 0.5), 1..40), 1..5)
    }

    proptest! {
        #[test]
        fn global_matches_sort_oracle(layers in layer_values(), rho in 0.01f64..=1.0) {
            let s = scores(layers.clone());
            let flat: Vec<f64> = layers.concat();
            let k = budget(rho, flat.len());
            prop_assume!(k > 0);
            let m = build_global_mask(&s, rho).unwrap();
            prop_assert_eq!(m.nnz(), k);
            let mut got = Vec::new();
            let mut off = 0;
            for (l, v) in m.layers.iter().zip(&layers) {
                prop_assert!(l.indices.windows(2).all(|w| w[0] < w[1]));
                got.extend(l.indices.iter().map(|i| i + off));
                off += v.len();
            }
            prop_assert_eq!(got, sort_oracle(&flat, k));
        }

        #[test]
        fn local_matches_per_layer_oracle(layers in layer_values(), rho in 0.01f64..=1.0) {
            let s = scores(layers.clone());
            prop_assume!(layers.iter().any(|l| budget(rho, l.len()) > 0));
            let m = build_local_mask(&s, rho).unwrap();
            for (l, v) in m.layers.iter().zip(&layers) {
                prop_assert_eq!(&l.indices, &sort_oracle(v, budget(rho, v.len())));
            }
        }

        #[test]
        fn scopes_agree_on_one_layer(values in prop::collection::vec(-10.0f64..10.0, 1..60), rho in 0.05f64..=1.0) {
            let s = scores(vec![values.clone()]);
            prop_assume!(budget(rho, values.len()) > 0);
            let g = build_global_mask(&s, rho).unwrap();
            let l = build_local_mask(&s, rho).unwrap();
            prop_assert_eq!(&g.layers, &l.layers);
        }

        #[test]
        fn monotone_in_scores(values in prop::collection::vec(-10.0f64..10.0, 2..60), rho in 0.05f64..0.95, pick in any::<prop::sample::Index>(), bump in 0.0f64..5.0) {
            let s = scores(vec![values.clone()]);
            prop_assume!(budget(rho, values.len()) > 0);
            let m = build_global_mask(&s, rho).unwrap();
            let i = pick.index(values.len());
            let selected = m.layers[0].indices.contains(&i);
            let mut changed = values.clone();
            changed[i] += if selected { bump } else { -bump };
            let m2 = build_global_mask(&scores(vec![changed]), rho).unwrap();
            prop_assert_eq!(m2.layers[0].indices.contains(&i), selected);
        }
    }
}
