//! Weight-salience metrics over the adaptable weights of a model.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{gradient_of, hessian_vector_product_exact, hvp_with, Graph, Var};
use crate::data::{mix_seed, BatchSampler, Dataset};
use crate::error::{Result, SpeftError};
use crate::io::{Container, DType, Entry};
use crate::model::{Batch, ChainLink, Model, ParamSet};
use crate::tensor::Tensor;

pub const SCORES_FORMAT: &str = "speft.scores";
pub const DEFAULT_ESTIMATION_BATCHES: usize = 64;
pub const DEFAULT_ESTIMATION_BATCH_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Magnitude,
    Gradient,
    Snip,
    Force,
    TaylorFo,
    Synflow,
    Grasp,
    Fisher,
    /// Uniform random scores; a control, not a salience metric.
    Random,
}

impl Metric {
    /// The eight salience metrics, without the random control.
    pub const ALL: [Metric; 8] = [
        Metric::Magnitude,
        Metric::Gradient,
        Metric::Snip,
        Metric::Force,
        Metric::TaylorFo,
        Metric::Synflow,
        Metric::Grasp,
        Metric::Fisher,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Magnitude => "magnitude",
            Metric::Gradient => "gradient",
            Metric::Snip => "snip",
            Metric::Force => "force",
            Metric::TaylorFo => "taylor_fo",
            Metric::Synflow => "synflow",
            Metric::Grasp => "grasp",
            Metric::Fisher => "fisher",
            Metric::Random => "random",
        }
    }

    pub fn needs_data(self) -> bool {
        !matches!(self, Metric::Magnitude | Metric::Synflow | Metric::Random)
    }

    /// FORCE and GRaSP rank on signed values.
    pub fn is_signed(self) -> bool {
        matches!(self, Metric::Force | Metric::Grasp)
    }

    /// Gradient evaluations per estimation batch, relative to one
    /// forward+backward pass.
    pub fn cost_multiplier(self) -> f64 {
        match self {
            Metric::Magnitude | Metric::Random => 0.0,
            Metric::Synflow => 0.0,
            Metric::Gradient | Metric::Snip | Metric::Force | Metric::TaylorFo => 1.0,
            Metric::Grasp | Metric::Fisher => 2.0,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = SpeftError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Metric::ALL
            .into_iter()
            .chain([Metric::Random])
            .find(|m| m.name() == norm)
            .ok_or_else(|| SpeftError::UnknownMetric(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    Abs,
    Raw,
}

/// Order of batch averaging and the elementwise transform for SNIP, FORCE
/// and Taylor-FO.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    AverageFirst,
    TransformThenAverage,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    #[default]
    PerBatch,
    PerSample,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvpMode {
    #[default]
    FiniteDifference,
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SalienceConfig {
    pub metric: Metric,
    pub batches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub gradient_mode: GradientMode,
    pub reduction: Reduction,
    pub fisher_mode: FisherMode,
    pub hvp: HvpMode,
}

impl Default for SalienceConfig {
    fn default() -> Self {
        SalienceConfig {
            metric: Metric::Gradient,
            batches: DEFAULT_ESTIMATION_BATCHES,
            batch_size: DEFAULT_ESTIMATION_BATCH_SIZE,
            seed: 0,
            gradient_mode: GradientMode::default(),
            reduction: Reduction::default(),
            fisher_mode: FisherMode::default(),
            hvp: HvpMode::default(),
        }
    }
}

impl SalienceConfig {
    pub fn new(metric: Metric) -> Self {
        SalienceConfig {
            metric,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.metric.needs_data() && (self.batches == 0 || self.batch_size == 0) {
            return Err(SpeftError::InvalidConfig(format!(
                "metric {} needs at least one estimation batch of size >= 1",
                self.metric
            )));
        }
        Ok(())
    }

    fn reduction_label(&self) -> &'static str {
        match self.metric {
            Metric::Gradient => match self.gradient_mode {
                GradientMode::Abs => "abs",
                GradientMode::Raw => "raw",
            },
            Metric::Snip | Metric::Force | Metric::TaylorFo => match self.reduction {
                Reduction::AverageFirst => "average_first",
                Reduction::TransformThenAverage => "transform_then_average",
            },
            Metric::Fisher => match self.fisher_mode {
                FisherMode::PerBatch => "per_batch",
                FisherMode::PerSample => "per_sample",
            },
            Metric::Grasp => match self.hvp {
                HvpMode::FiniteDifference => "finite_difference",
                HvpMode::Exact => "exact",
            },
            Metric::Magnitude | Metric::Synflow | Metric::Random => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerScores {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SalienceScores {
    pub metric: Metric,
    pub layers: Vec<LayerScores>,
    pub batches_used: usize,
    pub reduction: String,
    pub seed: u64,
}

impl SalienceScores {
    pub fn total_len(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn layer(&self, name: &str) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.name == name)
    }

    fn check_finite(&self) -> Result<()> {
        for l in &self.layers {
            if let Some(index) = l.values.iter().position(|v| !v.is_finite()) {
                return Err(SpeftError::NonFiniteScore {
                    layer: l.name.clone(),
                    index,
                });
            }
        }
        Ok(())
    }

    pub fn to_container(&self) -> Container {
        let meta = json!({
            "metric": self.metric,
            "batches_used": self.batches_used,
            "reduction": self.reduction,
            "seed": self.seed,
        });
        let mut c = Container::new(SCORES_FORMAT, meta);
        for l in &self.layers {
            c.push(Entry::float(l.name.clone(), l.shape.clone(), l.values.clone(), DType::F64));
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Meta {
            metric: Metric,
            batches_used: usize,
            reduction: String,
            seed: u64,
        }
        if c.format != SCORES_FORMAT {
            return Err(SpeftError::format(origin, format!("not a scores file: `{}`", c.format)));
        }
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| SpeftError::format(origin, format!("scores metadata: {e}")))?;
        let layers = c
            .entries
            .iter()
            .map(|e| {
                let values = e
                    .floats()
                    .ok_or_else(|| SpeftError::format(origin, format!("`{}` is not a float tensor", e.name)))?;
                Ok(LayerScores {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    values: values.to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        let s = SalienceScores {
            metric: meta.metric,
            layers,
            batches_used: meta.batches_used,
            reduction: meta.reduction,
            seed: meta.seed,
        };
        s.check_finite()?;
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        SalienceScores::from_container(&Container::load(path)?, path)
    }
}

/// Loss of the adaptable weights on estimation batches.
pub trait Objective {
    fn num_batches(&self) -> usize;

    /// Examples in batch `b`; used by per-sample Fisher.
    fn batch_len(&self, b: usize) -> usize;

    /// Mean loss on batch `b`, or on its `sample`-th example alone.
    fn loss(&self, g: &mut Graph, theta: &[Var], b: usize, sample: Option<usize>) -> Result<Var>;
}

/// A model with every non-adaptable parameter held constant.
pub struct ModelObjective<'a> {
    model: &'a Model,
    params: &'a ParamSet,
    adapt: &'a [usize],
    dataset: &'a Dataset,
    indices: &'a [Vec<usize>],
    batches: Vec<Batch>,
}

impl<'a> ModelObjective<'a> {
    pub fn new(
        model: &'a Model,
        params: &'a ParamSet,
        adapt: &'a [usize],
        dataset: &'a Dataset,
        indices: &'a [Vec<usize>],
    ) -> Result<Self> {
        let batches = indices.iter().map(|b| dataset.make_batch(b)).collect::<Result<_>>()?;
        Ok(ModelObjective {
            model,
            params,
            adapt,
            dataset,
            indices,
            batches,
        })
    }

    fn weights(&self, g: &mut Graph, theta: &[Var]) -> Vec<Var> {
        let mut w = self.params.bind_constants(g);
        for (slot, v) in self.adapt.iter().zip(theta) {
            w[*slot] = *v;
        }
        w
    }
}

impl Objective for ModelObjective<'_> {
    fn num_batches(&self) -> usize {
        self.batches.len()
    }

    fn batch_len(&self, b: usize) -> usize {
        self.indices[b].len()
    }

    fn loss(&self, g: &mut Graph, theta: &[Var], b: usize, sample: Option<usize>) -> Result<Var> {
        let w = self.weights(g, theta);
        match sample {
            None => self.model.forward(g, &w, &self.batches[b]),
            Some(s) => {
                let single = self.dataset.make_batch(&[self.indices[b][s]])?;
                self.model.forward(g, &w, &single)
            }
        }
    }
}

/// Objective from a closure `(graph, θ, batch) → loss`; samples are not
/// distinguished.
pub struct FnObjective<F> {
    batches: usize,
    f: F,
}

impl<F> FnObjective<F>
where
    F: Fn(&mut Graph, &[Var], usize) -> Result<Var>,
{
    pub fn new(batches: usize, f: F) -> Self {
        FnObjective { batches, f }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: Fn(&mut Graph, &[Var], usize) -> Result<Var>,
{
    fn num_batches(&self) -> usize {
        self.batches
    }

    fn batch_len(&self, _b: usize) -> usize {
        1
    }

    fn loss(&self, g: &mut Graph, theta: &[Var], b: usize, _sample: Option<usize>) -> Result<Var> {
        (self.f)(g, theta, b)
    }
}

/// Draws the estimation batches from a sampler.
pub fn estimation_batches(sampler: &mut BatchSampler, cfg: &SalienceConfig) -> Vec<Vec<usize>> {
    if !cfg.metric.needs_data() {
        return Vec::new();
    }
    (0..cfg.batches).map(|_| sampler.next_batch(cfg.batch_size)).collect()
}

fn batch_gradient(obj: &dyn Objective, theta: &[Tensor], b: usize, sample: Option<usize>) -> Result<Vec<Tensor>> {
    gradient_of(|g, vars| obj.loss(g, vars, b, sample), theta)
}

fn zeros_like(theta: &[Tensor]) -> Vec<Tensor> {
    theta.iter().map(|t| Tensor::zeros(t.shape())).collect()
}

fn accumulate(acc: &mut [Tensor], add: &[Tensor]) {
    for (a, x) in acc.iter_mut().zip(add) {
        for (dst, src) in a.data_mut().iter_mut().zip(x.data()) {
            *dst += src;
        }
    }
}

fn combine(theta: &[Tensor], grads: &[Tensor], f: impl Fn(f64, f64) -> f64) -> Vec<Tensor> {
    theta
        .iter()
        .zip(grads)
        .map(|(t, g)| {
            let data = t.data().iter().zip(g.data()).map(|(w, d)| f(*w, *d)).collect();
            Tensor::new(t.shape().to_vec(), data).expect("aligned shapes")
        })
        .collect()
}

fn mean_gradient(obj: &dyn Objective, theta: &[Tensor]) -> Result<Vec<Tensor>> {
    let n = obj.num_batches();
    let mut acc = zeros_like(theta);
    for b in 0..n {
        accumulate(&mut acc, &batch_gradient(obj, theta, b, None)?);
    }
    Ok(acc.into_iter().map(|t| t.scale(1.0 / n as f64)).collect())
}

/// Mean over batches of `f(θ, g_b)`.
fn mean_transformed(obj: &dyn Objective, theta: &[Tensor], f: impl Fn(f64, f64) -> f64 + Copy) -> Result<Vec<Tensor>> {
    let n = obj.num_batches();
    let mut acc = zeros_like(theta);
    for b in 0..n {
        let g = batch_gradient(obj, theta, b, None)?;
        accumulate(&mut acc, &combine(theta, &g, f));
    }
    Ok(acc.into_iter().map(|t| t.scale(1.0 / n as f64)).collect())
}

fn mean_loss(obj: &dyn Objective, g: &mut Graph, vars: &[Var]) -> Result<Var> {
    let n = obj.num_batches();
    let mut total = obj.loss(g, vars, 0, None)?;
    for b in 1..n {
        let l = obj.loss(g, vars, b, None)?;
        total = g.add(total, l)?;
    }
    g.scale(total, 1.0 / n as f64)
}

/// Magnitude scores `|θ|`.
pub fn magnitude_values(theta: &[Tensor]) -> Vec<Tensor> {
    theta.iter().map(|t| t.map(f64::abs)).collect()
}

/// SynFlow scores for every tensor in `weights`: `(∂R/∂θ) ⊙ θ` with
/// `R = 1ᵀ (Π |θ⁽ˡ⁾|) 1` along the chain. Weights not on the chain score zero.
pub fn synflow_chain(input_width: usize, links: &[ChainLink], weights: &[Tensor]) -> Result<Vec<Tensor>> {
    if links.is_empty() {
        return Err(SpeftError::NoLinearChain);
    }
    let mut g = Graph::new();
    let mut leaves: Vec<Option<Var>> = vec![None; weights.len()];
    let mut leaf = |g: &mut Graph, i: usize| -> Result<Var> {
        let t = weights.get(i).ok_or(SpeftError::NoLinearChain)?;
        let v = *leaves[i].get_or_insert_with(|| g.param(t.clone()));
        g.abs(v)
    };
    let mut h = g.constant(Tensor::ones(&[1, input_width]));
    for link in links {
        h = match link {
            ChainLink::Single(i) => {
                let w = leaf(&mut g, *i)?;
                g.matmul(h, w)?
            }
            ChainLink::Parallel(ids) => {
                let mut acc: Option<Var> = None;
                for i in ids {
                    let w = leaf(&mut g, *i)?;
                    let y = g.matmul(h, w)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, y)?,
                        None => y,
                    });
                }
                acc.ok_or(SpeftError::NoLinearChain)?
            }
        };
    }
    let r = g.sum(h)?;
    g.backward_retain(r)?;
    weights
        .iter()
        .zip(&leaves)
        .map(|(t, leaf)| match leaf {
            Some(v) => t.zip_map(&g.grad_or_zeros(*v), |w, d| w * d),
            None => Ok(Tensor::zeros(t.shape())),
        })
        .collect()
}

fn uniform_values(theta: &[Tensor], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5A11));
    theta
        .iter()
        .map(|t| {
            let data = (0..t.numel()).map(|_| rng.random::<f64>()).collect();
            Tensor::new(t.shape().to_vec(), data).expect("shape from tensor")
        })
        .collect()
}

/// Scores for named weights under `cfg`. Data-aware metrics need `obj`;
/// SynFlow needs a chain and goes through [`synflow_chain`] or
/// [`model_salience`] instead.
pub fn score_weights(
    cfg: &SalienceConfig,
    names: &[String],
    theta: &[Tensor],
    obj: Option<&dyn Objective>,
) -> Result<SalienceScores> {
    cfg.validate()?;
    if names.len() != theta.len() {
        return Err(SpeftError::MismatchedLayers(format!(
            "{} names for {} tensors",
            names.len(),
            theta.len()
        )));
    }
    let data = match obj {
        Some(o) if o.num_batches() > 0 => Some(o),
        _ => None,
    };
    let need = || data.ok_or_else(|| SpeftError::DataRequired(cfg.metric.name().into()));
    let (values, batches_used) = match cfg.metric {
        Metric::Magnitude => (magnitude_values(theta), 0),
        Metric::Random => (uniform_values(theta, cfg.seed), 0),
        Metric::Synflow => return Err(SpeftError::NoLinearChain),
        Metric::Gradient => {
            let o = need()?;
            let gbar = mean_gradient(o, theta)?;
            let v = match cfg.gradient_mode {
                GradientMode::Abs => gbar.iter().map(|t| t.map(f64::abs)).collect(),
                GradientMode::Raw => gbar,
            };
            (v, o.num_batches())
        }
        Metric::Snip | Metric::Force | Metric::TaylorFo => {
            let o = need()?;
            let f: fn(f64, f64) -> f64 = match cfg.metric {
                Metric::Snip => |w, g| (g * w).abs(),
                Metric::Force => |w, g| -(g * w),
                _ => |w, g| (g * w) * (g * w),
            };
            let v = match cfg.reduction {
                Reduction::AverageFirst => combine(theta, &mean_gradient(o, theta)?, f),
                Reduction::TransformThenAverage => mean_transformed(o, theta, f)?,
            };
            (v, o.num_batches())
        }
        Metric::Fisher => {
            let o = need()?;
            let v = match cfg.fisher_mode {
                FisherMode::PerBatch => mean_transformed(o, theta, |_, g| g * g)?,
                FisherMode::PerSample => {
                    let mut acc = zeros_like(theta);
                    let mut count = 0usize;
                    for b in 0..o.num_batches() {
                        for s in 0..o.batch_len(b) {
                            let g = batch_gradient(o, theta, b, Some(s))?;
                            accumulate(&mut acc, &combine(theta, &g, |_, d| d * d));
                            count += 1;
                        }
                    }
                    acc.into_iter().map(|t| t.scale(1.0 / count as f64)).collect()
                }
            };
            (v, o.num_batches())
        }
        Metric::Grasp => {
            let o = need()?;
            let gbar = mean_gradient(o, theta)?;
            let hg = match cfg.hvp {
                HvpMode::FiniteDifference => hvp_with(|t| mean_gradient(o, t), theta, &gbar)?,
                HvpMode::Exact => hessian_vector_product_exact(|g, vars| mean_loss(o, g, vars), theta, &gbar)?,
            };
            (combine(theta, &hg, |w, h| -(h * w)), o.num_batches())
        }
    };
    finish(cfg, names, values, batches_used)
}

fn finish(cfg: &SalienceConfig, names: &[String], values: Vec<Tensor>, batches_used: usize) -> Result<SalienceScores> {
    let scores = SalienceScores {
        metric: cfg.metric,
        layers: names
            .iter()
            .zip(values)
            .map(|(name, t)| LayerScores {
                name: name.clone(),
                shape: t.shape().to_vec(),
                values: t.into_data(),
            })
            .collect(),
        batches_used,
        reduction: cfg.reduction_label().into(),
        seed: cfg.seed,
    };
    scores.check_finite()?;
    Ok(scores)
}

/// Scores the adaptable weights `adapt` (ParamSet indices) of a model.
/// `data` carries the dataset and the estimation batches drawn for it.
pub fn model_salience(
    model: &Model,
    params: &ParamSet,
    adapt: &[usize],
    cfg: &SalienceConfig,
    data: Option<(&Dataset, &[Vec<usize>])>,
) -> Result<SalienceScores> {
    let names: Vec<String> = adapt.iter().map(|i| params.param(*i).name.clone()).collect();
    let theta: Vec<Tensor> = adapt.iter().map(|i| params.value(*i).clone()).collect();
    if cfg.metric == Metric::Synflow {
        let chain = model.linear_chain(params)?;
        let all: Vec<Tensor> = params.iter().map(|p| p.value.clone()).collect();
        let on_chain: Vec<usize> = chain
            .links
            .iter()
            .flat_map(|l| match l {
                ChainLink::Single(i) => vec![*i],
                ChainLink::Parallel(v) => v.clone(),
            })
            .collect();
        if let Some(missing) = adapt.iter().find(|i| !on_chain.contains(i)) {
            return Err(SpeftError::MismatchedLayers(format!(
                "`{}` is not on the linear chain",
                params.param(*missing).name
            )));
        }
        let scores = synflow_chain(chain.input_width, &chain.links, &all)?;
        let values = adapt.iter().map(|i| scores[*i].clone()).collect();
        return finish(cfg, &names, values, 0);
    }
    match data {
        Some((dataset, batches)) if cfg.metric.needs_data() && !batches.is_empty() => {
            let obj = ModelObjective::new(model, params, adapt, dataset, batches)?;
            score_weights(cfg, &names, &theta, Some(&obj))
        }
        _ => score_weights(cfg, &names, &theta, None),
    }
}
