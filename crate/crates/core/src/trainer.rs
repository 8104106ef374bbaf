//! Training loops: sparse fine-tuning with mask refresh, plus low-rank and
//! full fine-tuning baselines sharing the same batch order and optimizer.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adapter::{attach, storage_report, OptimizerConfig, OptimizerState, ParamGroup, SparseDelta, StorageReport};
use crate::autodiff::{Graph, Var};
use crate::data::{mix_seed, BatchSampler, Dataset};
use crate::error::{Result, SpeftError};
use crate::masking::{budget, build_mask, mask_diff, MaskSchedule, Scope, SparsityMask};
use crate::model::{apply_low_rank_adapter, AdaptFilter, Batch, LowRankAdapter, Model, ParamSet, Targets, DEFAULT_LORA_ALPHA, DEFAULT_LORA_RANK};
use crate::salience::{estimation_batches, model_salience, Metric, SalienceConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Speft,
    LowRank,
    FullFt,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Speft => "speft",
            Method::LowRank => "low_rank",
            Method::FullFt => "full_ft",
        })
    }
}

impl FromStr for Method {
    type Err = SpeftError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "speft" | "sparse" => Ok(Method::Speft),
            "low_rank" | "lora" => Ok(Method::LowRank),
            "full_ft" | "full" => Ok(Method::FullFt),
            other => Err(SpeftError::InvalidConfig(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    #[default]
    Linear,
}

impl LrSchedule {
    /// Learning rate at step `t` of `total` (1-based); linear decays to
    /// `lr / total` at the last step.
    pub fn lr(self, base: f64, t: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Linear => base * (1.0 - (t - 1) as f64 / total as f64),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    /// Salience metric and estimation settings (sparse method only).
    pub salience: SalienceConfig,
    pub scope: Scope,
    pub density: Option<f64>,
    /// Mask refresh interval; `<= 0` is static.
    pub interval: i64,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    pub eval_batch_size: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Name patterns selecting adapted matrices; empty selects all.
    pub filter: Vec<String>,
    /// Compare probe losses across every merge.
    pub check_merge: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Speft,
            salience: SalienceConfig::default(),
            scope: Scope::Global,
            density: None,
            interval: -1,
            steps: 1000,
            batch_size: 16,
            optimizer: OptimizerConfig::default(),
            schedule: LrSchedule::Linear,
            seed: 0,
            eval_every: 0,
            eval_batch_size: 256,
            rank: DEFAULT_LORA_RANK,
            alpha: DEFAULT_LORA_ALPHA,
            filter: Vec::new(),
            check_merge: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SpeftError::InvalidConfig(m));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return bad(format!("learning rate {} must be > 0", self.optimizer.lr));
        }
        match (self.method, self.density) {
            (Method::Speft, None) => return bad("density is required for the sparse method".into()),
            (Method::Speft, Some(rho)) if !(rho > 0.0 && rho <= 1.0) => return Err(SpeftError::InvalidDensity(rho)),
            (Method::LowRank | Method::FullFt, Some(_)) => {
                return bad(format!("density only applies to the sparse method, not {}", self.method))
            }
            _ => {}
        }
        if self.method == Method::LowRank && self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.method == Method::Speft {
            self.salience.validate()?;
        }
        Ok(())
    }

    pub fn schedule_of_masks(&self) -> MaskSchedule {
        MaskSchedule::every(self.interval)
    }

    pub fn adapt_filter(&self) -> Result<AdaptFilter> {
        AdaptFilter::new(&self.filter)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perplexity: Option<f64>,
    pub examples: usize,
}

/// Loss (mean over examples), accuracy for classifiers and perplexity for
/// language models over `indices`.
pub fn evaluate(model: &Model, params: &ParamSet, dataset: &Dataset, indices: &[usize], batch_size: usize) -> Result<EvalMetrics> {
    if indices.is_empty() {
        return Err(SpeftError::Data("evaluation set is empty".into()));
    }
    let mut loss_sum = 0.0;
    let mut weight = 0.0;
    let (mut correct, mut counted) = (0usize, 0usize);
    let mut classify = false;
    let mut lm = false;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = dataset.make_batch(chunk)?;
        let mut g = Graph::new();
        let w = params.bind_constants(&mut g);
        let (out, loss) = model.forward_with_output(&mut g, &w, &batch)?;
        let units = match &batch.targets {
            Targets::Regression(_) => chunk.len(),
            Targets::Classes(_) => chunk.len(),
            Targets::NextTokens(t) => t.len(),
        };
        loss_sum += g.value(loss).item() * units as f64;
        weight += units as f64;
        let labels = match &batch.targets {
            Targets::Classes(c) => {
                classify = true;
                Some(c)
            }
            Targets::NextTokens(t) => {
                lm = true;
                Some(t)
            }
            Targets::Regression(_) => None,
        };
        if let Some(labels) = labels {
            let logits = g.value(out);
            let width = *logits.shape().last().expect("logits have a class axis");
            for (row, label) in logits.data().chunks(width).zip(labels) {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, v)| if *v > best.1 { (i, *v) } else { best })
                    .0;
                correct += (arg == *label) as usize;
                counted += 1;
            }
        }
    }
    let loss = loss_sum / weight;
    Ok(EvalMetrics {
        loss,
        accuracy: (classify || lm).then(|| correct as f64 / counted as f64),
        perplexity: lm.then(|| loss.exp()),
        examples: indices.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step {
        step: u64,
        loss: f64,
        lr: f64,
    },
    Refresh {
        step: u64,
        nnz: usize,
        /// Fraction of the previous mask kept; absent on the first build.
        #[serde(skip_serializing_if = "Option::is_none")]
        overlap: Option<f64>,
        /// Probe loss bit-identical across the merge; absent when unchecked.
        #[serde(skip_serializing_if = "Option::is_none")]
        merge_transparent: Option<bool>,
        warnings: Vec<String>,
    },
    Eval {
        step: u64,
        #[serde(flatten)]
        metrics: EvalMetrics,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimes {
    pub salience_secs: f64,
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub trainable: usize,
    pub times: PhaseTimes,
}

impl RunLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn refresh_steps(&self) -> Vec<u64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Refresh { step, .. } => Some(*step),
                _ => None,
            })
            .collect()
    }

    pub fn final_eval(&self) -> Option<(u64, &EvalMetrics)> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Eval { step, metrics } => Some((*step, metrics)),
            _ => None,
        })
    }

    /// One JSON object per record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| SpeftError::io(dir, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| SpeftError::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("records serialize");
            writeln!(out, "{line}").map_err(|e| SpeftError::io(path, e))?;
        }
        out.flush().map_err(|e| SpeftError::io(path, e))
    }

    pub fn read_jsonl(path: &Path) -> Result<Vec<LogRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| SpeftError::io(path, e))?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| SpeftError::Parse {
                    path: path.to_path_buf(),
                    line: i as u64 + 1,
                    msg: e.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TraceEvent {
    Init,
    Refresh(u64),
    Sample(u64),
    Forward(u64),
    Step(u64),
}

/// Read-only view of the training state handed to observers.
pub struct StateView<'a> {
    pub base: &'a ParamSet,
    pub delta: Option<&'a SparseDelta>,
    pub mask: Option<&'a SparsityMask>,
    pub optimizer: &'a OptimizerState,
}

pub trait Observer {
    fn on_event(&mut self, event: TraceEvent, state: &StateView<'_>);
}

pub struct NoObserver;

impl Observer for NoObserver {
    fn on_event(&mut self, _event: TraceEvent, _state: &StateView<'_>) {}
}

#[derive(Default)]
pub struct TraceRecorder {
    pub events: Vec<TraceEvent>,
}

impl Observer for TraceRecorder {
    fn on_event(&mut self, event: TraceEvent, _state: &StateView<'_>) {
        self.events.push(event);
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub log: RunLog,
    /// Final weights with the adapter folded in.
    pub params: ParamSet,
    /// Working base θ (sparse method: includes merged deltas of earlier refreshes).
    pub base: ParamSet,
    pub delta: Option<SparseDelta>,
    pub mask: Option<SparsityMask>,
    pub low_rank: Option<LowRankAdapter>,
}

/// Trainable state for the three methods.
enum Trainable {
    Sparse { delta: Option<SparseDelta>, mask: Option<SparsityMask> },
    LowRank(LowRankAdapter),
    Full { slots: Vec<usize>, values: Vec<Tensor> },
}

impl Trainable {
    fn sizes(&self) -> Vec<usize> {
        match self {
            Trainable::Sparse { delta, .. } => delta
                .as_ref()
                .map(|d| d.layers.iter().map(|l| l.values.len()).collect())
                .unwrap_or_default(),
            Trainable::LowRank(a) => a.layers.iter().flat_map(|l| [l.b.numel(), l.a.numel()]).collect(),
            Trainable::Full { values, .. } => values.iter().map(Tensor::numel).collect(),
        }
    }

    fn trainable_count(&self) -> usize {
        self.sizes().iter().sum()
    }

    /// Weights for the forward pass and the leaves whose gradients drive the update.
    fn bind(&self, g: &mut Graph, base: &ParamSet) -> Result<(Vec<Var>, Vec<Var>)> {
        match self {
            Trainable::Sparse { delta, .. } => {
                let d = delta.as_ref().expect("mask built at step 1");
                let b = d.bind(g, base);
                Ok((b.weights, b.leaves))
            }
            Trainable::LowRank(a) => {
                let b = a.bind(g, base)?;
                let leaves = b.leaves.iter().flat_map(|(x, y)| [*x, *y]).collect();
                Ok((b.weights, leaves))
            }
            Trainable::Full { slots, values } => {
                let mut w = base.bind_constants(g);
                let leaves: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
                for (s, l) in slots.iter().zip(&leaves) {
                    w[*s] = *l;
                }
                Ok((w, leaves))
            }
        }
    }

    fn apply(&mut self, grads: Vec<Tensor>, opt: &mut OptimizerState, lr: f64) -> Result<()> {
        match self {
            Trainable::Sparse { delta, .. } => {
                let d = delta.as_mut().expect("mask built at step 1");
                let sparse = d.masked_gradient(&grads)?;
                opt.step(&mut d.groups_mut(&sparse), lr)
            }
            Trainable::LowRank(a) => {
                let names: Vec<String> = a
                    .layers
                    .iter()
                    .flat_map(|l| [format!("{}.lora_b", l.name), format!("{}.lora_a", l.name)])
                    .collect();
                let mut groups: Vec<ParamGroup<'_>> = a
                    .values_mut()
                    .into_iter()
                    .zip(&grads)
                    .zip(&names)
                    .map(|((values, g), name)| ParamGroup {
                        name,
                        values,
                        grad: g.data(),
                    })
                    .collect();
                opt.step(&mut groups, lr)
            }
            Trainable::Full { values, .. } => {
                let names: Vec<String> = (0..values.len()).map(|i| format!("group{i}")).collect();
                let mut groups: Vec<ParamGroup<'_>> = values
                    .iter_mut()
                    .zip(&grads)
                    .zip(&names)
                    .map(|((v, g), name)| ParamGroup {
                        name,
                        values: v.data_mut(),
                        grad: g.data(),
                    })
                    .collect();
                opt.step(&mut groups, lr)
            }
        }
    }

    fn effective(&self, base: &ParamSet) -> Result<ParamSet> {
        match self {
            Trainable::Sparse { delta, .. } => Ok(delta.as_ref().map_or_else(|| base.clone(), |d| d.materialize(base))),
            Trainable::LowRank(a) => a.merged(base),
            Trainable::Full { slots, values } => {
                let mut out = base.clone();
                for (s, v) in slots.iter().zip(values) {
                    *out.value_mut(*s) = v.clone();
                }
                Ok(out)
            }
        }
    }
}

fn divergence(step: u64, err: SpeftError) -> SpeftError {
    match err {
        SpeftError::NonFinite { .. } => SpeftError::Divergence { step, loss: f64::NAN },
        other => other,
    }
}

/// Trains according to `cfg.method`.
pub fn train(cfg: &TrainConfig, model: &Model, params: &ParamSet, dataset: &Dataset, observer: &mut dyn Observer) -> Result<RunOutcome> {
    match cfg.method {
        Method::Speft => run_speft(cfg, model, params, dataset, observer),
        Method::LowRank | Method::FullFt => run_baseline(cfg, model, params, dataset, observer),
    }
}

/// Sparse fine-tuning: refresh (merge → salience → mask → attach → reset
/// optimizer) at step 1 and every `interval` steps, then masked updates.
pub fn run_speft(cfg: &TrainConfig, model: &Model, params: &ParamSet, dataset: &Dataset, observer: &mut dyn Observer) -> Result<RunOutcome> {
    if cfg.method != Method::Speft {
        return Err(SpeftError::InvalidConfig(format!("run_speft called with method {}", cfg.method)));
    }
    run_loop(cfg, model, params, dataset, observer)
}

/// Low-rank or full fine-tuning on the same loop skeleton and batch order.
pub fn run_baseline(cfg: &TrainConfig, model: &Model, params: &ParamSet, dataset: &Dataset, observer: &mut dyn Observer) -> Result<RunOutcome> {
    if cfg.method == Method::Speft {
        return Err(SpeftError::InvalidConfig("run_baseline needs low_rank or full_ft".into()));
    }
    run_loop(cfg, model, params, dataset, observer)
}

fn run_loop(cfg: &TrainConfig, model: &Model, params: &ParamSet, dataset: &Dataset, observer: &mut dyn Observer) -> Result<RunOutcome> {
    cfg.validate()?;
    if dataset.train.len() < cfg.batch_size {
        return Err(SpeftError::Data(format!(
            "train split has {} examples, fewer than batch size {}",
            dataset.train.len(),
            cfg.batch_size
        )));
    }
    let filter = cfg.adapt_filter()?;
    let adapt = params.adaptable(&filter);
    if adapt.is_empty() {
        return Err(SpeftError::InvalidConfig("no adaptable matrices match the filter".into()));
    }
    let mut base = params.clone();
    let mut trainable = match cfg.method {
        Method::Speft => Trainable::Sparse { delta: None, mask: None },
        Method::LowRank => Trainable::LowRank(apply_low_rank_adapter(
            params,
            &filter,
            cfg.rank,
            cfg.alpha,
            mix_seed(cfg.seed, 0x10A),
        )?),
        Method::FullFt => Trainable::Full {
            slots: adapt.clone(),
            values: adapt.iter().map(|i| params.value(*i).clone()).collect(),
        },
    };
    let mut opt = OptimizerState::new(cfg.optimizer, &trainable.sizes());
    let mut train_sampler = BatchSampler::new(dataset.train.clone(), cfg.seed)?;
    let mut est_sampler = train_sampler.fork(1);
    let probe = dataset.make_batch(&dataset.train[..cfg.batch_size.min(dataset.train.len())])?;
    let schedule = cfg.schedule_of_masks();
    let mut salience_cfg = cfg.salience.clone();
    salience_cfg.seed = mix_seed(cfg.seed, salience_cfg.seed);
    let mut log = RunLog::default();
    let mut times = PhaseTimes::default();

    notify(observer, TraceEvent::Init, &base, &trainable, &opt);

    for t in 1..=cfg.steps {
        if let Trainable::Sparse { delta, mask } = &mut trainable {
            if schedule.should_refresh(t) {
                let started = Instant::now();
                let rho = cfg.density.expect("validated");
                let mut merge_transparent = None;
                if let Some(d) = delta.as_mut() {
                    let before = cfg.check_merge.then(|| probe_loss(model, &d.materialize(&base), &probe)).transpose()?;
                    d.merge_and_reset(&mut base);
                    if let Some(before) = before {
                        let after = probe_loss(model, &d.materialize(&base), &probe)?;
                        merge_transparent = Some(before.to_bits() == after.to_bits());
                    }
                }
                let batches = estimation_batches(&mut est_sampler, &salience_cfg);
                let scores = model_salience(model, &base, &adapt, &salience_cfg, Some((dataset, &batches)))?;
                let mut new_mask = build_mask(&scores, rho, cfg.scope)?;
                new_mask.step = t;
                let overlap = mask.as_ref().map(|m| mask_diff(m, &new_mask)).transpose()?.map(|d| d.overlap);
                *delta = Some(attach(&new_mask, &base)?);
                log.records.push(LogRecord::Refresh {
                    step: t,
                    nnz: new_mask.nnz(),
                    overlap,
                    merge_transparent,
                    warnings: new_mask.warnings.clone(),
                });
                *mask = Some(new_mask);
                opt.reinitialize(&trainable.sizes());
                times.salience_secs += started.elapsed().as_secs_f64();
                notify(observer, TraceEvent::Refresh(t), &base, &trainable, &opt);
            }
        }
        let started = Instant::now();
        let indices = train_sampler.next_batch(cfg.batch_size);
        notify(observer, TraceEvent::Sample(t), &base, &trainable, &opt);
        let batch = dataset.make_batch(&indices)?;
        let mut g = Graph::new();
        let (weights, leaves) = trainable.bind(&mut g, &base)?;
        let loss = model.forward(&mut g, &weights, &batch).map_err(|e| divergence(t, e))?;
        let loss_value = g.value(loss).item();
        if !loss_value.is_finite() {
            return Err(SpeftError::Divergence { step: t, loss: loss_value });
        }
        notify(observer, TraceEvent::Forward(t), &base, &trainable, &opt);
        g.backward(loss).map_err(|e| divergence(t, e))?;
        let grads: Vec<Tensor> = leaves.iter().map(|v| g.grad_or_zeros(*v)).collect();
        let lr = cfg.schedule.lr(cfg.optimizer.lr, t, cfg.steps);
        trainable.apply(grads, &mut opt, lr)?;
        log.records.push(LogRecord::Step { step: t, loss: loss_value, lr });
        times.train_secs += started.elapsed().as_secs_f64();
        notify(observer, TraceEvent::Step(t), &base, &trainable, &opt);

        let last = t == cfg.steps;
        if !dataset.eval.is_empty() && (last || (cfg.eval_every > 0 && t % cfg.eval_every == 0)) {
            let started = Instant::now();
            let metrics = evaluate(model, &trainable.effective(&base)?, dataset, &dataset.eval, cfg.eval_batch_size)?;
            log.records.push(LogRecord::Eval { step: t, metrics });
            times.eval_secs += started.elapsed().as_secs_f64();
        }
    }
    log.trainable = trainable.trainable_count();
    log.times = times;
    let final_params = trainable.effective(&base)?;
    let (delta, mask, low_rank) = match trainable {
        Trainable::Sparse { delta, mask } => (delta, mask, None),
        Trainable::LowRank(a) => (None, None, Some(a)),
        Trainable::Full { .. } => (None, None, None),
    };
    Ok(RunOutcome {
        log,
        params: final_params,
        base,
        delta,
        mask,
        low_rank,
    })
}

fn notify(observer: &mut dyn Observer, event: TraceEvent, base: &ParamSet, t: &Trainable, opt: &OptimizerState) {
    let (delta, mask) = match t {
        Trainable::Sparse { delta, mask } => (delta.as_ref(), mask.as_ref()),
        _ => (None, None),
    };
    observer.on_event(
        event,
        &StateView {
            base,
            delta,
            mask,
            optimizer: opt,
        },
    );
}

fn probe_loss(model: &Model, params: &ParamSet, probe: &Batch) -> Result<f64> {
    model.loss(params, probe)
}

/// Sparse density matched to a low-rank adapter's trainable count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityPlan {
    pub rank: usize,
    pub low_rank_count: usize,
    pub density: f64,
    pub sparse_count: usize,
    pub adaptable: usize,
}

impl ParityPlan {
    pub fn gap(&self) -> usize {
        self.sparse_count.abs_diff(self.low_rank_count)
    }
}

/// Chooses ρ so the sparse trainable count matches rank-`r` adapters on the
/// same matrices. Global scope hits the count exactly.
pub fn parity_density(params: &ParamSet, filter: &AdaptFilter, rank: usize, scope: Scope) -> Result<ParityPlan> {
    let adapt = params.adaptable(filter);
    let sizes: Vec<(usize, usize)> = adapt
        .iter()
        .map(|i| {
            let s = params.value(*i).shape();
            (s[0], s[1])
        })
        .collect();
    if rank == 0 || sizes.iter().any(|(a, b)| rank > *a.min(b)) {
        return Err(SpeftError::InvalidConfig(format!("rank {rank} does not fit every adapted matrix")));
    }
    let target: usize = sizes.iter().map(|(a, b)| rank * (a + b)).sum();
    let n: usize = sizes.iter().map(|(a, b)| a * b).sum();
    if target >= n {
        return Err(SpeftError::InvalidConfig(format!(
            "rank {rank} adapters train {target} of {n} parameters; no sparse density below 1 matches"
        )));
    }
    let count = |rho: f64| -> usize {
        match scope {
            Scope::Global => budget(rho, n),
            Scope::Local => sizes.iter().map(|(a, b)| budget(rho, a * b)).sum(),
        }
    };
    let density = match scope {
        Scope::Global => (target as f64 + 0.5) / n as f64,
        Scope::Local => {
            let (mut lo, mut hi) = (0.0f64, 1.0f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if count(mid) >= target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            if count(hi).abs_diff(target) <= count(lo).abs_diff(target) || count(lo) == 0 {
                hi
            } else {
                lo
            }
        }
    };
    Ok(ParityPlan {
        rank,
        low_rank_count: target,
        density,
        sparse_count: count(density),
        adaptable: n,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub metric: Metric,
    pub train_steps: u64,
    pub refreshes: usize,
    pub estimation_batches: usize,
    /// Estimation batches over all refreshes.
    pub estimation_steps: usize,
    /// Gradient evaluations per estimation batch.
    pub gradient_multiplier: f64,
    pub estimation_evaluations: f64,
    /// Estimation evaluations over estimation plus training evaluations.
    pub estimation_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub storage: Option<StorageReport>,
}

/// Salience-estimation cost as a share of total forward+backward passes,
/// and adapter index storage next to the dense model.
pub fn overhead_report(
    metric: Metric,
    train_steps: u64,
    interval: i64,
    estimation_batches: usize,
    storage: Option<(usize, usize, usize)>,
) -> OverheadReport {
    let refreshes = MaskSchedule::every(interval).refresh_steps(train_steps).len();
    let per_refresh = match metric {
        Metric::Synflow => 1.0,
        m => estimation_batches as f64 * m.cost_multiplier(),
    };
    let estimation_evaluations = per_refresh * refreshes as f64;
    let data_batches = if metric.needs_data() { estimation_batches } else { 0 };
    OverheadReport {
        metric,
        train_steps,
        refreshes,
        estimation_batches: data_batches,
        estimation_steps: data_batches * refreshes,
        gradient_multiplier: metric.cost_multiplier(),
        estimation_evaluations,
        estimation_fraction: estimation_evaluations / (estimation_evaluations + train_steps as f64),
        storage: storage.map(|(nnz, dense, bytes)| storage_report(nnz, dense, bytes)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::OptimizerKind;
    use crate::data::{gen_teacher_student, TeacherStudentConfig};
    use crate::model::{build_model, Activation, MlpTask, ModelConfig, TransformerConfig};

    fn setup() -> (Model, ParamSet, Dataset) {
        let cfg = ModelConfig::mlp(&[4, 16, 2], Activation::Tanh, MlpTask::Regression);
        let (model, params) = build_model(&cfg, 0).unwrap();
        let ds = gen_teacher_student(&TeacherStudentConfig {
            widths: vec![4, 8, 2],
            activation: Activation::Tanh,
            teacher_seed: 1,
            noise: 0.0,
            n: 256,
            eval_fraction: 0.25,
            seed: 2,
        })
        .unwrap();
        (model, params, ds)
    }

    fn speft_cfg(steps: u64, interval: i64) -> TrainConfig {
        let mut salience = SalienceConfig::new(Metric::Gradient);
        salience.batches = 2;
        salience.batch_size = 8;
        TrainConfig {
            salience,
            density: Some(0.25),
            interval,
            steps,
            batch_size: 8,
            optimizer: OptimizerConfig {
                lr: 0.01,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn refresh_events_follow_schedule() {
        let (model, params, ds) = setup();
        let out = run_speft(&speft_cfg(25, 10), &model, &params, &ds, &mut NoObserver).unwrap();
        assert_eq!(out.log.refresh_steps(), vec![1, 10, 20]);
        let out = run_speft(&speft_cfg(25, -1), &model, &params, &ds, &mut NoObserver).unwrap();
        assert_eq!(out.log.refresh_steps(), vec![1]);
        assert_eq!(out.log.losses().len(), 25);
    }

    #[test]
    fn trace_matches_control_flow() {
        let (model, params, ds) = setup();
        let mut rec = TraceRecorder::default();
        run_speft(&speft_cfg(4, 2), &model, &params, &ds, &mut rec).unwrap();
        use TraceEvent::*;
        let mut expected = vec![Init];
        for t in 1..=4u64 {
            if t == 1 || t % 2 == 0 {
                expected.push(Refresh(t));
            }
            expected.extend([Sample(t), Forward(t), Step(t)]);
        }
        assert_eq!(rec.events, expected);
    }

    #[test]
    fn full_density_sgd_matches_full_ft_first_step() {
        let (model, params, ds) = setup();
        let sgd = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 0.1,
            ..Default::default()
        };
        let mut sp = speft_cfg(1, -1);
        sp.density = Some(1.0);
        sp.optimizer = sgd;
        let full = TrainConfig {
            method: Method::FullFt,
            density: None,
            ..sp.clone()
        };
        let a = run_speft(&sp, &model, &params, &ds, &mut NoObserver).unwrap();
        let b = run_baseline(&full, &model, &params, &ds, &mut NoObserver).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            for (u, v) in x.value.data().iter().zip(y.value.data()) {
                assert!((u - v).abs() < 1e-15);
            }
        }
        assert_eq!(a.log.losses(), b.log.losses());
    }

    #[test]
    fn runs_are_reproducible_and_share_batch_order() {
        let (model, params, ds) = setup();
        let cfg = speft_cfg(20, 5);
        let a = run_speft(&cfg, &model, &params, &ds, &mut NoObserver).unwrap();
        let b = run_speft(&cfg, &model, &params, &ds, &mut NoObserver).unwrap();
        assert_eq!(a.log.records, b.log.records);
        let lr = TrainConfig {
            method: Method::LowRank,
            density: None,
            rank: 2,
            ..cfg.clone()
        };
        let c = run_baseline(&lr, &model, &params, &ds, &mut NoObserver).unwrap();
        assert_eq!(c.log.trainable, 2 * (4 + 16) + 2 * (16 + 2));
        let full = TrainConfig {
            method: Method::FullFt,
            density: None,
            ..cfg
        };
        let d = run_baseline(&full, &model, &params, &ds, &mut NoObserver).unwrap();
        assert_eq!(d.log.trainable, 4 * 16 + 16 * 2);
    }

    #[test]
    fn merges_are_transparent() {
        let (model, params, ds) = setup();
        let out = run_speft(&speft_cfg(30, 10), &model, &params, &ds, &mut NoObserver).unwrap();
        let flags: Vec<Option<bool>> = out
            .log
            .records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Refresh { merge_transparent, .. } => Some(*merge_transparent),
                _ => None,
            })
            .collect();
        assert_eq!(flags, vec![None, Some(true), Some(true), Some(true)]);
    }

    #[test]
    fn divergence_is_reported() {
        let (model, params, ds) = setup();
        let mut cfg = speft_cfg(50, -1);
        cfg.optimizer = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            lr: 1e200,
            ..Default::default()
        };
        cfg.schedule = LrSchedule::Constant;
        let err = run_speft(&cfg, &model, &params, &ds, &mut NoObserver).unwrap_err();
        assert!(matches!(err, SpeftError::Divergence { .. } | SpeftError::NonFiniteGradient { .. }), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_validation() {
        let mut cfg = speft_cfg(10, -1);
        cfg.density = None;
        assert!(cfg.validate().is_err());
        let mut lr = speft_cfg(10, -1);
        lr.method = Method::LowRank;
        assert!(lr.validate().is_err());
        lr.density = None;
        assert!(lr.validate().is_ok());
        lr.steps = 0;
        assert!(lr.validate().is_err());
    }

    #[test]
    fn evaluation_is_pure_and_uniform_logits_give_log_classes() {
        let (model, params, ds) = setup();
        let a = evaluate(&model, &params, &ds, &ds.eval, 7).unwrap();
        let b = evaluate(&model, &params, &ds, &ds.eval, 7).unwrap();
        assert_eq!(a, b);
        let tc = crate::data::gen_token_classification(6, 4, 40, 3, 0.5, 1).unwrap();
        let mut cfg = TransformerConfig::tiny(6);
        cfg.n_classes = 3;
        let (m, mut p) = build_model(&ModelConfig::TransformerEncoder(cfg), 0).unwrap();
        let head = p.index_of("head.weight").unwrap();
        p.value_mut(head).data_mut().iter_mut().for_each(|v| *v = 0.0);
        let e = evaluate(&m, &p, &tc, &tc.eval, 8).unwrap();
        assert!((e.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn overhead_arithmetic() {
        let r = overhead_report(Metric::Gradient, 24_576, -1, 64, None);
        assert_eq!(r.estimation_steps, 64);
        assert!((r.estimation_fraction - 64.0 / 24_640.0).abs() < 1e-15);
        let g = overhead_report(Metric::Grasp, 24_576, -1, 64, None);
        assert_eq!(g.estimation_evaluations, 128.0);
        let d = overhead_report(Metric::Gradient, 10_000, 1000, 64, None);
        assert_eq!(d.refreshes, 11);
        assert_eq!(d.estimation_steps, 704);
    }

    #[test]
    fn parity_is_exact_for_global_scope() {
        let cfg = ModelConfig::TransformerLm(TransformerConfig {
            d_model: 64,
            d_ff: 128,
            ..TransformerConfig::tiny(32)
        });
        let (_, params) = build_model(&cfg, 0).unwrap();
        let plan = parity_density(&params, &AdaptFilter::all(), 8, Scope::Global).unwrap();
        assert_eq!(plan.gap(), 0);
        let local = parity_density(&params, &AdaptFilter::all(), 8, Scope::Local).unwrap();
        assert!(local.gap() <= 8, "{local:?}");
    }
}
