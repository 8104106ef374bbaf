//! Experiment files, matrix expansion, run directories and reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapter::export_merged;
use crate::data::DatasetSpec;
use crate::error::{Result, SpeftError};
use crate::io::DType;
use crate::model::{build_model, load_checkpoint, Checkpoint, Model, ModelConfig};
use crate::salience::Metric;
use crate::trainer::{train, EvalMetrics, Method, NoObserver, TrainConfig};
use crate::masking::Scope;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(u64),
    List(Vec<u64>),
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Count(1)
    }
}

impl Seeds {
    pub fn values(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

/// Axes of a run matrix; empty axes keep the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Matrix {
    pub method: Vec<Method>,
    pub metric: Vec<Metric>,
    pub scope: Vec<Scope>,
    pub interval: Vec<i64>,
    pub density: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seeds: Seeds,
    /// Model to build when no checkpoint is given.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub model_seed: u64,
    /// Pretrained weights; relative to the spec file.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub matrix: Matrix,
}

/// Reads a TOML (or JSON, when the text starts with `{`) config file.
pub fn read_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| SpeftError::io(path, e))?;
    if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).map_err(|e| SpeftError::InvalidConfig(format!("{}: {e}", path.display())))
    } else {
        toml::from_str(&text).map_err(|e| SpeftError::InvalidConfig(format!("{}: {e}", path.display())))
    }
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentSpec {
    /// Parses TOML, or JSON when the text starts with `{`.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let spec: ExperimentSpec = if text.trim_start().starts_with('{') {
            serde_json::from_str(text).map_err(|e| SpeftError::InvalidConfig(format!("{}: {e}", origin.display())))?
        } else {
            toml::from_str(text).map_err(|e| SpeftError::InvalidConfig(format!("{}: {e}", origin.display())))?
        };
        if spec.model.is_none() && spec.checkpoint.is_none() {
            return Err(SpeftError::InvalidConfig(format!(
                "{}: needs a model or a checkpoint",
                origin.display()
            )));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SpeftError::io(path, e))?;
        ExperimentSpec::parse(&text, path)
    }

    /// Cross product of the matrix axes and seeds, in a fixed order.
    pub fn expand(&self) -> Result<Vec<RunSpec>> {
        fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
            if values.is_empty() {
                vec![base]
            } else {
                values.to_vec()
            }
        }
        let m = &self.matrix;
        let base = &self.train;
        let seeds = self.seeds.values();
        if seeds.is_empty() {
            return Err(SpeftError::InvalidConfig("no seeds".into()));
        }
        let mut runs = Vec::new();
        for method in axis(&m.method, base.method) {
            let sparse = method == Method::Speft;
            let metrics = if sparse { axis(&m.metric, base.salience.metric) } else { vec![base.salience.metric] };
            let scopes = if sparse { axis(&m.scope, base.scope) } else { vec![base.scope] };
            let intervals = if sparse { axis(&m.interval, base.interval) } else { vec![base.interval] };
            let densities: Vec<Option<f64>> = if sparse {
                axis(&m.density.iter().map(|d| Some(*d)).collect::<Vec<_>>(), base.density)
            } else {
                vec![None]
            };
            for metric in &metrics {
                for scope in &scopes {
                    for interval in &intervals {
                        for density in &densities {
                            for seed in &seeds {
                                let mut train = base.clone();
                                train.method = method;
                                train.salience.metric = *metric;
                                train.scope = *scope;
                                train.interval = *interval;
                                train.density = *density;
                                train.seed = *seed;
                                train.validate()?;
                                runs.push(RunSpec::new(self, train)?);
                            }
                        }
                    }
                }
            }
        }
        Ok(runs)
    }
}

/// One fully resolved run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub id: String,
    pub cell: String,
    pub experiment: String,
    pub model: Option<ModelConfig>,
    pub model_seed: u64,
    pub checkpoint: Option<PathBuf>,
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
}

/// Human label for a run's matrix cell, e.g. `speft/gradient/SG/rho=0.01`.
pub fn cell_label(t: &TrainConfig) -> String {
    match t.method {
        Method::Speft => {
            let s = if t.interval <= 0 { 'S' } else { 'D' };
            let g = match t.scope {
                Scope::Global => 'G',
                Scope::Local => 'L',
            };
            let interval = if t.interval > 0 { format!("/I={}", t.interval) } else { String::new() };
            format!("speft/{}/{s}{g}{interval}/rho={}", t.salience.metric, t.density.unwrap_or(0.0))
        }
        Method::LowRank => format!("low_rank/r={}", t.rank),
        Method::FullFt => "full_ft".into(),
    }
}

/// Hex SHA-256 of the canonical JSON (sorted keys, no whitespace) of `value`.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    hex::encode(Sha256::digest(canonical_json(&v).as_bytes()))
}

fn canonical_json(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::Object(map) => {
            let sorted: BTreeMap<&String, String> = map.iter().map(|(k, v)| (k, canonical_json(v))).collect();
            let body: Vec<String> = sorted
                .into_iter()
                .map(|(k, v)| format!("{}:{v}", serde_json::to_string(k).expect("string")))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        serde_json::Value::Array(a) => format!("[{}]", a.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

impl RunSpec {
    fn new(exp: &ExperimentSpec, train: TrainConfig) -> Result<Self> {
        let mut run = RunSpec {
            id: String::new(),
            cell: cell_label(&train),
            experiment: exp.name.clone(),
            model: exp.model.clone(),
            model_seed: exp.model_seed,
            checkpoint: exp.checkpoint.clone(),
            dataset: exp.dataset.clone(),
            train,
        };
        run.id = canonical_hash(&run)[..16].to_string();
        Ok(run)
    }

    fn initial(&self, base_dir: &Path) -> Result<Checkpoint> {
        match (&self.checkpoint, &self.model) {
            (Some(p), _) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                load_checkpoint(&path)
            }
            (None, Some(cfg)) => {
                let (_, params) = build_model(cfg, self.model_seed)?;
                Ok(Checkpoint::new(cfg.clone(), self.model_seed, params))
            }
            (None, None) => Err(SpeftError::InvalidConfig("run needs a model or a checkpoint".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub cell: String,
    pub method: Method,
    pub metric: Option<Metric>,
    pub scope: Option<Scope>,
    pub interval: Option<i64>,
    pub density: Option<f64>,
    pub seed: u64,
    pub trainable: usize,
    pub final_step: u64,
    pub eval: EvalMetrics,
    pub last_train_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run: RunSpec,
    pub files: Vec<String>,
    pub summary: RunSummary,
    pub times: crate::trainer::PhaseTimes,
}

/// Trains one run and writes its directory: manifest, log, merged
/// checkpoint, and the mask and adapter for sparse runs.
pub fn execute_run(run: &RunSpec, base_dir: &Path, out_dir: &Path) -> Result<Manifest> {
    let dir = out_dir.join(&run.id);
    std::fs::create_dir_all(&dir).map_err(|e| SpeftError::io(&dir, e))?;
    let ckpt = run.initial(base_dir)?;
    let dataset = run.dataset.load(base_dir)?;
    let model = Model::new(ckpt.config.clone())?;
    let outcome = train(&run.train, &model, &ckpt.params, &dataset, &mut NoObserver)?;
    let mut files = vec!["log.jsonl".to_string(), "final.ckpt".to_string()];
    outcome.log.write_jsonl(&dir.join("log.jsonl"))?;
    match &outcome.delta {
        Some(delta) => {
            let base = Checkpoint {
                params: outcome.base.clone(),
                ..ckpt.clone()
            };
            export_merged(&dir.join("final.ckpt"), Some(&dir.join("delta.adapter")), &base, delta)?;
            files.push("delta.adapter".into());
            if let Some(mask) = &outcome.mask {
                mask.save(&dir.join("final.mask"))?;
                files.push("final.mask".into());
            }
        }
        None => {
            let merged = Checkpoint {
                params: outcome.params.clone(),
                dtype: DType::F64,
                ..ckpt.clone()
            };
            crate::model::save_checkpoint(&dir.join("final.ckpt"), &merged)?;
        }
    }
    let (final_step, eval) = outcome
        .log
        .final_eval()
        .map(|(s, m)| (s, m.clone()))
        .ok_or_else(|| SpeftError::Data("dataset has no eval split".into()))?;
    let t = &run.train;
    let sparse = t.method == Method::Speft;
    let summary = RunSummary {
        run_id: run.id.clone(),
        cell: run.cell.clone(),
        method: t.method,
        metric: sparse.then_some(t.salience.metric),
        scope: sparse.then_some(t.scope),
        interval: sparse.then_some(t.interval),
        density: t.density,
        seed: t.seed,
        trainable: outcome.log.trainable,
        final_step,
        eval,
        last_train_loss: outcome.log.losses().last().copied().unwrap_or(f64::NAN),
    };
    let manifest = Manifest {
        run: run.clone(),
        files,
        summary,
        times: outcome.log.times.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST);
    std::fs::write(&path, text).map_err(|e| SpeftError::io(&path, e))?;
    Ok(manifest)
}

/// Worker cap from `SPEFT_THREADS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("SPEFT_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every expanded run, one per worker at a time; results keep run order.
pub fn execute_all(runs: &[RunSpec], base_dir: &Path, out_dir: &Path, workers: usize) -> Vec<Result<Manifest>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<Manifest>>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, runs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(run) = runs.get(i) else { break };
                log::info!("run {} ({})", run.id, run.cell);
                let r = execute_run(run, base_dir, out_dir);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    if !dir.is_dir() {
        return Err(SpeftError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found")));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| SpeftError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| SpeftError::format(&path, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cell: String,
    pub runs: usize,
    pub run_ids: Vec<String>,
    pub final_steps: Vec<u64>,
    pub trainable: usize,
    pub eval_loss_mean: f64,
    pub eval_loss_std: f64,
    pub accuracy_mean: Option<f64>,
    pub accuracy_std: Option<f64>,
    /// Mean eval loss minus the first row's.
    pub delta_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub density: f64,
    pub metric: Metric,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// `(ρ, metric, mean eval loss)` for sparse cells, sorted by ρ.
    pub sweep: Vec<SweepPoint>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Groups runs by cell (first-seen order) with mean ± std across seeds.
pub fn build_report(manifests: &[Manifest]) -> Report {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&Manifest>> = BTreeMap::new();
    for m in manifests {
        if !groups.contains_key(&m.summary.cell) {
            order.push(m.summary.cell.clone());
        }
        groups.entry(m.summary.cell.clone()).or_default().push(m);
    }
    let mut rows: Vec<ReportRow> = order
        .iter()
        .map(|cell| {
            let g = &groups[cell];
            let losses: Vec<f64> = g.iter().map(|m| m.summary.eval.loss).collect();
            let (loss_mean, loss_std) = mean_std(&losses);
            let accs: Option<Vec<f64>> = g.iter().map(|m| m.summary.eval.accuracy).collect();
            let acc = accs.map(|a| mean_std(&a));
            ReportRow {
                cell: cell.clone(),
                runs: g.len(),
                run_ids: g.iter().map(|m| m.summary.run_id.clone()).collect(),
                final_steps: g.iter().map(|m| m.summary.final_step).collect(),
                trainable: g[0].summary.trainable,
                eval_loss_mean: loss_mean,
                eval_loss_std: loss_std,
                accuracy_mean: acc.map(|a| a.0),
                accuracy_std: acc.map(|a| a.1),
                delta_loss: 0.0,
            }
        })
        .collect();
    if let Some(first) = rows.first().map(|r| r.eval_loss_mean) {
        for r in &mut rows {
            r.delta_loss = r.eval_loss_mean - first;
        }
    }
    let mut sweep: Vec<SweepPoint> = order
        .iter()
        .filter_map(|cell| {
            let g = &groups[cell];
            let s = &g[0].summary;
            Some(SweepPoint {
                density: s.density?,
                metric: s.metric?,
                score: mean_std(&g.iter().map(|m| m.summary.eval.loss).collect::<Vec<_>>()).0,
            })
        })
        .collect();
    sweep.sort_by(|a, b| a.density.total_cmp(&b.density).then(a.metric.name().cmp(b.metric.name())));
    Report { rows, sweep }
}

impl Report {
    /// Writes `report.csv`, `report.json` and `sweep.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| SpeftError::io(dir, e))?;
        let csv_path = dir.join("report.csv");
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| SpeftError::io(&csv_path, std::io::Error::other(e)))?;
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.6}"));
        let io_err = |e: csv::Error| SpeftError::io(&csv_path, std::io::Error::other(e));
        w.write_record([
            "cell",
            "runs",
            "trainable",
            "eval_loss_mean",
            "eval_loss_std",
            "delta_loss",
            "accuracy_mean",
            "accuracy_std",
            "run_ids",
            "final_steps",
        ])
        .map_err(io_err)?;
        for r in &self.rows {
            w.write_record([
                r.cell.clone(),
                r.runs.to_string(),
                r.trainable.to_string(),
                format!("{:.6}", r.eval_loss_mean),
                format!("{:.6}", r.eval_loss_std),
                format!("{:+.6}", r.delta_loss),
                fmt_opt(r.accuracy_mean),
                fmt_opt(r.accuracy_std),
                r.run_ids.join(" "),
                r.final_steps.iter().map(u64::to_string).collect::<Vec<_>>().join(" "),
            ])
            .map_err(io_err)?;
        }
        w.flush().map_err(|e| SpeftError::io(&csv_path, e))?;

        let sweep_path = dir.join("sweep.csv");
        let mut s = csv::Writer::from_path(&sweep_path).map_err(|e| SpeftError::io(&sweep_path, std::io::Error::other(e)))?;
        let io_err = |e: csv::Error| SpeftError::io(&sweep_path, std::io::Error::other(e));
        s.write_record(["density", "metric", "score"]).map_err(io_err)?;
        for p in &self.sweep {
            s.write_record([p.density.to_string(), p.metric.to_string(), format!("{:.6}", p.score)])
                .map_err(io_err)?;
        }
        s.flush().map_err(|e| SpeftError::io(&sweep_path, e))?;

        let json_path = dir.join("report.json");
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        std::fs::write(&json_path, text).map_err(|e| SpeftError::io(&json_path, e))?;
        Ok(vec![csv_path, json_path, sweep_path])
    }
}
