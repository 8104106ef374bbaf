//! Python bindings: checkpoints, datasets, salience scores, masks, training
//! and the overhead and parity calculators.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyString;
use serde::Serialize;

use speft_core::data::{BatchSampler, DatasetSpec};
use speft_core::error::ErrorClass;
use speft_core::masking::{self, Scope};
use speft_core::model::{build_model, load_checkpoint, save_checkpoint, AdaptFilter, Model, ModelConfig};
use speft_core::salience::{estimation_batches, model_salience, Metric, SalienceConfig, SalienceScores};
use speft_core::trainer::{self, NoObserver, TrainConfig};
use speft_core::SpeftError;

fn py_err(e: SpeftError) -> PyErr {
    let msg = e.to_string();
    match e.class() {
        ErrorClass::Config => PyValueError::new_err(msg),
        ErrorClass::Runtime => PyRuntimeError::new_err(msg),
        ErrorClass::Io => PyIOError::new_err(msg),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for speft_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Accepts a JSON string or any `json.dumps`-able object.
fn json_text(obj: &Bound<'_, PyAny>) -> PyResult<String> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(s.to_str()?.to_owned());
    }
    obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()
}

fn parse<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    serde_json::from_str(&json_text(obj)?).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Model config, weights and seed.
#[pyclass(module = "speft")]
struct Checkpoint {
    inner: speft_core::model::Checkpoint,
}

#[pymethods]
impl Checkpoint {
    /// Initializes a model from a config (dict or JSON string).
    #[staticmethod]
    #[pyo3(signature = (config, seed = 0))]
    fn init(config: &Bound<'_, PyAny>, seed: u64) -> PyResult<Self> {
        let cfg: ModelConfig = parse(config)?;
        let (_, params) = build_model(&cfg, seed).py()?;
        Ok(Checkpoint {
            inner: speft_core::model::Checkpoint::new(cfg, seed, params),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Checkpoint {
            inner: load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner).py()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params.numel()
    }

    #[getter]
    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.params.fingerprint()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }

    /// Flat values of one parameter.
    fn weights(&self, name: &str) -> PyResult<Vec<f64>> {
        self.inner
            .params
            .get(name)
            .map(|p| p.value.data().to_vec())
            .ok_or_else(|| py_err(SpeftError::UnknownLayer(name.into())))
    }

    /// Loss (and accuracy or perplexity where defined) on a split.
    #[pyo3(signature = (dataset, split = "eval", batch_size = 256))]
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &Dataset, split: &str, batch_size: usize) -> PyResult<Bound<'py, PyAny>> {
        let model = Model::new(self.inner.config.clone()).py()?;
        let indices = dataset.split(split)?;
        let m = trainer::evaluate(&model, &self.inner.params, &dataset.inner, indices, batch_size).py()?;
        to_py(py, &m)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint({}, {} params)", self.inner.config.name(), self.inner.params.numel())
    }
}

/// A generated or loaded dataset with its train/eval split.
#[pyclass(module = "speft")]
struct Dataset {
    inner: speft_core::data::Dataset,
}

impl Dataset {
    fn split(&self, split: &str) -> PyResult<&[usize]> {
        match split {
            "eval" => Ok(&self.inner.eval),
            "train" => Ok(&self.inner.train),
            other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
        }
    }
}

#[pymethods]
impl Dataset {
    /// Builds a dataset from a spec (dict or JSON string); relative paths
    /// resolve against `base_dir`.
    #[new]
    #[pyo3(signature = (spec, base_dir = PathBuf::from(".")))]
    fn new(spec: &Bound<'_, PyAny>, base_dir: PathBuf) -> PyResult<Self> {
        let spec: DatasetSpec = parse(spec)?;
        Ok(Dataset {
            inner: spec.load(&base_dir).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn train_size(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn eval_size(&self) -> usize {
        self.inner.eval.len()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }
}

/// Per-layer salience scores.
#[pyclass(module = "speft")]
struct Scores {
    inner: SalienceScores,
}

#[pymethods]
impl Scores {
    #[staticmethod]
    #[pyo3(signature = (checkpoint, metric, dataset = None, batches = 64, batch_size = 16, seed = 0, filter = Vec::new()))]
    fn compute(
        checkpoint: &Checkpoint,
        metric: &str,
        dataset: Option<&Dataset>,
        batches: usize,
        batch_size: usize,
        seed: u64,
        filter: Vec<String>,
    ) -> PyResult<Self> {
        let metric: Metric = metric.parse().py()?;
        let ckpt = &checkpoint.inner;
        let model = Model::new(ckpt.config.clone()).py()?;
        let adapt = ckpt.params.adaptable(&AdaptFilter::new(&filter).py()?);
        let cfg = SalienceConfig {
            metric,
            batches,
            batch_size,
            seed,
            ..Default::default()
        };
        let inner = match dataset {
            Some(ds) if metric.needs_data() => {
                let mut sampler = BatchSampler::new(ds.inner.train.clone(), seed).py()?;
                let b = estimation_batches(&mut sampler, &cfg);
                model_salience(&model, &ckpt.params, &adapt, &cfg, Some((&ds.inner, &b))).py()?
            }
            None if metric.needs_data() => return Err(py_err(SpeftError::DataRequired(metric.name().into()))),
            _ => model_salience(&model, &ckpt.params, &adapt, &cfg, None).py()?,
        };
        Ok(Scores { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Scores {
            inner: SalienceScores::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn metric(&self) -> String {
        self.inner.metric.name().into()
    }

    fn layers(&self) -> BTreeMap<String, Vec<f64>> {
        self.inner.layers.iter().map(|l| (l.name.clone(), l.values.clone())).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.total_len()
    }
}

/// Selected coordinates per layer.
#[pyclass(module = "speft")]
struct Mask {
    inner: masking::SparsityMask,
}

#[pymethods]
impl Mask {
    #[staticmethod]
    #[pyo3(signature = (scores, rho, scope = "global"))]
    fn build(scores: &Scores, rho: f64, scope: &str) -> PyResult<Self> {
        let scope: Scope = scope.parse().py()?;
        Ok(Mask {
            inner: masking::build_mask(&scores.inner, rho, scope).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Mask {
            inner: masking::SparsityMask::load(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py()
    }

    #[getter]
    fn nnz(&self) -> usize {
        self.inner.nnz()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn layers(&self) -> BTreeMap<String, Vec<usize>> {
        self.inner.layers.iter().map(|l| (l.name.clone(), l.indices.clone())).collect()
    }

    /// `|self ∩ new| / |self|`.
    fn overlap(&self, new: &Mask) -> PyResult<f64> {
        Ok(masking::mask_diff(&self.inner, &new.inner).py()?.overlap)
    }

    fn __len__(&self) -> usize {
        self.inner.nnz()
    }
}

/// Largest `k` with `k <= rho * n`.
#[pyfunction]
fn budget(rho: f64, n: usize) -> usize {
    masking::budget(rho, n)
}

#[pyfunction]
fn metrics() -> Vec<&'static str> {
    Metric::ALL.iter().map(|m| m.name()).collect()
}

/// Fine-tunes `checkpoint` on `dataset`. Returns `(final_checkpoint, log)`
/// where `log` is the list of step, refresh and eval records.
#[pyfunction]
fn train<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    dataset: &Dataset,
    config: &Bound<'py, PyAny>,
) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let cfg: TrainConfig = parse(config)?;
    let model = Model::new(checkpoint.inner.config.clone()).py()?;
    let out = trainer::train(&cfg, &model, &checkpoint.inner.params, &dataset.inner, &mut NoObserver).py()?;
    let log = to_py(py, &out.log.records)?;
    let ckpt = speft_core::model::Checkpoint {
        params: out.params,
        ..checkpoint.inner.clone()
    };
    Ok((Checkpoint { inner: ckpt }, log))
}

#[pyfunction]
#[pyo3(signature = (metric, steps, interval = -1, batches = 64, storage = None))]
fn overhead<'py>(
    py: Python<'py>,
    metric: &str,
    steps: u64,
    interval: i64,
    batches: usize,
    storage: Option<(usize, usize, usize)>,
) -> PyResult<Bound<'py, PyAny>> {
    let metric: Metric = metric.parse().py()?;
    to_py(py, &trainer::overhead_report(metric, steps, interval, batches, storage))
}

/// Density matching a rank-`rank` low-rank adapter's trainable count.
#[pyfunction]
#[pyo3(signature = (checkpoint, rank, scope = "global", filter = Vec::new()))]
fn parity_density<'py>(
    py: Python<'py>,
    checkpoint: &Checkpoint,
    rank: usize,
    scope: &str,
    filter: Vec<String>,
) -> PyResult<Bound<'py, PyAny>> {
    let scope: Scope = scope.parse().py()?;
    let filter = AdaptFilter::new(&filter).py()?;
    to_py(py, &trainer::parity_density(&checkpoint.inner.params, &filter, rank, scope).py()?)
}

#[pymodule]
fn speft(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Checkpoint>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Scores>()?;
    m.add_class::<Mask>()?;
    m.add_function(wrap_pyfunction!(budget, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(overhead, m)?)?;
    m.add_function(wrap_pyfunction!(parity_density, m)?)?;
    Ok(())
}
