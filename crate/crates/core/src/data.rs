//! Desk-scale datasets: teacher-student regression, byte-level text corpora,
//! small CSV classification tables and synthetic token classification.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SpeftError};
use crate::model::{build_model, Activation, Batch, Inputs, MlpTask, Model, ModelConfig, ParamKind, ParamSet, Targets};
use crate::tensor::Tensor;

/// SplitMix64 finalizer; used to derive independent seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq)]
pub enum Example {
    Regression { x: Vec<f64>, y: Vec<f64> },
    Classification { x: Vec<f64>, label: usize },
    Sequence { tokens: Vec<usize>, label: usize },
    NextToken { input: Vec<usize>, target: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
    SequenceClassification,
    LanguageModel,
}

/// The frozen network that labels a teacher-student dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub config: ModelConfig,
    pub params: ParamSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: TaskKind,
    pub examples: Vec<Example>,
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
    pub seed: u64,
    /// Byte table for byte-level corpora: token id → byte.
    pub vocab: Option<Vec<u8>>,
    pub teacher: Option<Teacher>,
    pub standardization: Option<Standardization>,
}

/// Eval membership as a pure function of `(seed, index)`.
pub fn in_eval_split(seed: u64, index: usize, eval_fraction: f64) -> bool {
    let u = (mix_seed(seed, index as u64) >> 11) as f64 / (1u64 << 53) as f64;
    u < eval_fraction
}

fn split(seed: u64, n: usize, eval_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !in_eval_split(seed, i, eval_fraction))
}

impl Dataset {
    fn from_examples(name: String, kind: TaskKind, examples: Vec<Example>, seed: u64, eval_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(SpeftError::InvalidConfig(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let (train, eval) = split(seed, examples.len(), eval_fraction);
        Ok(Dataset {
            name,
            kind,
            examples,
            train,
            eval,
            seed,
            vocab: None,
            teacher: None,
            standardization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stacks the given examples into a model batch.
    pub fn make_batch(&self, indices: &[usize]) -> Result<Batch> {
        let first = indices.first().ok_or(SpeftError::EmptyBatch)?;
        let get = |i: usize| {
            self.examples
                .get(i)
                .ok_or_else(|| SpeftError::Data(format!("example index {i} out of range")))
        };
        let ragged = || SpeftError::Data("ragged examples in batch".into());
        match get(*first)? {
            Example::Regression { x, y } => {
                let (dx, dy) = (x.len(), y.len());
                let mut xs = Vec::with_capacity(indices.len() * dx);
                let mut ys = Vec::with_capacity(indices.len() * dy);
                for &i in indices {
                    match get(i)? {
                        Example::Regression { x, y } if x.len() == dx && y.len() == dy => {
                            xs.extend_from_slice(x);
                            ys.extend_from_slice(y);
                        }
                        _ => return Err(ragged()),
                    }
                }
                Ok(Batch {
                    inputs: Inputs::Dense(Tensor::new(vec![indices.len(), dx], xs)?),
                    targets: Targets::Regression(Tensor::new(vec![indices.len(), dy], ys)?),
                })
            }
            Example::Classification { x, .. } => {
                let dx = x.len();
                let mut xs = Vec::with_capacity(indices.len() * dx);
                let mut labels = Vec::with_capacity(indices.len());
                for &i in indices {
                    match get(i)? {
                        Example::Classification { x, label } if x.len() == dx => {
                            xs.extend_from_slice(x);
                            labels.push(*label);
                        }
                        _ => return Err(ragged()),
                    }
                }
                Ok(Batch {
                    inputs: Inputs::Dense(Tensor::new(vec![indices.len(), dx], xs)?),
                    targets: Targets::Classes(labels),
                })
            }
            Example::Sequence { tokens, .. } => {
                let seq = tokens.len();
                let mut ids = Vec::with_capacity(indices.len() * seq);
                let mut labels = Vec::with_capacity(indices.len());
                for &i in indices {
                    match get(i)? {
                        Example::Sequence { tokens, label } if tokens.len() == seq => {
                            ids.extend_from_slice(tokens);
                            labels.push(*label);
                        }
                        _ => return Err(ragged()),
                    }
                }
                Ok(Batch {
                    inputs: Inputs::Tokens { ids, batch: indices.len(), seq },
                    targets: Targets::Classes(labels),
                })
            }
            Example::NextToken { input, .. } => {
                let seq = input.len();
                let mut ids = Vec::with_capacity(indices.len() * seq);
                let mut tgt = Vec::with_capacity(indices.len() * seq);
                for &i in indices {
                    match get(i)? {
                        Example::NextToken { input, target } if input.len() == seq && target.len() == seq => {
                            ids.extend_from_slice(input);
                            tgt.extend_from_slice(target);
                        }
                        _ => return Err(ragged()),
                    }
                }
                Ok(Batch {
                    inputs: Inputs::Tokens { ids, batch: indices.len(), seq },
                    targets: Targets::NextTokens(tgt),
                })
            }
        }
    }
}

/// Epoch-wise shuffled sampler over a fixed pool of example indices.
///
/// The permutation for each epoch is a pure function of `(seed, epoch)`;
/// batches that run past the end of an epoch continue into the next one.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pool: Vec<usize>,
    seed: u64,
    epoch: u64,
    perm: Vec<usize>,
    cursor: usize,
}

impl BatchSampler {
    pub fn new(pool: Vec<usize>, seed: u64) -> Result<Self> {
        if pool.is_empty() {
            return Err(SpeftError::Data("cannot sample from an empty split".into()));
        }
        let perm = BatchSampler::permutation(&pool, seed, 0);
        Ok(BatchSampler {
            pool,
            seed,
            epoch: 0,
            perm,
            cursor: 0,
        })
    }

    /// A sampler over the same pool on an independent stream.
    pub fn fork(&self, stream: u64) -> Self {
        BatchSampler::new(self.pool.clone(), mix_seed(self.seed, stream.wrapping_add(1)))
            .expect("pool is non-empty")
    }

    pub fn permutation(pool: &[usize], seed: u64, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, epoch));
        let mut perm = pool.to_vec();
        perm.shuffle(&mut rng);
        perm
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.perm.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.perm = BatchSampler::permutation(&self.pool, self.seed, self.epoch);
                log::debug!("sampler wrapped into epoch {}", self.epoch);
            }
            let take = (size - out.len()).min(self.perm.len() - self.cursor);
            out.extend_from_slice(&self.perm[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStudentConfig {
    /// Teacher MLP widths, input first.
    pub widths: Vec<usize>,
    #[serde(default = "default_teacher_activation")]
    pub activation: Activation,
    pub teacher_seed: u64,
    #[serde(default)]
    pub noise: f64,
    pub n: usize,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_teacher_activation() -> Activation {
    Activation::Tanh
}

fn default_eval_fraction() -> f64 {
    0.2
}

/// Teacher weights: the zoo initialization rescaled to normal(0, 1/√fan_in)
/// so the teacher's outputs are order one.
pub fn teacher_params(config: &ModelConfig, seed: u64) -> Result<ParamSet> {
    let (_, mut params) = build_model(config, seed)?;
    for p in params.iter_mut().filter(|p| p.kind == ParamKind::Matrix) {
        let fan_in = p.value.shape()[0] as f64;
        let factor = (1.0 / fan_in.sqrt()) / crate::model::INIT_STD;
        p.value.data_mut().iter_mut().for_each(|v| *v *= factor);
    }
    Ok(params)
}

pub fn gen_teacher_student(cfg: &TeacherStudentConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(SpeftError::InvalidConfig("teacher-student needs n >= 1".into()));
    }
    if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
        return Err(SpeftError::InvalidConfig(format!("noise {} must be >= 0", cfg.noise)));
    }
    let config = ModelConfig::mlp(&cfg.widths, cfg.activation, MlpTask::Regression);
    let params = teacher_params(&config, cfg.teacher_seed)?;
    let model = Model::new(config.clone())?;
    let d_in = cfg.widths[0];
    let d_out = *cfg.widths.last().expect("validated");
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7EAC));
    let xs: Vec<f64> = (0..cfg.n * d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
    let batch = Batch {
        inputs: Inputs::Dense(Tensor::new(vec![cfg.n, d_in], xs.clone())?),
        targets: Targets::Regression(Tensor::zeros(&[cfg.n, d_out])),
    };
    let mut g = crate::autodiff::Graph::new();
    let w = params.bind_constants(&mut g);
    let (out, _) = model.forward_with_output(&mut g, &w, &batch)?;
    let clean = g.value(out).data().to_vec();
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("valid noise");
    let examples = (0..cfg.n)
        .map(|i| Example::Regression {
            x: xs[i * d_in..(i + 1) * d_in].to_vec(),
            y: clean[i * d_out..(i + 1) * d_out]
                .iter()
                .map(|v| if cfg.noise > 0.0 { v + noise.sample(&mut rng) } else { *v })
                .collect(),
        })
        .collect();
    let mut ds = Dataset::from_examples("teacher_student".into(), TaskKind::Regression, examples, cfg.seed, cfg.eval_fraction)?;
    ds.teacher = Some(Teacher { config, params });
    Ok(ds)
}

/// Byte-level next-token windows over `text`: `len − seq_len` windows, each
/// predicting the byte after every position.
pub fn char_lm_from_text(text: &[u8], seq_len: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    if text.is_empty() {
        return Err(SpeftError::Data("corpus is empty".into()));
    }
    if seq_len == 0 || text.len() <= seq_len {
        return Err(SpeftError::Data(format!(
            "corpus of {} bytes is too short for windows of {seq_len}",
            text.len()
        )));
    }
    let mut table: Vec<u8> = text.to_vec();
    table.sort_unstable();
    table.dedup();
    let mut id_of = [0usize; 256];
    for (i, b) in table.iter().enumerate() {
        id_of[*b as usize] = i;
    }
    let ids: Vec<usize> = text.iter().map(|b| id_of[*b as usize]).collect();
    let examples = (0..ids.len() - seq_len)
        .map(|i| Example::NextToken {
            input: ids[i..i + seq_len].to_vec(),
            target: ids[i + 1..i + seq_len + 1].to_vec(),
        })
        .collect();
    let mut ds = Dataset::from_examples("char_lm".into(), TaskKind::LanguageModel, examples, seed, eval_fraction)?;
    ds.vocab = Some(table);
    Ok(ds)
}

pub fn gen_char_lm_corpus(path: &Path, seq_len: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    let text = fs::read(path).map_err(|e| SpeftError::io(path, e))?;
    if text.is_empty() {
        return Err(SpeftError::Data(format!("{}: corpus is empty", path.display())));
    }
    char_lm_from_text(&text, seq_len, eval_fraction, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CsvSchema {
    /// Label column header; defaults to the last column.
    #[serde(default)]
    pub label_column: Option<String>,
    /// Labels must lie in `0..n_classes`; inferred as `max + 1` when absent.
    #[serde(default)]
    pub n_classes: Option<usize>,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Numeric features + integer labels; features are standardized with
/// statistics from the train split only.
pub fn load_csv_classification(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    let file = fs::File::open(path).map_err(|e| SpeftError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let parse_err = |line: u64, msg: String| SpeftError::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    if headers.len() < 2 {
        return Err(parse_err(1, "need at least one feature column and a label".into()));
    }
    let label_col = match &schema.label_column {
        Some(name) => headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("no column named `{name}`")))?,
        None => headers.len() - 1,
    };
    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let mut x = Vec::with_capacity(headers.len() - 1);
        let mut label = None;
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if c == label_col {
                let l: usize = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("label `{field}` is not a non-negative integer")))?;
                if let Some(n) = schema.n_classes {
                    if l >= n {
                        return Err(parse_err(line, format!("label {l} outside 0..{n}")));
                    }
                }
                label = Some(l);
            } else {
                x.push(
                    field
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(line, format!("feature `{field}` is not a finite number")))?,
                );
            }
        }
        rows.push((x, label.expect("label column present in every record")));
    }
    if rows.is_empty() {
        return Err(SpeftError::Data(format!("{}: no data rows", path.display())));
    }
    let examples: Vec<Example> = rows
        .into_iter()
        .map(|(x, label)| Example::Classification { x, label })
        .collect();
    let mut ds = Dataset::from_examples(
        path.file_stem().map_or("csv".into(), |s| s.to_string_lossy().into_owned()),
        TaskKind::Classification,
        examples,
        schema.seed,
        schema.eval_fraction,
    )?;
    standardize(&mut ds)?;
    Ok(ds)
}

fn standardize(ds: &mut Dataset) -> Result<()> {
    if ds.train.is_empty() {
        return Err(SpeftError::Data("train split is empty".into()));
    }
    let dim = match &ds.examples[0] {
        Example::Classification { x, .. } => x.len(),
        _ => return Ok(()),
    };
    let features = |e: &Example| match e {
        Example::Classification { x, .. } => x.clone(),
        _ => unreachable!("classification dataset"),
    };
    let n = ds.train.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in &ds.train {
        for (m, v) in mean.iter_mut().zip(features(&ds.examples[i])) {
            *m += v / n;
        }
    }
    let mut var = vec![0.0; dim];
    for &i in &ds.train {
        for ((s, v), m) in var.iter_mut().zip(features(&ds.examples[i])).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    let std: Vec<f64> = var
        .iter()
        .zip(&mean)
        .map(|(v, m)| if *v > 1e-24 * (1.0 + m * m) { v.sqrt() } else { 1.0 })
        .collect();
    for e in ds.examples.iter_mut() {
        if let Example::Classification { x, .. } = e {
            for ((v, m), s) in x.iter_mut().zip(&mean).zip(&std) {
                *v = (*v - m) / s;
            }
        }
    }
    ds.standardization = Some(Standardization { mean, std });
    Ok(())
}

/// Pre-tokenized sequences, one JSON array (or `{"tokens": [...]}`) per line,
/// cut into next-token windows like the byte corpora.
pub fn load_jsonl_sequences(path: &Path, seq_len: usize, vocab_size: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Line {
        Bare(Vec<usize>),
        Object { tokens: Vec<usize> },
    }
    let text = fs::read_to_string(path).map_err(|e| SpeftError::io(path, e))?;
    let mut examples = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens = match serde_json::from_str::<Line>(line) {
            Ok(Line::Bare(t)) | Ok(Line::Object { tokens: t }) => t,
            Err(e) => {
                return Err(SpeftError::Parse {
                    path: path.to_path_buf(),
                    line: n as u64 + 1,
                    msg: e.to_string(),
                })
            }
        };
        if let Some(bad) = tokens.iter().find(|t| **t >= vocab_size) {
            return Err(SpeftError::Parse {
                path: path.to_path_buf(),
                line: n as u64 + 1,
                msg: format!("token {bad} outside vocabulary of {vocab_size}"),
            });
        }
        for i in 0..tokens.len().saturating_sub(seq_len) {
            examples.push(Example::NextToken {
                input: tokens[i..i + seq_len].to_vec(),
                target: tokens[i + 1..i + seq_len + 1].to_vec(),
            });
        }
    }
    if examples.is_empty() {
        return Err(SpeftError::Data(format!("{}: no sequence longer than {seq_len}", path.display())));
    }
    Dataset::from_examples("jsonl".into(), TaskKind::LanguageModel, examples, seed, eval_fraction)
}

/// Random token sequences labelled by their first token modulo `n_classes`.
pub fn gen_token_classification(vocab_size: usize, seq_len: usize, n: usize, n_classes: usize, eval_fraction: f64, seed: u64) -> Result<Dataset> {
    if vocab_size == 0 || seq_len == 0 || n == 0 || n_classes < 2 {
        return Err(SpeftError::InvalidConfig("token classification needs positive sizes and >= 2 classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x70C));
    let examples = (0..n)
        .map(|_| {
            let tokens: Vec<usize> = (0..seq_len).map(|_| rng.random_range(0..vocab_size)).collect();
            let label = tokens[0] % n_classes;
            Example::Sequence { tokens, label }
        })
        .collect();
    Dataset::from_examples("token_classification".into(), TaskKind::SequenceClassification, examples, seed, eval_fraction)
}

/// Declarative dataset description used by experiment files and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetSpec {
    TeacherStudent(TeacherStudentConfig),
    CharLm {
        path: PathBuf,
        seq_len: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    Csv {
        path: PathBuf,
        #[serde(flatten)]
        schema: CsvSchema,
    },
    JsonlTokens {
        path: PathBuf,
        seq_len: usize,
        vocab_size: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
    TokenClassification {
        vocab_size: usize,
        seq_len: usize,
        n: usize,
        #[serde(default = "default_classes")]
        n_classes: usize,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
        #[serde(default)]
        seed: u64,
    },
}

fn default_classes() -> usize {
    2
}

impl DatasetSpec {
    /// Materializes the dataset; relative paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        match self {
            DatasetSpec::TeacherStudent(c) => gen_teacher_student(c),
            DatasetSpec::CharLm {
                path,
                seq_len,
                eval_fraction,
                seed,
            } => gen_char_lm_corpus(&resolve(path), *seq_len, *eval_fraction, *seed),
            DatasetSpec::Csv { path, schema } => load_csv_classification(&resolve(path), schema),
            DatasetSpec::JsonlTokens {
                path,
                seq_len,
                vocab_size,
                eval_fraction,
                seed,
            } => load_jsonl_sequences(&resolve(path), *seq_len, *vocab_size, *eval_fraction, *seed),
            DatasetSpec::TokenClassification {
                vocab_size,
                seq_len,
                n,
                n_classes,
                eval_fraction,
                seed,
            } => gen_token_classification(*vocab_size, *seq_len, *n, *n_classes, *eval_fraction, *seed),
        }
    }
}
