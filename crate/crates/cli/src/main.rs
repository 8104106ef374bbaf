use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use speft_core::adapter::AdapterFile;
use speft_core::data::{BatchSampler, Dataset, DatasetSpec};
use speft_core::experiment::{build_report, execute_all, load_manifest, read_config, worker_count, ExperimentSpec, Seeds};
use speft_core::masking::Scope;
use speft_core::model::{build_model, load_checkpoint, save_checkpoint, AdaptFilter, Checkpoint, Model, ModelConfig};
use speft_core::salience::{estimation_batches, model_salience, Metric, SalienceConfig, SalienceScores};
use speft_core::trainer::{evaluate, overhead_report};
use speft_core::SpeftError;

#[derive(Parser)]
#[command(name = "speft", version, about = "Sparse parameter-efficient fine-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model from a config and write its initial checkpoint.
    Init {
        /// Model config (TOML or JSON).
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the adaptable weights of a checkpoint.
    Salience(SalienceArgs),
    /// Build a top-ρ mask from a scores file.
    Mask {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        rho: f64,
        #[arg(long, default_value = "global")]
        scope: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every configuration of an experiment file and write a report.
    Train {
        spec: PathBuf,
        /// Override the number of seeds per cell.
        #[arg(long)]
        seeds: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint, optionally with a sparse adapter applied.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset config (TOML or JSON).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        adapter: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: String,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Summarize run directories into CSV, JSON and plot data.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Salience-estimation compute share and adapter storage overhead.
    Overhead {
        #[arg(long, default_value = "gradient")]
        metric: String,
        #[arg(long)]
        steps: u64,
        #[arg(long, default_value_t = -1, allow_hyphen_values = true)]
        interval: i64,
        #[arg(long, default_value_t = 64)]
        batches: usize,
        /// Report storage for a mask at `--rho` on this checkpoint.
        #[arg(long, requires = "rho")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        rho: Option<f64>,
    },
}

#[derive(Args)]
struct SalienceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    metric: String,
    /// Dataset config (TOML or JSON); required by data-aware metrics.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    batches: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Regex selecting adapted matrices; repeatable.
    #[arg(long)]
    filter: Vec<String>,
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let spec: DatasetSpec = read_config(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(spec.load(base)?)
}

fn cmd_salience(a: SalienceArgs) -> Result<()> {
    let metric: Metric = a.metric.parse()?;
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let model = Model::new(ckpt.config.clone())?;
    let adapt = ckpt.params.adaptable(&AdaptFilter::new(&a.filter)?);
    let cfg = SalienceConfig {
        metric,
        batches: a.batches,
        batch_size: a.batch_size,
        seed: a.seed,
        ..Default::default()
    };
    let scores = match (&a.data, metric.needs_data()) {
        (Some(path), true) => {
            let ds = load_dataset(path)?;
            let mut sampler = BatchSampler::new(ds.train.clone(), a.seed)?;
            let batches = estimation_batches(&mut sampler, &cfg);
            model_salience(&model, &ckpt.params, &adapt, &cfg, Some((&ds, &batches)))?
        }
        (None, true) => return Err(SpeftError::DataRequired(metric.name().into()).into()),
        (_, false) => model_salience(&model, &ckpt.params, &adapt, &cfg, None)?,
    };
    scores.save(&a.out)?;
    println!(
        "{}",
        json!({"scores": a.out, "metric": metric, "layers": scores.layers.len(), "entries": scores.total_len(), "batches_used": scores.batches_used})
    );
    Ok(())
}

fn cmd_mask(scores: &Path, rho: f64, scope: &str, out: &Path) -> Result<()> {
    let scope: Scope = scope.parse()?;
    let s = SalienceScores::load(scores)?;
    let mask = speft_core::masking::build_mask(&s, rho, scope)?;
    for w in &mask.warnings {
        log::warn!("{w}");
    }
    mask.save(out)?;
    println!(
        "{}",
        json!({
            "mask": out,
            "scope": scope,
            "density": rho,
            "nnz": mask.nnz(),
            "per_layer": mask.layers.iter().map(|l| json!({"name": l.name, "count": l.indices.len()})).collect::<Vec<_>>(),
            "warnings": mask.warnings,
        })
    );
    Ok(())
}

fn cmd_train(spec_path: &Path, seeds: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut spec = ExperimentSpec::load(spec_path)?;
    if let Some(n) = seeds {
        spec.seeds = Seeds::Count(n);
    }
    let base_dir = spec_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let out_dir = match out {
        Some(o) => o,
        None if spec.out_dir.is_absolute() => spec.out_dir.clone(),
        None => base_dir.join(&spec.out_dir),
    };
    let runs = spec.expand()?;
    let workers = worker_count();
    log::info!("{} runs on {} workers into {}", runs.len(), workers, out_dir.display());
    let results = execute_all(&runs, &base_dir, &out_dir, workers);
    let mut manifests = Vec::new();
    let mut first_err = None;
    for (run, r) in runs.iter().zip(results) {
        match r {
            Ok(m) => manifests.push(m),
            Err(e) => {
                eprintln!("run {} ({}) failed: {e}", run.id, run.cell);
                first_err.get_or_insert(e);
            }
        }
    }
    if !manifests.is_empty() {
        let report = build_report(&manifests);
        let files = report.write(&out_dir.join("report"))?;
        println!("{}", json!({"runs": manifests.len(), "out": out_dir, "report": files}));
    }
    match first_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn cmd_eval(checkpoint: &Path, data: &Path, adapter: Option<&Path>, split: &str, batch_size: usize) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model = Model::new(ckpt.config.clone())?;
    let ds = load_dataset(data)?;
    let params = match adapter {
        Some(p) => AdapterFile::load(p)?.into_delta(&ckpt.params)?.materialize(&ckpt.params),
        None => ckpt.params.clone(),
    };
    let indices = match split {
        "eval" => &ds.eval,
        "train" => &ds.train,
        other => bail!(SpeftError::InvalidConfig(format!("unknown split `{other}` (expected eval or train)"))),
    };
    let metrics = evaluate(&model, &params, &ds, indices, batch_size)?;
    println!("{}", serde_json::to_string(&metrics)?);
    Ok(())
}

/// Run directories, expanding a directory of runs into its children.
fn collect_runs(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.exists() {
            return Err(SpeftError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found")).into());
        }
        if p.join(speft_core::experiment::MANIFEST).exists() {
            out.push(p.clone());
            continue;
        }
        let mut children: Vec<PathBuf> = std::fs::read_dir(p)
            .with_context(|| format!("reading {}", p.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|c| c.join(speft_core::experiment::MANIFEST).exists())
            .collect();
        if children.is_empty() {
            return Err(SpeftError::io(p, std::io::Error::new(std::io::ErrorKind::NotFound, "no manifest in run directory")).into());
        }
        children.sort();
        out.extend(children);
    }
    Ok(out)
}

fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let manifests = collect_runs(runs)?
        .iter()
        .map(|d| load_manifest(d))
        .collect::<speft_core::Result<Vec<_>>>()?;
    let report = build_report(&manifests);
    let files = report.write(out)?;
    println!("{}", json!({"rows": report.rows.len(), "files": files}));
    Ok(())
}

fn cmd_overhead(metric: &str, steps: u64, interval: i64, batches: usize, checkpoint: Option<&Path>, rho: Option<f64>) -> Result<()> {
    let metric: Metric = metric.parse()?;
    let storage = match (checkpoint, rho) {
        (Some(p), Some(rho)) => {
            let ckpt = load_checkpoint(p)?;
            let adapt = ckpt.params.adaptable(&AdaptFilter::all());
            let n: usize = adapt.iter().map(|i| ckpt.params.value(*i).numel()).sum();
            let nnz = speft_core::masking::budget(rho, n);
            Some((nnz, ckpt.params.numel(), ckpt.dtype.size()))
        }
        _ => None,
    };
    let report = overhead_report(metric, steps, interval, batches, storage);
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_init(config: &Path, seed: u64, out: &Path) -> Result<()> {
    let cfg: ModelConfig = read_config(config)?;
    let (_, params) = build_model(&cfg, seed)?;
    let n = params.numel();
    save_checkpoint(out, &Checkpoint::new(cfg, seed, params))?;
    println!("{}", json!({"checkpoint": out, "parameters": n}));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { config, seed, out } => cmd_init(&config, seed, &out),
        Command::Salience(a) => cmd_salience(a),
        Command::Mask { scores, rho, scope, out } => cmd_mask(&scores, rho, &scope, &out),
        Command::Train { spec, seeds, out } => cmd_train(&spec, seeds, out),
        Command::Eval {
            checkpoint,
            data,
            adapter,
            split,
            batch_size,
        } => cmd_eval(&checkpoint, &data, adapter.as_deref(), &split, batch_size),
        Command::Report { runs, out } => cmd_report(&runs, &out),
        Command::Overhead {
            metric,
            steps,
            interval,
            batches,
            checkpoint,
            rho,
        } => cmd_overhead(&metric, steps, interval, batches, checkpoint.as_deref(), rho),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = match err.downcast_ref::<SpeftError>() {
                Some(e) => {
                    eprintln!("error: {e}");
                    e.exit_code()
                }
                None => {
                    eprintln!("error: {err:#}");
                    1
                }
            };
            ExitCode::from(code as u8)
        }
    }
}
