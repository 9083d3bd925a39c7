mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use flrml::constraints::{build_constraint_matrices, generate_triplets, read_triplets, write_triplets, TripletSet};
use flrml::dataio::{
    load_dataset, load_model, normalize_columns, save_model, write_atomic, write_embedding, write_trace,
    ColumnStore, LabeledDataset, ModelMetadata,
};
use flrml::eval::{evaluate, transform};
use flrml::linalg::truncated_svd;
use flrml::minibatch::{train_minibatch, ColumnSource, MiniBatchConfig};
use flrml::stiefel::SearchConfig;
use flrml::trainer::{train, FlrmlConfig, FlrmlProblem, MetricModel};

use config::{Mode, RunArgs, RunConfig};

#[derive(Parser)]
#[command(name = "flrml", version, about = "Low-rank metric learning from triplet constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw random triplets from the labels of --train and write them to --out.
    GenTriplets(RunArgs),
    /// Learn a metric from --train and write it to --model-out.
    Train(RunArgs),
    /// Embed --input with --model and write the embedding CSV to --out.
    Transform(RunArgs),
    /// k-NN accuracy of --model on --test with --train as reference set.
    Evaluate(RunArgs),
}

enum CliError {
    Usage(String),
    Run(flrml::Error),
}

impl From<flrml::Error> for CliError {
    fn from(e: flrml::Error) -> Self {
        CliError::Run(e)
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let (args, run): (&RunArgs, fn(&RunConfig) -> CliResult<Value>) = match &cli.command {
        Command::GenTriplets(a) => (a, cmd_gen_triplets),
        Command::Train(a) => (a, cmd_train),
        Command::Transform(a) => (a, cmd_transform),
        Command::Evaluate(a) => (a, cmd_evaluate),
    };
    let result = RunConfig::resolve(args)
        .map_err(CliError::Usage)
        .and_then(|cfg| {
            let report = run(&cfg)?;
            emit_report(&cfg, &report)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(message)) => {
            eprintln!("{}", json!({"error": "UsageError", "message": message}));
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::from(1)
        }
    }
}

fn emit_report(cfg: &RunConfig, report: &Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).map_err(flrml::Error::from)? + "\n";
    match &cfg.report_out {
        Some(path) => write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required")))
}

/// A required input that must already exist.
fn input<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    let path = required(value, flag)?;
    existing(path, flag)
}

fn existing<'a>(path: &'a Path, flag: &str) -> CliResult<&'a Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Usage(format!("--{flag}: {} does not exist", path.display())))
    }
}

fn load(path: &Path, cfg: &RunConfig) -> CliResult<LabeledDataset> {
    let mut ds = load_dataset(path)?;
    if cfg.normalize {
        normalize_columns(&mut ds);
    }
    Ok(ds)
}

fn triplets_for(cfg: &RunConfig, labels: &[i64]) -> CliResult<TripletSet> {
    Ok(match &cfg.triplets {
        Some(path) => read_triplets(path)?,
        None => generate_triplets(labels, cfg.triplets_per_sample, cfg.seed)?,
    })
}

fn cmd_gen_triplets(cfg: &RunConfig) -> CliResult<Value> {
    let train = input(&cfg.train, "train")?;
    let out = required(&cfg.out, "out")?;
    let ds = load_dataset(train)?;
    let ts = generate_triplets(&ds.labels, cfg.triplets_per_sample, cfg.seed)?;
    write_triplets(out, &ts)?;
    Ok(json!({
        "command": "gen-triplets",
        "samples": ds.sample_count(),
        "triplets": ts.len(),
        "config": cfg,
    }))
}

fn cmd_train(cfg: &RunConfig) -> CliResult<Value> {
    let train_path = input(&cfg.train, "train")?;
    let model_out = required(&cfg.model_out, "model-out")?;
    if let Some(p) = &cfg.triplets {
        existing(p, "triplets")?;
    }
    if let Some(p) = &cfg.test {
        existing(p, "test")?;
    }
    let start = Instant::now();
    let streamed = cfg.mode == Mode::Mflrml && train_path.extension().is_some_and(|e| e == "fcs");

    let (model, mut report, train_ds) = if streamed {
        // Columns are read from disk batch by batch and used as stored.
        let store = ColumnStore::open(train_path)?;
        let ts = triplets_for(cfg, store.labels())?;
        let (model, report) = run_minibatch(cfg, &store, &ts)?;
        (model, report, None)
    } else {
        let ds = load(train_path, cfg)?;
        let ts = triplets_for(cfg, &ds.labels)?;
        let (model, report) = match cfg.mode {
            Mode::Flrml => run_full(cfg, &ds, &ts, model_out)?,
            Mode::Mflrml => run_minibatch(cfg, &ds.x, &ts)?,
        };
        (model, report, Some(ds))
    };

    let meta = ModelMetadata::new(&model, cfg.hyperparameters());
    save_model(model_out, &model, &meta)?;
    let obj = report.as_object_mut().unwrap();
    obj.insert("config_digest".into(), json!(meta.config_digest));
    obj.insert("total_seconds".into(), json!(start.elapsed().as_secs_f64()));

    if let Some(test_path) = &cfg.test {
        let train_ds = match train_ds {
            Some(ds) => ds,
            None => load(train_path, cfg)?,
        };
        let test_ds = load(test_path, cfg)?;
        let eval = evaluate(&model, &train_ds.x, &train_ds.labels, &test_ds.x, &test_ds.labels, cfg.k, None)?;
        obj.insert("accuracy".into(), json!(eval.accuracy));
        obj.insert("k".into(), json!(eval.k));
        obj.insert("n_test".into(), json!(eval.n_test));
    }
    obj.insert("config".into(), json!(cfg));
    Ok(report)
}

fn run_full(
    cfg: &RunConfig,
    ds: &LabeledDataset,
    ts: &TripletSet,
    model_out: &Path,
) -> CliResult<(MetricModel, Value)> {
    let n = ds.sample_count();
    let cm = build_constraint_matrices(ts, n)?;
    let svd_start = Instant::now();
    let svd = truncated_svd(&ds.x, cfg.svd_cap, cfg.seed)?;
    let svd_seconds = svd_start.elapsed().as_secs_f64();
    let r = svd.rank();
    let problem = FlrmlProblem::new(svd, cm, cfg.rank)?;
    let train_cfg = FlrmlConfig {
        search: SearchConfig {
            max_iterations: cfg.max_iters,
            tolerance: cfg.tol,
            ..SearchConfig::default()
        },
        margin_ratio: cfg.margin_ratio,
        ..FlrmlConfig::default()
    };
    let opt_start = Instant::now();
    let out = train(&problem, &train_cfg, cfg.seed)?;
    let optimize_seconds = opt_start.elapsed().as_secs_f64();
    if let Some(path) = &cfg.trace_out {
        write_trace(path, &out.trace)?;
    }
    log::info!("model written to {}", model_out.display());
    let report = json!({
        "command": "train",
        "mode": "flrml",
        "samples": n,
        "features": ds.feature_count(),
        "triplets": ts.len(),
        "svd_rank": r,
        "rank": problem.d,
        "status": format!("{:?}", out.status),
        "iterations": out.trace.rows.len(),
        "initial_objective": out.initial_objective,
        "final_objective": out.final_objective,
        "margin": out.margin,
        "scaling_converged": out.scaling_converged,
        "scaling_iterations": out.scaling_iterations,
        "svd_seconds": svd_seconds,
        "optimize_seconds": optimize_seconds,
    });
    Ok((out.model, report))
}

fn run_minibatch<S: ColumnSource + ?Sized>(
    cfg: &RunConfig,
    source: &S,
    ts: &TripletSet,
) -> CliResult<(MetricModel, Value)> {
    let mb_cfg = MiniBatchConfig {
        d: cfg.rank,
        n_t: cfg.batch_triplets,
        num_batches: cfg.num_batches,
        margin_ratio: cfg.margin_ratio,
    };
    let start = Instant::now();
    let out = train_minibatch(source, ts, &mb_cfg, cfg.seed)?;
    let skipped = out.batches.iter().filter(|b| b.skipped).count();
    let final_objective = out.batches.iter().rev().find_map(|b| b.objective);
    let report = json!({
        "command": "train",
        "mode": "mflrml",
        "samples": source.len(),
        "features": source.dim(),
        "triplets": ts.len(),
        "rank": cfg.rank,
        "iterations": out.batches.len(),
        "skipped_batches": skipped,
        "final_objective": final_objective,
        "optimize_seconds": start.elapsed().as_secs_f64(),
    });
    Ok((out.model, report))
}

fn cmd_transform(cfg: &RunConfig) -> CliResult<Value> {
    let model_path = input(&cfg.model, "model")?;
    let data = input(&cfg.input, "input")?;
    let out = required(&cfg.out, "out")?;
    let (model, _) = load_model(model_path)?;
    let ds = load(data, cfg)?;
    let y = transform(&model, &ds.x)?;
    write_embedding(out, &y, &ds.labels)?;
    Ok(json!({
        "command": "transform",
        "samples": ds.sample_count(),
        "rank": model.rank(),
        "config": cfg,
    }))
}

fn cmd_evaluate(cfg: &RunConfig) -> CliResult<Value> {
    let model_path = input(&cfg.model, "model")?;
    let train_path = input(&cfg.train, "train")?;
    let test_path = input(&cfg.test, "test")?;
    if let Some(p) = &cfg.triplets {
        existing(p, "triplets")?;
    }
    let (model, _) = load_model(model_path)?;
    let train_ds = load(train_path, cfg)?;
    let test_ds = load(test_path, cfg)?;
    let test_triplets = cfg.triplets.as_ref().map(read_triplets).transpose()?;
    let report = evaluate(
        &model,
        &train_ds.x,
        &train_ds.labels,
        &test_ds.x,
        &test_ds.labels,
        cfg.k,
        test_triplets.as_ref(),
    )?;
    let mut value = serde_json::to_value(&report).map_err(flrml::Error::from)?;
    value
        .as_object_mut()
        .unwrap()
        .insert("config".into(), json!(cfg));
    Ok(value)
}
