//! Command-line front end: one binary with `synth`, `train`, `predict`,
//! `eval`, and `verify` subcommands.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 verification
//! failure. Progress lines go to stderr; results and artifacts go to stdout
//! and files.

use crate::data::{self, DatasetManifest};
use crate::model::{
    load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig,
};
use crate::rng;
use crate::sampling::allocate_quotas;
use crate::synth::{self, SynthConfig};
use crate::tensor::check::primitive_gradient_suite;
use crate::tensor::Tensor;
use crate::train::{
    metrics, model_gradient_check, run_cv, run_fixed, write_report, LossWeighting, ScatterRow,
    TargetTransform, TrainConfig, TrainError,
};
use clap::{ArgAction, Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

const EXIT_OK: i32 = 0;
const EXIT_RUNTIME: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_VERIFY: i32 = 3;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
    VerifyFailed,
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::VerifyFailed => EXIT_VERIFY,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::TooFewYears { .. } | TrainError::BadConfig(_) => {
                CliError::Usage(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

macro_rules! runtime_from {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Runtime(e.to_string())
            }
        }
    )*};
}
runtime_from!(
    crate::synth::SynthError,
    crate::model::ModelError,
    crate::data::DatasetError,
    crate::data::ContainerError,
    std::io::Error
);

#[derive(Parser, Debug)]
#[command(
    name = "cropcast",
    version,
    about = "County-level crop yield forecasting on synthetic multi-modal data",
    propagate_version = true
)]
struct Cli {
    /// JSON config file with the same keys as the long flags
    /// (e.g. {"counties": 4, "years": "2008:2015"}); flags take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Increase stderr log detail (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic benchmark dataset with a known yield oracle.
    Synth(SynthArgs),
    /// Train a model on a dataset and write a checkpoint plus reports.
    Train(TrainArgs),
    /// Print the monthly yield series for one stored sample.
    Predict(PredictArgs),
    /// Evaluate a checkpoint on a dataset and write a metrics report.
    Eval(EvalArgs),
    /// Run the self-check suites (gradients, metrics, sampler, container).
    Verify(VerifyArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of counties.
    #[arg(long)]
    counties: Option<usize>,
    /// Number of crops.
    #[arg(long)]
    crops: Option<usize>,
    /// Inclusive year range START:END, e.g. 2008:2022.
    #[arg(long)]
    years: Option<String>,
    /// Master seed for all generated randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Label noise as a fraction of each crop's yield ceiling.
    #[arg(long)]
    noise: Option<f64>,
    /// Landsat/ET/soil pixel count range LO:HI per sample.
    #[arg(long, value_name = "LO:HI")]
    pixels_n: Option<String>,
    /// Climate pixel count range LO:HI per sample.
    #[arg(long, value_name = "LO:HI")]
    pixels_m: Option<String>,
    /// Output dataset directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset directory (written by `synth`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Output directory for the checkpoint and reports.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Training epochs (per fold, and cap for epoch selection).
    #[arg(long)]
    epochs: Option<usize>,
    /// Samples per optimizer step.
    #[arg(long)]
    batch_size: Option<usize>,
    /// AdamW learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Seed for init and batch shuffling.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss weighting over the monthly series: "mean" or "final".
    #[arg(long)]
    loss: Option<String>,
    /// Target transform: "identity" or "log10p1".
    #[arg(long)]
    transform: Option<String>,
    /// Cross-validation fold count over non-test years.
    #[arg(long)]
    folds: Option<usize>,
    /// Held-out test years START:END.
    #[arg(long, value_name = "Y:Y")]
    test_years: Option<String>,
    /// Skip cross-validation: single run with a fixed train/val/test split.
    #[arg(long)]
    fixed_split: bool,
    /// Training years START:END for --fixed-split.
    #[arg(long, value_name = "Y:Y")]
    train_years: Option<String>,
    /// Validation years START:END for --fixed-split.
    #[arg(long, value_name = "Y:Y")]
    val_years: Option<String>,
    /// Model size: "full" (256-dim) or "tiny" (8-dim smoke-test model).
    #[arg(long)]
    model: Option<String>,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Checkpoint directory (written by `train`).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Sample directory (one entry under a dataset's samples/).
    #[arg(long, value_name = "DIR")]
    sample: Option<PathBuf>,
    /// Print only this month (1-12) instead of all twelve.
    #[arg(long)]
    month: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint directory (written by `train`).
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Dataset directory to evaluate on.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Restrict to an inclusive year range START:END.
    #[arg(long, value_name = "Y:Y")]
    years: Option<String>,
    /// Output directory for metrics.tsv and scatter files.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Seed for the randomized checks.
    #[arg(long)]
    seed: Option<u64>,
    /// Random trials per primitive gradient check.
    #[arg(long)]
    trials: Option<usize>,
    /// Corrupt the GELU backward rule first (negative control; must exit 3).
    #[arg(long)]
    inject_grad_bug: bool,
}

/// Values loaded from `--config`; the same keys as the long flags.
struct FileConfig(serde_json::Map<String, serde_json::Value>);

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(FileConfig(serde_json::Map::new()));
        };
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        match serde_json::from_str::<serde_json::Value>(&text) {
            Ok(serde_json::Value::Object(map)) => Ok(FileConfig(map)),
            Ok(_) => Err(CliError::Usage(format!(
                "config {} must be a JSON object of flag values",
                path.display()
            ))),
            Err(e) => Err(CliError::Usage(format!(
                "config {} is not valid JSON: {e}",
                path.display()
            ))),
        }
    }

    fn string(&self, key: &str) -> Result<Option<String>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(serde_json::Value::String(s)) => Ok(Some(s.clone())),
            Some(v) => Err(bad_key(key, "a string", v)),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| bad_key(key, "a nonnegative integer", v)),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>, CliError> {
        Ok(self.u64(key)?.map(|v| v as usize))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v.as_f64().map(Some).ok_or_else(|| bad_key(key, "a number", v)),
        }
    }

    fn path(&self, key: &str) -> Result<Option<PathBuf>, CliError> {
        Ok(self.string(key)?.map(PathBuf::from))
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.0.get(key) {
            None => Ok(false),
            Some(serde_json::Value::Bool(b)) => Ok(*b),
            Some(v) => Err(bad_key(key, "a boolean", v)),
        }
    }
}

fn bad_key(key: &str, want: &str, got: &serde_json::Value) -> CliError {
    CliError::Usage(format!("config key {key:?} must be {want}, got {got}"))
}

fn required<T>(v: Option<T>, flag: &str) -> Result<T, CliError> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

/// Parses "START:END" (inclusive) or a single year.
fn parse_years(s: &str, flag: &str) -> Result<Vec<i32>, CliError> {
    let err = |msg: String| CliError::Usage(format!("--{flag} {s:?}: {msg}"));
    let parse_one = |p: &str| {
        p.trim()
            .parse::<i32>()
            .map_err(|_| err(format!("{p:?} is not a year")))
    };
    match s.split_once(':') {
        None => Ok(vec![parse_one(s)?]),
        Some((a, b)) => {
            let (a, b) = (parse_one(a)?, parse_one(b)?);
            if a > b {
                return Err(err(format!("start year {a} is after end year {b}")));
            }
            Ok((a..=b).collect())
        }
    }
}

/// Parses "LO:HI" (inclusive) or a single count, both at least 1.
fn parse_pixel_range(s: &str, flag: &str) -> Result<(usize, usize), CliError> {
    let err = |msg: String| CliError::Usage(format!("--{flag} {s:?}: {msg}"));
    let parse_one = |p: &str| {
        p.trim()
            .parse::<usize>()
            .map_err(|_| err(format!("{p:?} is not a count")))
    };
    let (lo, hi) = match s.split_once(':') {
        None => {
            let v = parse_one(s)?;
            (v, v)
        }
        Some((a, b)) => (parse_one(a)?, parse_one(b)?),
    };
    if lo < 1 {
        return Err(err("pixel counts start at 1".into()));
    }
    if lo > hi {
        return Err(err(format!("low bound {lo} exceeds high bound {hi}")));
    }
    Ok((lo, hi))
}

/// Entry point used by `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints help/version to stdout (exit 0) and usage errors
            // to stderr (exit 2) by itself.
            return e.exit_code_or_print();
        }
    };
    let file = match FileConfig::load(cli.config.as_deref()) {
        Ok(f) => f,
        Err(e) => return report(e),
    };
    let out = match cli.cmd {
        Cmd::Synth(a) => cmd_synth(a, &file),
        Cmd::Train(a) => cmd_train(a, &file, cli.verbose),
        Cmd::Predict(a) => cmd_predict(a, &file),
        Cmd::Eval(a) => cmd_eval(a, &file),
        Cmd::Verify(a) => cmd_verify(a, &file),
    };
    match out {
        Ok(()) => EXIT_OK,
        Err(e) => report(e),
    }
}

fn report(e: CliError) -> i32 {
    match &e {
        CliError::Usage(msg) => eprintln!("error: {msg}"),
        CliError::Runtime(msg) => eprintln!("error: {msg}"),
        CliError::VerifyFailed => eprintln!("error: verification failed"),
    }
    e.code()
}

trait ClapExit {
    fn exit_code_or_print(self) -> i32;
}

impl ClapExit for clap::Error {
    fn exit_code_or_print(self) -> i32 {
        use clap::error::ErrorKind;
        let code = match self.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
            _ => EXIT_USAGE,
        };
        let _ = self.print();
        code
    }
}

fn cmd_synth(a: SynthArgs, file: &FileConfig) -> Result<(), CliError> {
    let years_s = a.years.or(file.string("years")?);
    let years = match years_s {
        Some(s) => parse_years(&s, "years")?,
        None => (2008..=2022).collect(),
    };
    let (n_lo, n_hi) = match a.pixels_n.or(file.string("pixels-n")?) {
        Some(s) => parse_pixel_range(&s, "pixels-n")?,
        None => SynthConfig::default().pixels_n,
    };
    let (m_lo, m_hi) = match a.pixels_m.or(file.string("pixels-m")?) {
        Some(s) => parse_pixel_range(&s, "pixels-m")?,
        None => SynthConfig::default().pixels_m,
    };
    let cfg = SynthConfig {
        n_counties: a.counties.or(file.usize("counties")?).unwrap_or(6),
        n_crops: a.crops.or(file.usize("crops")?).unwrap_or(8),
        years,
        pixels_n: (n_lo, n_hi),
        pixels_m: (m_lo, m_hi),
        noise_frac: a.noise.or(file.f64("noise")?).unwrap_or(0.05),
        seed: a.seed.or(file.u64("seed")?).unwrap_or(0),
        ..SynthConfig::default()
    };
    if let Err(e) = cfg.validate() {
        return Err(CliError::Usage(e.to_string()));
    }
    let out = required(a.out.or(file.path("out")?), "out")?;
    eprintln!(
        "[synth] {} counties x {} crops x {} years -> {}",
        cfg.n_counties,
        cfg.n_crops,
        cfg.years.len(),
        out.display()
    );
    let manifest = synth::write_dataset(&cfg, &out)?;
    println!("manifest: {}", manifest.manifest_path().display());
    println!("samples: {}", manifest.entries.len());
    Ok(())
}

/// Crop-code table implied by a dataset: index = code, value = name.
fn crop_names_from(manifest: &DatasetManifest) -> Vec<String> {
    let n = manifest
        .entries
        .iter()
        .map(|e| e.crop as usize + 1)
        .max()
        .unwrap_or(0);
    let mut names = vec![String::new(); n];
    for e in &manifest.entries {
        names[e.crop as usize] = e.crop_name.clone();
    }
    for (k, name) in names.iter_mut().enumerate() {
        if name.is_empty() {
            *name = format!("crop{k:02}");
        }
    }
    names
}

fn load_all_samples(
    manifest: &DatasetManifest,
) -> Result<Vec<crate::data::CountyCropSample>, CliError> {
    manifest
        .entries
        .iter()
        .map(|e| manifest.load_sample(e).map_err(CliError::from))
        .collect()
}

fn model_config_for(model: &str, n_crops: usize) -> Result<ModelConfig, CliError> {
    match model {
        "full" => Ok(ModelConfig::new(n_crops)),
        "tiny" => Ok(ModelConfig::tiny(n_crops)),
        other => Err(CliError::Usage(format!(
            "--model must be \"full\" or \"tiny\", got {other:?}"
        ))),
    }
}

fn cmd_train(a: TrainArgs, file: &FileConfig, verbose: u8) -> Result<(), CliError> {
    let data_dir = required(a.data.or(file.path("data")?), "data")?;
    let out_dir = required(a.out.or(file.path("out")?), "out")?;
    let loss: LossWeighting = a
        .loss
        .or(file.string("loss")?)
        .map(|s| s.parse().map_err(CliError::Usage))
        .transpose()?
        .unwrap_or(LossWeighting::MeanOverMonths);
    let transform: TargetTransform = a
        .transform
        .or(file.string("transform")?)
        .map(|s| s.parse().map_err(CliError::Usage))
        .transpose()?
        .unwrap_or(TargetTransform::Log10p1);
    let train_cfg = TrainConfig {
        lr: a.lr.or(file.f64("lr")?).unwrap_or(1e-4),
        weight_decay: a.weight_decay.or(file.f64("weight-decay")?).unwrap_or(0.01),
        epochs: a.epochs.or(file.usize("epochs")?).unwrap_or(6),
        batch_size: a.batch_size.or(file.usize("batch-size")?).unwrap_or(8),
        seed: a.seed.or(file.u64("seed")?).unwrap_or(0),
        loss_weighting: loss,
        target_transform: transform,
        ..TrainConfig::default()
    };
    train_cfg.validate()?;
    let folds = a.folds.or(file.usize("folds")?).unwrap_or(5);
    let test_years = parse_years(
        &a.test_years.or(file.string("test-years")?).unwrap_or("2021:2022".into()),
        "test-years",
    )?;
    let fixed = a.fixed_split || file.flag("fixed-split")?;
    let model_kind = a.model.or(file.string("model")?).unwrap_or("full".into());

    let manifest = DatasetManifest::read(&data_dir)?;
    if manifest.entries.is_empty() {
        return Err(CliError::Runtime(format!(
            "dataset {} has no samples",
            data_dir.display()
        )));
    }
    let crop_names = crop_names_from(&manifest);
    let model_cfg = model_config_for(&model_kind, crop_names.len())?;
    eprintln!(
        "[train] {} samples, {} crops, model {model_kind}, {}",
        manifest.entries.len(),
        crop_names.len(),
        if fixed { "fixed split" } else { "cross-validation" },
    );
    let samples = load_all_samples(&manifest)?;
    let mut log = |m: &str| eprintln!("[train] {m}");

    std::fs::create_dir_all(&out_dir)?;
    let ck_dir = out_dir.join("checkpoint");
    let mut summary = serde_json::Map::new();
    summary.insert("mode".into(), if fixed { "fixed" } else { "cv" }.into());

    let (trainer, report, trained_epochs) = if fixed {
        let train_years = parse_years(
            &a.train_years.or(file.string("train-years")?).unwrap_or("2008:2018".into()),
            "train-years",
        )?;
        let val_years = parse_years(
            &a.val_years.or(file.string("val-years")?).unwrap_or("2019:2020".into()),
            "val-years",
        )?;
        let out = run_fixed(
            &samples, &model_cfg, &train_cfg, &train_years, &val_years, &test_years, &mut log,
        )?;
        summary.insert("best_epoch".into(), out.best_epoch.into());
        summary.insert("val_rmse_by_epoch".into(), out.val_rmse_by_epoch.clone().into());
        (out.trainer, out.report, out.best_epoch + 1)
    } else {
        let out = run_cv(&samples, &model_cfg, &train_cfg, &test_years, folds, &mut log)?;
        for fr in &out.folds {
            let fold_dir = out_dir.join(format!("fold_{}", fr.fold));
            for p in write_report(&fr.report, &fold_dir)? {
                if verbose > 0 {
                    eprintln!("[train] wrote {}", p.display());
                }
            }
        }
        summary.insert("chosen_epochs".into(), out.chosen_epochs.into());
        summary.insert(
            "fold_val_rmse_by_epoch".into(),
            out.folds
                .iter()
                .map(|f| serde_json::Value::from(f.val_rmse_by_epoch.clone()))
                .collect::<Vec<_>>()
                .into(),
        );
        summary.insert(
            "fold_val_years".into(),
            out.folds
                .iter()
                .map(|f| serde_json::Value::from(f.val_years.clone()))
                .collect::<Vec<_>>()
                .into(),
        );
        (out.trainer, out.test_report, out.chosen_epochs)
    };

    let meta = CheckpointMeta {
        target_transform: train_cfg.target_transform.name().into(),
        crop_names,
        trained_epochs,
        seed: train_cfg.seed,
    };
    save_checkpoint(&ck_dir, &model_cfg, &trainer.params, &trainer.stats, &meta)?;
    let written = write_report(&report, &out_dir)?;

    let pooled = report
        .pooled("test")
        .ok_or_else(|| CliError::Runtime("no test rows in final report".into()))?;
    summary.insert("test_n".into(), pooled.n.into());
    if let Some(r2) = pooled.r2 {
        summary.insert("test_r2".into(), r2.into());
    }
    summary.insert("test_rmse_t_ha".into(), pooled.rmse.into());
    summary.insert("test_mae_t_ha".into(), pooled.mae.into());
    let spath = out_dir.join("train_summary.json");
    std::fs::write(
        &spath,
        serde_json::to_string_pretty(&serde_json::Value::Object(summary)).expect("summary"),
    )?;

    println!("checkpoint: {}", ck_dir.display());
    for p in written {
        println!("report: {}", p.display());
    }
    println!("summary: {}", spath.display());
    let r2s = pooled.r2.map_or("nan".to_string(), |v| format!("{v:.6}"));
    println!(
        "test r2={r2s} rmse_t_ha={:.6} mae_t_ha={:.6} n={}",
        pooled.rmse, pooled.mae, pooled.n
    );
    Ok(())
}

fn parse_meta_transform(meta: &CheckpointMeta) -> Result<TargetTransform, CliError> {
    meta.target_transform
        .parse()
        .map_err(|e: String| CliError::Runtime(format!("checkpoint meta: {e}")))
}

fn cmd_predict(a: PredictArgs, file: &FileConfig) -> Result<(), CliError> {
    let ck = required(a.checkpoint.or(file.path("checkpoint")?), "checkpoint")?;
    let sample_dir = required(a.sample.or(file.path("sample")?), "sample")?;
    let month = a.month.or(file.usize("month")?);
    if let Some(m) = month {
        if !(1..=12).contains(&m) {
            return Err(CliError::Usage(format!("--month must be in 1..=12, got {m}")));
        }
    }
    let (cfg, params, stats, meta) = load_checkpoint(&ck)?;
    let tf = parse_meta_transform(&meta)?;
    let sample = data::load_sample_dir(&sample_dir)?;
    let series = crate::model::predict_series(&cfg, &params, &stats, &sample)?;
    let values: Vec<f64> = series.iter().map(|&z| tf.invert(z)).collect();
    if let Some(m) = month {
        if m > values.len() {
            return Err(CliError::Usage(format!(
                "--month {m} exceeds the {}-month series",
                values.len()
            )));
        }
    }
    match month {
        Some(m) => println!("{:.6}", values[m - 1]),
        None => {
            for v in values {
                println!("{v:.6}");
            }
        }
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, file: &FileConfig) -> Result<(), CliError> {
    let ck = required(a.checkpoint.or(file.path("checkpoint")?), "checkpoint")?;
    let data_dir = required(a.data.or(file.path("data")?), "data")?;
    let out_dir = required(a.out.or(file.path("out")?), "out")?;
    let years = a
        .years
        .or(file.string("years")?)
        .map(|s| parse_years(&s, "years"))
        .transpose()?;

    let (cfg, params, stats, meta) = load_checkpoint(&ck)?;
    let tf = parse_meta_transform(&meta)?;
    let manifest = DatasetManifest::read(&data_dir)?;
    let mut rows = Vec::new();
    for entry in &manifest.entries {
        if let Some(ys) = &years {
            if !ys.contains(&entry.year) {
                continue;
            }
        }
        let sample = manifest.load_sample(entry)?;
        let series = crate::model::predict_series(&cfg, &params, &stats, &sample)?;
        rows.push(ScatterRow {
            observed: sample.yield_label,
            predicted: tf.invert(series[cfg.months - 1]),
            crop: sample.crop_name.clone(),
            year: sample.year,
            county: sample.county_id.clone(),
            split: "eval".into(),
        });
    }
    if rows.is_empty() {
        return Err(CliError::Runtime("no samples matched the year filter".into()));
    }
    eprintln!("[eval] {} samples", rows.len());
    let report = metrics::EvalReport::from_scatter(rows);
    for p in write_report(&report, &out_dir)? {
        println!("report: {}", p.display());
    }
    let pooled = report.pooled("eval").expect("nonempty eval split");
    let r2s = pooled.r2.map_or("nan".to_string(), |v| format!("{v:.6}"));
    println!(
        "eval r2={r2s} rmse_t_ha={:.6} mae_t_ha={:.6} n={}",
        pooled.rmse, pooled.mae, pooled.n
    );
    Ok(())
}

struct SuiteLine {
    name: &'static str,
    max_err: f64,
    tol: f64,
    detail: String,
    pass: bool,
}

fn print_suite(lines: &[SuiteLine]) -> bool {
    let mut all = true;
    for l in lines {
        println!(
            "{:<22} max_err {:.3e}  tol {:.1e}  {}  [{}]",
            l.name,
            l.max_err,
            l.tol,
            l.detail,
            if l.pass { "pass" } else { "FAIL" }
        );
        all &= l.pass;
    }
    all
}

fn cmd_verify(a: VerifyArgs, file: &FileConfig) -> Result<(), CliError> {
    let seed = a.seed.or(file.u64("seed")?).unwrap_or(0);
    let trials = a.trials.or(file.usize("trials")?).unwrap_or(25);
    let inject = a.inject_grad_bug || file.flag("inject-grad-bug")?;
    if inject {
        eprintln!("[verify] negative control: GELU backward rule corrupted");
    }
    let mut lines = Vec::new();

    for e in primitive_gradient_suite(trials, seed, inject) {
        lines.push(SuiteLine {
            name: "grad-primitive",
            max_err: e.max_rel_err,
            tol: e.tol,
            detail: format!("{} ({} coords)", e.name, e.trials),
            pass: e.pass,
        });
    }

    let rep = model_gradient_check(seed, 2, inject)?;
    lines.push(SuiteLine {
        name: "grad-model",
        max_err: rep.max_rel_err,
        tol: rep.tol,
        detail: format!("tiny config ({} coords)", rep.n_coords),
        pass: rep.pass,
    });

    lines.push(metric_suite(seed, 200.max(trials)));
    lines.push(sampler_suite(seed, 50.max(trials)));
    lines.push(container_suite(seed)?);

    if print_suite(&lines) {
        println!("verify: all suites passed");
        Ok(())
    } else {
        Err(CliError::VerifyFailed)
    }
}

/// Compares the metric implementations against direct-formula recomputation
/// on random vectors, plus one fixed worked example.
fn metric_suite(seed: u64, trials: usize) -> SuiteLine {
    let mut r = rng::stream(seed, "verify-metrics", &[]);
    let mut max_err = 0.0f64;
    for _ in 0..trials {
        let n = 2 + (rng::below(&mut r, 60) as usize);
        let obs: Vec<f64> = (0..n).map(|_| rng::uniform(&mut r, 0.0, 50.0)).collect();
        let pred: Vec<f64> = obs
            .iter()
            .map(|o| o + rng::uniform(&mut r, -5.0, 5.0))
            .collect();
        let mean = obs.iter().sum::<f64>() / n as f64;
        let ss_tot: f64 = obs.iter().map(|o| (o - mean) * (o - mean)).sum();
        if ss_tot == 0.0 {
            continue;
        }
        let ss_res: f64 = obs
            .iter()
            .zip(&pred)
            .map(|(o, p)| (o - p) * (o - p))
            .sum();
        let want_r2 = 1.0 - ss_res / ss_tot;
        let want_rmse = (ss_res / n as f64).sqrt();
        let want_mae =
            obs.iter().zip(&pred).map(|(o, p)| (o - p).abs()).sum::<f64>() / n as f64;
        let got_r2 = metrics::r2(&obs, &pred).expect("non-constant obs");
        let (got_rmse, got_mae) = metrics::rmse_mae(&obs, &pred).expect("same length");
        for (g, w) in [(got_r2, want_r2), (got_rmse, want_rmse), (got_mae, want_mae)] {
            max_err = max_err.max((g - w).abs());
        }
    }
    let fixed = metrics::r2(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).expect("worked example");
    max_err = max_err.max((fixed - 0.5).abs());
    SuiteLine {
        name: "metrics-oracle",
        max_err,
        tol: 1e-9,
        detail: format!("{trials} random vectors + worked example"),
        pass: max_err < 1e-9,
    }
}

/// Checks quota allocation: the canonical 4:2:1:1 example, conservation,
/// per-stratum caps, and independence from the sampling seed.
fn sampler_suite(seed: u64, trials: usize) -> SuiteLine {
    let mut failures = 0usize;
    let canonical = allocate_quotas(&[400, 200, 100, 100], 256);
    if canonical != vec![128, 64, 32, 32] {
        failures += 1;
    }
    let mut r = rng::stream(seed, "verify-sampler", &[]);
    for _ in 0..trials {
        let n = 1 + (rng::below(&mut r, 6) as usize);
        let counts: Vec<usize> = (0..n).map(|_| rng::below(&mut r, 500) as usize).collect();
        let total: usize = counts.iter().sum();
        let k = rng::below(&mut r, 300) as usize;
        let q = allocate_quotas(&counts, k);
        let qsum: usize = q.iter().sum();
        if qsum != k.min(total) {
            failures += 1;
        }
        if q.iter().zip(&counts).any(|(qi, ci)| qi > ci) {
            failures += 1;
        }
        // Quotas are a function of counts alone, so recomputation matches.
        if q != allocate_quotas(&counts, k) {
            failures += 1;
        }
    }
    SuiteLine {
        name: "sampler-quotas",
        max_err: failures as f64,
        tol: 1.0,
        detail: format!("canonical example + {trials} random count vectors"),
        pass: failures == 0,
    }
}

/// Round-trips random tensors through the binary container bit-exactly and
/// confirms corrupted headers surface structured errors.
fn container_suite(seed: u64) -> Result<SuiteLine, CliError> {
    let dir = std::env::temp_dir().join(format!("cropcast-verify-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let mut r = rng::stream(seed, "verify-container", &[]);
    let mut failures = 0usize;
    let n_shapes = 25;
    for i in 0..n_shapes {
        let rank = 1 + (rng::below(&mut r, 3) as usize);
        let shape: Vec<usize> = (0..rank).map(|_| 1 + rng::below(&mut r, 6) as usize).collect();
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel)
            .map(|_| rng::normal(&mut r, 0.0, 10.0))
            .collect();
        let t = Tensor::new(shape, data).expect("valid shape");
        let path = dir.join(format!("t{i}.cyb"));
        data::write_container(&t, &path)?;
        let back = data::read_container(&path)?;
        let same = back.shape == t.shape
            && back
                .data
                .iter()
                .zip(&t.data)
                .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            failures += 1;
        }
        // Corrupt one header byte: parsing must fail with a structured
        // error rather than returning a tensor.
        let mut bytes = std::fs::read(&path)?;
        let pos = rng::below(&mut r, 16) as usize;
        bytes[pos] ^= 0xFF;
        if data::parse_container(&bytes).is_ok() {
            failures += 1;
        }
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(SuiteLine {
        name: "container-roundtrip",
        max_err: failures as f64,
        tol: 1.0,
        detail: format!("{n_shapes} shapes + header corruption"),
        pass: failures == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn year_parsing() {
        assert_eq!(parse_years("2008:2010", "years").unwrap(), vec![2008, 2009, 2010]);
        assert_eq!(parse_years("2015", "years").unwrap(), vec![2015]);
        let err = parse_years("2015:2008", "years").unwrap_err();
        match err {
            CliError::Usage(msg) => assert!(msg.contains("after end year")),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_years("08-15", "years").is_err());
    }

    #[test]
    fn pixel_range_parsing() {
        assert_eq!(parse_pixel_range("6:12", "pixels-n").unwrap(), (6, 12));
        assert_eq!(parse_pixel_range("5", "pixels-n").unwrap(), (5, 5));
        assert!(parse_pixel_range("0:4", "pixels-n").is_err());
        assert!(parse_pixel_range("9:2", "pixels-n").is_err());
    }

    #[test]
    fn config_file_types_are_enforced() {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(r#"{"counties": 4, "years": "2008:2012", "noise": 0.1, "fixed-split": true}"#)
                .unwrap();
        let f = FileConfig(map);
        assert_eq!(f.usize("counties").unwrap(), Some(4));
        assert_eq!(f.string("years").unwrap().as_deref(), Some("2008:2012"));
        assert_eq!(f.f64("noise").unwrap(), Some(0.1));
        assert!(f.flag("fixed-split").unwrap());
        assert_eq!(f.usize("missing").unwrap(), None);
        assert!(f.u64("years").is_err());
        assert!(f.string("counties").is_err());
    }

    #[test]
    fn error_codes_map_to_exit_codes() {
        assert_eq!(CliError::Usage("x".into()).code(), 2);
        assert_eq!(CliError::Runtime("x".into()).code(), 1);
        assert_eq!(CliError::VerifyFailed.code(), 3);
        let e: CliError = TrainError::TooFewYears { non_test: 2, folds: 5 }.into();
        assert_eq!(e.code(), 2);
        let e: CliError = TrainError::NoSamples("test".into()).into();
        assert_eq!(e.code(), 1);
    }

    #[test]
    fn verify_suites_pass_clean_and_fail_injected() {
        assert!(metric_suite(1, 50).pass);
        assert!(sampler_suite(1, 20).pass);
        assert!(container_suite(1).unwrap().pass);
    }
}
