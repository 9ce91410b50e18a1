//! Experiment orchestration: configuration, single runs, lambda sweeps and bound checks.
//!
//! Configuration is a flat `key = value` file. Every run writes the fully
//! resolved configuration back out as `manifest.txt`, which is itself a valid
//! config file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::dataset::{self, Delimiter, FormatSpec, InteractionLog, SplitBundle, SplitRatios};
use crate::estimator::{self, ExposureProxy, GammaConfig, GammaEstimate, GammaRequest};
use crate::eval::{self, EvalConfig, MetricsReport};
use crate::model::{self, Model, ModelKind, ModelSpec};
use crate::theory::{self, BoundInputs, TheoryError};
use crate::train::{self, EarlyStopping, EpochRecord, IplScope, NoopObserver, OptimizerKind, TrainConfig};

/// Environment variable that anchors relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "IPL_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Config,
    Parse,
    Split,
    Train,
    Recommend,
    Evaluate,
    Theory,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Config => "config",
            Stage::Parse => "parse",
            Stage::Split => "split",
            Stage::Train => "train",
            Stage::Recommend => "recommend",
            Stage::Evaluate => "evaluate",
            Stage::Theory => "theory",
            Stage::Output => "output",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct ExperimentError {
    pub stage: Stage,
    pub message: String,
}

impl ExperimentError {
    pub fn new(stage: Stage, message: impl fmt::Display) -> Self {
        Self {
            stage,
            message: message.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

trait StageExt<T> {
    fn stage(self, stage: Stage) -> Result<T>;
}

impl<T, E: fmt::Display> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: Stage) -> Result<T> {
        self.map_err(|e| ExperimentError::new(stage, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointFormat {
    Json,
    Binary,
}

impl CheckpointFormat {
    fn file_name(self) -> &'static str {
        match self {
            CheckpointFormat::Json => "model.json",
            CheckpointFormat::Binary => "model.bin",
        }
    }
}

/// Lambda grid of a sweep. Explicit values win over the log-spaced range.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
    pub values: Option<Vec<f64>>,
    pub parallel: bool,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            min: 1e-6,
            max: 1e-2,
            points: 20,
            values: None,
            parallel: false,
        }
    }
}

impl SweepSpec {
    pub fn grid(&self) -> Vec<f64> {
        match &self.values {
            Some(v) => v.clone(),
            None => log_grid(self.min, self.max, self.points),
        }
    }
}

/// `points` values from `min` to `max` with a constant ratio between neighbours.
pub fn log_grid(min: f64, max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![min],
        n => {
            let (a, b) = (min.ln(), max.ln());
            (0..n)
                .map(|j| {
                    if j == 0 {
                        min
                    } else if j == n - 1 {
                        max
                    } else {
                        (a + (b - a) * j as f64 / (n - 1) as f64).exp()
                    }
                })
                .collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_path: Option<PathBuf>,
    /// Name used to look up a known exposure exponent.
    pub dataset_name: Option<String>,
    pub format: FormatSpec,
    /// Per-item subsample down to roughly this many interactions.
    pub subsample_interactions: Option<usize>,
    pub subsample_seed: u64,
    pub ratios: SplitRatios,
    pub split_seed: u64,
    pub model_kind: ModelKind,
    pub dim: usize,
    pub n_layers: usize,
    pub init_scale: Option<f64>,
    pub model_seed: u64,
    /// `gamma` inside is overwritten by the resolved gamma source at run time.
    pub train: TrainConfig,
    pub gamma: GammaConfig,
    pub k: usize,
    pub mi_bins: usize,
    pub snips_eta: Option<f64>,
    pub parallel: bool,
    pub sweep: SweepSpec,
    pub output_dir: PathBuf,
    pub checkpoint: CheckpointFormat,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_path: None,
            dataset_name: None,
            format: FormatSpec::new(Delimiter::Tab),
            subsample_interactions: None,
            subsample_seed: 0,
            ratios: SplitRatios::default(),
            split_seed: 0,
            model_kind: ModelKind::Mf,
            dim: 64,
            n_layers: 3,
            init_scale: None,
            model_seed: 0,
            train: TrainConfig::default(),
            gamma: GammaConfig::default(),
            k: 20,
            mi_bins: 10,
            snips_eta: None,
            parallel: false,
            sweep: SweepSpec::default(),
            output_dir: PathBuf::from("runs/default"),
            checkpoint: CheckpointFormat::Json,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| ExperimentError::new(Stage::Config, format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse_value(key, value).map(Some)
    }
}

fn opt_str<T: fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map(|x| x.to_string()).unwrap_or_else(|| "none".into())
}

impl ExperimentConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ExperimentError::new(Stage::Config, format!("line {}: expected key = value", n + 1))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::new(Stage::Config, format!("{}: {e}", path.display())))?;
        Self::from_kv_str(&text)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| {
            ExperimentError::new(Stage::Config, format!("override {assignment:?} is not key=value"))
        })?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "dataset.path" => self.dataset_path = parse_opt::<String>(key, v)?.map(PathBuf::from),
            "dataset.name" => self.dataset_name = parse_opt(key, v)?,
            "dataset.delimiter" => self.format.delimiter = parse_value(key, v)?,
            "dataset.user_col" => self.format.user_col = parse_value(key, v)?,
            "dataset.item_col" => self.format.item_col = parse_value(key, v)?,
            "dataset.rating_col" => self.format.rating_col = parse_opt(key, v)?,
            "dataset.rating_threshold" => self.format.rating_threshold = parse_opt(key, v)?,
            "dataset.has_header" => self.format.has_header = parse_value(key, v)?,
            "dataset.subsample_interactions" => self.subsample_interactions = parse_opt(key, v)?,
            "dataset.subsample_seed" => self.subsample_seed = parse_value(key, v)?,
            "split.train" => self.ratios.train = parse_value(key, v)?,
            "split.validation" => self.ratios.validation = parse_value(key, v)?,
            "split.test" => self.ratios.test = parse_value(key, v)?,
            "split.seed" => self.split_seed = parse_value(key, v)?,
            "model.kind" => self.model_kind = parse_value(key, v)?,
            "model.dim" => self.dim = parse_value(key, v)?,
            "model.layers" => self.n_layers = parse_value(key, v)?,
            "model.init_scale" => self.init_scale = parse_opt(key, v)?,
            "model.seed" => self.model_seed = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, v)?,
            "train.l2" => self.train.l2 = parse_value(key, v)?,
            "train.lambda_f" => self.train.lambda_f = parse_value(key, v)?,
            "train.optimizer" => self.train.optimizer = parse_value(key, v)?,
            "train.seed" => self.train.seed = parse_value(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_value(key, v)?,
            "train.ipl_scope" => self.train.ipl_scope = parse_value(key, v)?,
            "train.steps_per_epoch" => self.train.steps_per_epoch = parse_opt(key, v)?,
            "train.early_stopping_patience" => {
                let k = self.train.early_stopping.map(|e| e.k).unwrap_or(20);
                self.train.early_stopping =
                    parse_opt::<usize>(key, v)?.map(|patience| EarlyStopping { patience, k });
            }
            "train.early_stopping_k" => {
                let k = parse_value(key, v)?;
                if let Some(es) = self.train.early_stopping.as_mut() {
                    es.k = k;
                }
            }
            "gamma.dataset" => self.gamma.dataset = parse_opt(key, v)?,
            "gamma.value" => self.gamma.value = parse_opt(key, v)?,
            "eval.k" => self.k = parse_value(key, v)?,
            "eval.mi_bins" => self.mi_bins = parse_value(key, v)?,
            "eval.snips_eta" => self.snips_eta = parse_opt(key, v)?,
            "eval.parallel" => self.parallel = parse_value(key, v)?,
            "sweep.min" => self.sweep.min = parse_value(key, v)?,
            "sweep.max" => self.sweep.max = parse_value(key, v)?,
            "sweep.points" => self.sweep.points = parse_value(key, v)?,
            "sweep.values" => {
                self.sweep.values = if v.is_empty() || v == "none" {
                    None
                } else {
                    Some(
                        v.split(',')
                            .map(|x| parse_value::<f64>(key, x.trim()))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "sweep.parallel" => self.sweep.parallel = parse_value(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            "output.checkpoint" => {
                self.checkpoint = match v {
                    "json" => CheckpointFormat::Json,
                    "bin" | "binary" => CheckpointFormat::Binary,
                    other => {
                        return Err(ExperimentError::new(
                            Stage::Config,
                            format!("{key}: unknown checkpoint format {other:?}"),
                        ))
                    }
                }
            }
            other => {
                return Err(ExperimentError::new(Stage::Config, format!("unknown key {other:?}")));
            }
        }
        Ok(())
    }

    /// Every key with its value, in a stable order.
    pub fn to_kv(&self) -> BTreeMap<&'static str, String> {
        let t = &self.train;
        let f = &self.format;
        let mut m = BTreeMap::new();
        let path = self.dataset_path.as_ref().map(|p| p.display().to_string());
        m.insert("dataset.path", opt_str(&path));
        m.insert("dataset.name", opt_str(&self.dataset_name));
        m.insert("dataset.delimiter", f.delimiter.name().to_owned());
        m.insert("dataset.user_col", f.user_col.to_string());
        m.insert("dataset.item_col", f.item_col.to_string());
        m.insert("dataset.rating_col", opt_str(&f.rating_col));
        m.insert("dataset.rating_threshold", opt_str(&f.rating_threshold));
        m.insert("dataset.has_header", f.has_header.to_string());
        m.insert("dataset.subsample_interactions", opt_str(&self.subsample_interactions));
        m.insert("dataset.subsample_seed", self.subsample_seed.to_string());
        m.insert("split.train", self.ratios.train.to_string());
        m.insert("split.validation", self.ratios.validation.to_string());
        m.insert("split.test", self.ratios.test.to_string());
        m.insert("split.seed", self.split_seed.to_string());
        m.insert("model.kind", self.model_kind.to_string());
        m.insert("model.dim", self.dim.to_string());
        m.insert("model.layers", self.n_layers.to_string());
        m.insert("model.init_scale", opt_str(&self.init_scale));
        m.insert("model.seed", self.model_seed.to_string());
        m.insert("train.epochs", t.epochs.to_string());
        m.insert("train.batch_size", t.batch_size.to_string());
        m.insert("train.learning_rate", t.learning_rate.to_string());
        m.insert("train.l2", t.l2.to_string());
        m.insert("train.lambda_f", t.lambda_f.to_string());
        let optimizer = match t.optimizer {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
        };
        m.insert("train.optimizer", optimizer.into());
        m.insert("train.seed", t.seed.to_string());
        m.insert("train.eval_every", t.eval_every.to_string());
        let scope = match t.ipl_scope {
            IplScope::Batch => "batch",
            IplScope::Full => "full",
        };
        m.insert("train.ipl_scope", scope.into());
        m.insert("train.steps_per_epoch", opt_str(&t.steps_per_epoch));
        m.insert(
            "train.early_stopping_patience",
            opt_str(&t.early_stopping.map(|e| e.patience)),
        );
        m.insert(
            "train.early_stopping_k",
            t.early_stopping.map(|e| e.k).unwrap_or(20).to_string(),
        );
        m.insert("gamma.dataset", opt_str(&self.gamma.dataset));
        m.insert("gamma.value", opt_str(&self.gamma.value));
        m.insert("eval.k", self.k.to_string());
        m.insert("eval.mi_bins", self.mi_bins.to_string());
        m.insert("eval.snips_eta", opt_str(&self.snips_eta));
        m.insert("eval.parallel", self.parallel.to_string());
        m.insert("sweep.min", self.sweep.min.to_string());
        m.insert("sweep.max", self.sweep.max.to_string());
        m.insert("sweep.points", self.sweep.points.to_string());
        let values = self
            .sweep
            .values
            .as_ref()
            .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(","));
        m.insert("sweep.values", opt_str(&values));
        m.insert("sweep.parallel", self.sweep.parallel.to_string());
        m.insert("output.dir", self.output_dir.display().to_string());
        let ckpt = match self.checkpoint {
            CheckpointFormat::Json => "json",
            CheckpointFormat::Binary => "binary",
        };
        m.insert("output.checkpoint", ckpt.into());
        m
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_kv() {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    /// The exposure exponent used for training and evaluation.
    pub fn resolved_gamma(&self) -> Result<f64> {
        let mut g = self.gamma.clone();
        if g.dataset.is_none() {
            g.dataset = self.dataset_name.clone();
        }
        g.configured().stage(Stage::Config)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        self.ratios.validate().stage(Stage::Config)?;
        let mut t = self.train.clone();
        t.gamma = self.resolved_gamma()?;
        t.validate().stage(Stage::Config)?;
        if self.dim == 0 {
            return Err(ExperimentError::new(Stage::Config, "model.dim must be positive"));
        }
        if self.k == 0 || self.mi_bins == 0 {
            return Err(ExperimentError::new(Stage::Config, "eval.k and eval.mi_bins must be positive"));
        }
        if self.dataset_path.is_none() {
            return Err(ExperimentError::new(Stage::Config, "dataset.path is not set"));
        }
        Ok(())
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let mut t = self.train.clone();
        t.gamma = self.resolved_gamma()?;
        Ok(t)
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        Ok(EvalConfig {
            k: self.k,
            mi_bins: self.mi_bins,
            snips_eta: self.snips_eta,
            gamma: self.resolved_gamma()?,
            parallel: self.parallel,
        })
    }

    /// Output directory, anchored at `$IPL_OUTPUT_ROOT` when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

/// Reads and optionally subsamples the configured dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<InteractionLog> {
    let path = cfg
        .dataset_path
        .as_ref()
        .ok_or_else(|| ExperimentError::new(Stage::Config, "dataset.path is not set"))?;
    let parsed = dataset::parse_file(path, &cfg.format)
        .map_err(|e| ExperimentError::new(Stage::Parse, format!("{}: {e}", path.display())))?;
    log::info!(
        "loaded {} interactions ({} users, {} items); {} malformed, {} filtered, {} duplicate rows",
        parsed.log.n_interactions(),
        parsed.log.n_users(),
        parsed.log.n_items(),
        parsed.report.malformed,
        parsed.report.filtered,
        parsed.report.duplicates
    );
    match cfg.subsample_interactions {
        Some(target) if target < parsed.log.n_interactions() => {
            let fraction = target as f64 / parsed.log.n_interactions() as f64;
            dataset::subsample_per_item(&parsed.log, fraction, cfg.subsample_seed).stage(Stage::Parse)
        }
        _ => Ok(parsed.log),
    }
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<SplitBundle> {
    let log = load_dataset(cfg)?;
    dataset::stratified_split(&log, cfg.ratios, cfg.split_seed).stage(Stage::Split)
}

/// A trained model with its trace and test metrics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: Model,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
    pub run: model::RecommendationRun,
}

pub fn init_model(cfg: &ExperimentConfig, split: &SplitBundle) -> Result<Model> {
    let spec = ModelSpec {
        kind: cfg.model_kind,
        n_users: split.train.n_users(),
        n_items: split.train.n_items(),
        dim: cfg.dim,
        n_layers: if cfg.model_kind == ModelKind::Mf { 0 } else { cfg.n_layers },
        init_scale: cfg.init_scale,
    };
    let mut model = Model::init(&spec, cfg.model_seed).stage(Stage::Train)?;
    if cfg.model_kind == ModelKind::LightGcn {
        model.attach_graph(&split.train).stage(Stage::Train)?;
    }
    Ok(model)
}

/// Test users: everyone with at least one test interaction.
pub fn test_users(test: &InteractionLog) -> Vec<u32> {
    (0..test.n_users() as u32).filter(|&u| test.user_degree(u) > 0).collect()
}

/// Top-k lists for the test users, excluding training positives, and their metrics.
pub fn evaluate_model(model: &Model, split: &SplitBundle, cfg: &EvalConfig) -> Result<(model::RecommendationRun, MetricsReport)> {
    let scorer = model.scorer().stage(Stage::Recommend)?;
    let run = model::top_k(&scorer, &test_users(&split.test), cfg.k, Some(&split.train), cfg.parallel)
        .stage(Stage::Recommend)?;
    let q_star = dataset::popularity(&split.train).q_star;
    let metrics = eval::evaluate(&run, &split.test, &q_star, cfg).stage(Stage::Evaluate)?;
    Ok((run, metrics))
}

/// Trains a fresh model on `split` with the given `lambda_f` and evaluates it on the test part.
pub fn fit_and_evaluate(cfg: &ExperimentConfig, split: &SplitBundle, lambda_f: f64) -> Result<FitResult> {
    let mut tc = cfg.train_config()?;
    tc.lambda_f = lambda_f;
    let model = init_model(cfg, split)?;
    let out = train::train(model, split, &tc, &mut NoopObserver).stage(Stage::Train)?;
    let (run, metrics) = evaluate_model(&out.model, split, &cfg.eval_config()?)?;
    Ok(FitResult {
        model: out.model,
        trace: out.trace,
        best_epoch: out.best_epoch,
        metrics,
        run,
    })
}

const FAILED_MARKER: &str = "FAILED";

fn write_file(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| ExperimentError::new(Stage::Output, format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    write(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| ExperimentError::new(Stage::Output, format!("{}: {e}", path.display())))
}

fn mark_failed(dir: &Path, err: &ExperimentError) {
    let _ = fs::write(dir.join(FAILED_MARKER), format!("stage = {}\nmessage = {}\n", err.stage, err.message));
}

fn prepare_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_output_dir();
    fs::create_dir_all(&dir).map_err(|e| ExperimentError::new(Stage::Output, format!("{}: {e}", dir.display())))?;
    let _ = fs::remove_file(dir.join(FAILED_MARKER));
    fs::write(dir.join("manifest.txt"), cfg.to_kv_string()).stage(Stage::Output)?;
    Ok(dir)
}

/// Runs `body` inside the output directory, leaving a `FAILED` marker on error.
fn guarded<T>(cfg: &ExperimentConfig, body: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
    cfg.validate()?;
    let dir = prepare_dir(cfg)?;
    body(&dir).inspect_err(|e| mark_failed(&dir, e))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub metrics: MetricsReport,
    pub trace: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// parse, split, train, recommend, evaluate; writes the checkpoint, `metrics.json`,
/// `loss.csv`, `recommendations.tsv` and `manifest.txt`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    guarded(cfg, |dir| {
        let split = load_split(cfg)?;
        split.write_to(dir.join("split")).stage(Stage::Output)?;
        let fit = fit_and_evaluate(cfg, &split, cfg.train.lambda_f)?;
        fit.model
            .save(dir.join(cfg.checkpoint.file_name()))
            .stage(Stage::Output)?;
        write_file(&dir.join("metrics.json"), |w| {
            fit.metrics.write_json(&mut *w).map_err(std::io::Error::other)
        })?;
        write_file(&dir.join("loss.csv"), |w| train::write_trace_csv(&fit.trace, w))?;
        write_file(&dir.join("recommendations.tsv"), |w| fit.run.write_tsv(w, split.train.ids()))?;
        Ok(RunSummary {
            dir: dir.to_path_buf(),
            metrics: fit.metrics,
            trace: fit.trace,
            best_epoch: fit.best_epoch,
        })
    })
}

/// Evaluates a saved checkpoint against the split the config reproduces.
pub fn evaluate_checkpoint(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<MetricsReport> {
    cfg.validate()?;
    let split = load_split(cfg)?;
    let mut model = Model::load(checkpoint).stage(Stage::Evaluate)?;
    if model.n_users() != split.train.n_users() || model.n_items() != split.train.n_items() {
        return Err(ExperimentError::new(
            Stage::Evaluate,
            format!(
                "checkpoint is {}x{} but the split has {} users and {} items",
                model.n_users(),
                model.n_items(),
                split.train.n_users(),
                split.train.n_items()
            ),
        ));
    }
    if model.kind() == ModelKind::LightGcn {
        model.attach_graph(&split.train).stage(Stage::Evaluate)?;
    }
    Ok(evaluate_model(&model, &split, &cfg.eval_config()?)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub lambda_f: f64,
    pub baseline: bool,
    pub metrics: Option<MetricsReport>,
    /// `lambda_f * L_IPL` on the probe batch after training.
    pub ipl_term: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    pub fn inv_di(&self) -> Option<f64> {
        self.metrics.as_ref().and_then(|m| m.di).map(|d| 1.0 / d)
    }
}

pub const SWEEP_CSV_HEADER: &str =
    "lambda_f,status,recall_snips,inv_di,precision,recall,ndcg,mi,di,ipl_term,error";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let status = if r.error.is_some() {
            "error"
        } else if r.baseline {
            "baseline"
        } else {
            "ok"
        };
        let m = r.metrics.as_ref();
        writeln!(
            out,
            "{},{status},{},{},{},{},{},{},{},{},{}",
            r.lambda_f,
            opt(m.map(|m| m.snips_recall)),
            opt(r.inv_di()),
            opt(m.map(|m| m.precision_at_k)),
            opt(m.map(|m| m.recall_at_k)),
            opt(m.map(|m| m.ndcg_at_k)),
            opt(m.map(|m| m.mi)),
            opt(m.and_then(|m| m.di)),
            opt(r.ipl_term),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        )?;
    }
    Ok(())
}

fn sweep_point(cfg: &ExperimentConfig, split: &SplitBundle, lambda_f: f64, baseline: bool) -> (SweepRow, Option<Vec<EpochRecord>>) {
    match fit_and_evaluate(cfg, split, lambda_f) {
        Ok(fit) => {
            let last = fit.trace.last().map(|r| r.loss.l_ipl);
            (
                SweepRow {
                    lambda_f,
                    baseline,
                    metrics: Some(fit.metrics),
                    ipl_term: last.map(|l| lambda_f * l),
                    error: None,
                },
                Some(fit.trace),
            )
        }
        Err(e) => {
            log::warn!("sweep point lambda_f = {lambda_f} failed: {e}");
            (
                SweepRow {
                    lambda_f,
                    baseline,
                    metrics: None,
                    ipl_term: None,
                    error: Some(e.to_string()),
                },
                None,
            )
        }
    }
}

/// Runs the lambda grid plus a `lambda_f = 0` baseline on one split.
/// Row 0 of the result is the baseline; failed points become error rows.
pub fn sweep_on_split(cfg: &ExperimentConfig, split: &SplitBundle) -> Result<Vec<(SweepRow, Option<Vec<EpochRecord>>)>> {
    let grid = cfg.sweep.grid();
    if grid.is_empty() {
        return Err(ExperimentError::new(Stage::Config, "sweep grid is empty"));
    }
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        return Err(ExperimentError::new(Stage::Config, format!("invalid lambda_f {bad} in grid")));
    }
    let points: Vec<(f64, bool)> = std::iter::once((0.0, true))
        .chain(grid.into_iter().map(|l| (l, false)))
        .collect();
    Ok(if cfg.sweep.parallel {
        points
            .par_iter()
            .map(|&(l, b)| sweep_point(cfg, split, l, b))
            .collect()
    } else {
        points.iter().map(|&(l, b)| sweep_point(cfg, split, l, b)).collect()
    })
}

#[derive(Debug, Clone)]
pub struct SweepSummary {
    pub dir: PathBuf,
    pub rows: Vec<SweepRow>,
}

/// Writes `sweep.csv`, `sweep.json` and per-point `points/NN/{metrics.json,loss.csv}`.
pub fn sweep_lambda(cfg: &ExperimentConfig) -> Result<SweepSummary> {
    guarded(cfg, |dir| {
        let split = load_split(cfg)?;
        let results = sweep_on_split(cfg, &split)?;
        for (idx, (row, trace)) in results.iter().enumerate() {
            let pdir = dir.join("points").join(format!("{idx:02}"));
            fs::create_dir_all(&pdir).stage(Stage::Output)?;
            if let Some(m) = &row.metrics {
                write_file(&pdir.join("metrics.json"), |w| m.write_json(&mut *w).map_err(std::io::Error::other))?;
            }
            if let Some(t) = trace {
                write_file(&pdir.join("loss.csv"), |w| train::write_trace_csv(t, w))?;
            }
        }
        let rows: Vec<SweepRow> = results.into_iter().map(|r| r.0).collect();
        write_file(&dir.join("sweep.csv"), |w| write_sweep_csv(&rows, w))?;
        write_file(&dir.join("sweep.json"), |w| {
            serde_json::to_writer_pretty(&mut *w, &rows).map_err(std::io::Error::other)
        })?;
        Ok(SweepSummary {
            dir: dir.to_path_buf(),
            rows,
        })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropositionConfig {
    pub c: f64,
    pub k: usize,
    pub threshold: f64,
    /// Lower cutoff of the Pareto fit; `None` means the smallest positive degree.
    pub x_min: Option<f64>,
}

impl Default for PropositionConfig {
    fn default() -> Self {
        Self {
            c: 0.99,
            k: 20,
            threshold: 1e-10,
            x_min: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropositionReport {
    pub c: f64,
    pub k: usize,
    pub threshold: f64,
    pub beta: Option<f64>,
    pub x_min: f64,
    pub n_fit: usize,
    /// Users below `x_min` (including zero-degree users) left out of the fit.
    pub dropped_users: usize,
    pub p: Option<f64>,
    pub q: Option<f64>,
    pub bound: Option<f64>,
    pub at_risk_users: usize,
    pub vacuous: bool,
    pub verdict: Verdict,
    pub diagnostic: Option<String>,
    pub seconds: f64,
}

/// Fits the Pareto exponent to `degrees` and evaluates the condition-1 bound.
pub fn check_proposition(degrees: &[u32], pc: &PropositionConfig) -> Result<PropositionReport> {
    let start = Instant::now();
    if degrees.iter().all(|&d| d == 0) {
        return Err(ExperimentError::new(Stage::Theory, TheoryError::NoDegrees));
    }
    let x_min = pc
        .x_min
        .unwrap_or_else(|| degrees.iter().filter(|&&d| d > 0).min().copied().unwrap_or(1) as f64);
    let kept: Vec<f64> = degrees
        .iter()
        .map(|&d| d as f64)
        .filter(|&d| d > 0.0 && d >= x_min)
        .collect();
    let dropped = degrees.len() - kept.len();
    let mut report = PropositionReport {
        c: pc.c,
        k: pc.k,
        threshold: pc.threshold,
        beta: None,
        x_min,
        n_fit: kept.len(),
        dropped_users: dropped,
        p: None,
        q: None,
        bound: None,
        at_risk_users: 0,
        vacuous: false,
        verdict: Verdict::Inconclusive,
        diagnostic: None,
        seconds: 0.0,
    };
    let fit = match theory::fit_pareto_beta(&kept, x_min) {
        Ok(f) => f,
        Err(e @ (TheoryError::Degenerate { .. } | TheoryError::NoDegrees)) => {
            report.diagnostic = Some(e.to_string());
            report.seconds = start.elapsed().as_secs_f64();
            return Ok(report);
        }
        Err(e) => return Err(ExperimentError::new(Stage::Theory, e)),
    };
    report.beta = Some(fit.beta);
    let b = theory::condition1_bound(&BoundInputs {
        user_degrees: degrees.to_vec(),
        k: pc.k,
        c: pc.c,
        beta: fit.beta,
    })
    .stage(Stage::Theory)?;
    report.p = Some(b.p);
    report.q = Some(b.q);
    report.bound = Some(b.bound);
    report.at_risk_users = b.at_risk_users;
    report.vacuous = b.vacuous;
    report.diagnostic = b.diagnostic;
    report.verdict = if !(fit.beta.is_finite() && fit.beta > 1.0) {
        Verdict::Inconclusive
    } else if b.bound < pc.threshold {
        Verdict::Pass
    } else {
        Verdict::Fail
    };
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Training-split user degrees of the configured dataset.
pub fn train_degrees(cfg: &ExperimentConfig) -> Result<Vec<u32>> {
    cfg.ratios.validate().stage(Stage::Config)?;
    let split = load_split(cfg)?;
    Ok(dataset::popularity(&split.train).user_degree)
}

/// Reads `degree count` rows (tab, comma or space separated; `#` comments and a
/// non-numeric header are skipped) and expands them into a degree list.
pub fn read_degree_histogram(path: &Path) -> Result<Vec<u32>> {
    let text = fs::read_to_string(path)
        .map_err(|e| ExperimentError::new(Stage::Parse, format!("{}: {e}", path.display())))?;
    let mut degrees = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c == '\t' || c == ' ')
            .filter(|f| !f.is_empty())
            .collect();
        let parsed = match fields.as_slice() {
            [d, c] => d.parse::<u32>().ok().zip(c.parse::<usize>().ok()),
            _ => None,
        };
        match parsed {
            Some((d, c)) => degrees.extend(std::iter::repeat_n(d, c)),
            None if n == 0 => continue,
            None => {
                return Err(ExperimentError::new(
                    Stage::Parse,
                    format!("{}: line {}: expected `degree count`", path.display(), n + 1),
                ))
            }
        }
    }
    Ok(degrees)
}

pub fn write_degree_histogram<W: Write>(degrees: &[u32], mut out: W) -> std::io::Result<()> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &d in degrees {
        *counts.entry(d).or_default() += 1;
    }
    writeln!(out, "degree\tcount")?;
    for (d, c) in counts {
        writeln!(out, "{d}\t{c}")?;
    }
    Ok(())
}

/// Where the exposure exponent fit takes its proxy from.
pub enum GammaSource<'a> {
    Config,
    /// `item<TAB>exposure` rows keyed by external item id.
    ExposureFile(&'a Path),
    Checkpoint(&'a Path),
}

/// Resolves gamma for the configured dataset against its training split.
pub fn estimate_gamma(cfg: &ExperimentConfig, source: GammaSource<'_>) -> Result<GammaEstimate> {
    let mut gcfg = cfg.gamma.clone();
    if gcfg.dataset.is_none() {
        gcfg.dataset = cfg.dataset_name.clone();
    }
    if let GammaSource::Config = source {
        return estimator::estimate_gamma(&InteractionLog::from_index_pairs(0, 0, []), GammaRequest::ConfigSupplied, &gcfg)
            .stage(Stage::Config);
    }
    let split = load_split(cfg)?;
    let train_log = &split.train;
    match source {
        GammaSource::Config => unreachable!(),
        GammaSource::ExposureFile(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| ExperimentError::new(Stage::Parse, format!("{}: {e}", path.display())))?;
            let mut exposure = vec![0.0; train_log.n_items()];
            let mut unknown = 0usize;
            for line in text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
                let mut it = line.split(['\t', ',']);
                let (Some(item), Some(value)) = (it.next(), it.next()) else {
                    continue;
                };
                let Ok(value) = value.trim().parse::<f64>() else {
                    continue;
                };
                match train_log.ids().items.get(item.trim()) {
                    Some(i) => exposure[i as usize] = value,
                    None => unknown += 1,
                }
            }
            if unknown > 0 {
                log::warn!("{unknown} exposure rows name items outside the dataset");
            }
            estimator::estimate_gamma(train_log, GammaRequest::PowerlawFit(ExposureProxy::Observed(&exposure)), &gcfg)
                .stage(Stage::Evaluate)
        }
        GammaSource::Checkpoint(path) => {
            let mut model = Model::load(path).stage(Stage::Evaluate)?;
            if model.kind() == ModelKind::LightGcn {
                model.attach_graph(train_log).stage(Stage::Evaluate)?;
            }
            estimator::estimate_gamma(train_log, GammaRequest::PowerlawFit(ExposureProxy::Model(&model)), &gcfg)
                .stage(Stage::Evaluate)
        }
    }
}

/// Parses the configured dataset and writes its normalized form and popularity tables.
pub fn ingest(cfg: &ExperimentConfig, out_dir: &Path) -> Result<InteractionLog> {
    let log = load_dataset(cfg)?;
    fs::create_dir_all(out_dir).stage(Stage::Output)?;
    write_file(&out_dir.join("interactions.tsv"), |w| log.write_tsv(w))?;
    let pop = dataset::popularity(&log);
    write_file(&out_dir.join("item_popularity.tsv"), |w| {
        writeln!(w, "item\tq_star")?;
        for (i, q) in pop.q_star.iter().enumerate() {
            writeln!(w, "{}\t{q}", log.ids().items.token(i as u32))?;
        }
        Ok(())
    })?;
    write_file(&out_dir.join("user_degrees.tsv"), |w| write_degree_histogram(&pop.user_degree, w))?;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_is_log_spaced() {
        let g = SweepSpec::default().grid();
        assert_eq!(g.len(), 20);
        assert_eq!(g[0], 1e-6);
        assert_eq!(g[19], 1e-2);
        let ratio = g[1] / g[0];
        for w in g.windows(2) {
            assert!((w[1] / w[0] - ratio).abs() < 1e-9 * ratio);
        }
        assert_eq!(log_grid(1e-3, 1.0, 1), vec![1e-3]);
    }

    #[test]
    fn config_round_trips_through_manifest() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("train.lambda_f=0.001").unwrap();
        cfg.apply_override("sweep.values=0.1, 0.01").unwrap();
        cfg.apply_override("train.early_stopping_patience=3").unwrap();
        cfg.apply_override("dataset.path=/tmp/x.tsv").unwrap();
        cfg.apply_override("gamma.value=1.5").unwrap();
        cfg.apply_override("output.checkpoint=binary").unwrap();
        let back = ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.train.lambda_f, 0.001);
    }

    #[test]
    fn unknown_keys_and_bad_values() {
        let mut cfg = ExperimentConfig::default();
        let e = cfg.apply_override("train.lamda=1").unwrap_err();
        assert_eq!(e.stage, Stage::Config);
        assert!(cfg.apply_override("train.epochs=many").is_err());
        assert!(ExperimentConfig::from_kv_str("just words").is_err());
    }

    #[test]
    fn ratio_error_precedes_data_access() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("split.test", "0.1").unwrap();
        cfg.set("dataset.path", "/nonexistent/ratings.dat").unwrap();
        cfg.set("gamma.value", "1.5").unwrap();
        let e = run_experiment(&cfg).unwrap_err();
        assert_eq!(e.stage, Stage::Config);
        assert!(e.message.contains("ratio"), "{e}");
    }

    #[test]
    fn gamma_from_dataset_name() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("dataset.name", "gowalla").unwrap();
        assert_eq!(cfg.resolved_gamma().unwrap(), 1.285);
        cfg.set("gamma.value", "1.7").unwrap();
        assert_eq!(cfg.resolved_gamma().unwrap(), 1.7);
    }

    #[test]
    fn histogram_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.tsv");
        let degrees = vec![3, 1, 3, 7, 1, 1];
        let mut buf = Vec::new();
        write_degree_histogram(&degrees, &mut buf).unwrap();
        fs::write(&p, buf).unwrap();
        let mut back = read_degree_histogram(&p).unwrap();
        back.sort_unstable();
        assert_eq!(back, vec![1, 1, 1, 3, 3, 7]);
    }

    #[test]
    fn proposition_on_empty_degrees_is_a_stage_error() {
        let e = check_proposition(&[], &PropositionConfig::default()).unwrap_err();
        assert_eq!(e.stage, Stage::Theory);
    }

    #[test]
    fn proposition_degenerate_fit_is_inconclusive() {
        let r = check_proposition(&[5, 5, 5], &PropositionConfig::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Inconclusive);
        assert!(r.diagnostic.is_some());
    }
}
