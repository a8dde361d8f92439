//! `isolayer` command-line tool.
//!
//! Every subcommand takes its parameters as long flags; `--config FILE` loads
//! the same parameters from JSON and overrides the flags key by key. Reports
//! embed the fully resolved configuration, so a report's `config` object is a
//! valid `--config` file for rerunning the command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use isolayer::baselines::{pava_fit_unsorted, platt_fit, PlattConfig};
use isolayer::bias_sim::{gen_piecewise, gen_position_logs, gen_quadratic, ExposurePolicy, LabelModel, PositionBiasScenario};
use isolayer::context::{conditioned_forward, EmbeddingTable};
use isolayer::dataset::LabeledDataset;
use isolayer::dual_tower::{train_dual_tower, Activation, DualTowerConfig, DualTowerModel, LossWeights};
use isolayer::layer::{forward, IsotonicConfig};
use isolayer::metrics::{evaluate, EvalReport};
use isolayer::optim::OptimizerKind;
use isolayer::persist::{
    fmt_f64, load_dataset, load_predictions, save_dataset, save_predictions, to_json_file, Model, ModelEnvelope,
    Prediction,
};
use isolayer::training::{bce_loss, calibrate_frozen, fit, TrainConfig};
use isolayer::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    /// 2 usage or configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(Error::Config(_)) => 2,
            CliError::Core(_) => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "isolayer", version, about = "Monotone calibration layers, classical baselines and position debiasing")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset as CSV.
    Gen(WithConfig<GenConfig>),
    /// Fit an isotonic layer, PAVA or Platt scaling on a dataset's `input` column.
    Fit(WithConfig<FitConfig>),
    /// Fit per-context calibration curves on a scores file.
    Calibrate(WithConfig<CalibrateConfig>),
    /// Train the relevance tower with per-task isotonic heads.
    TrainDual(WithConfig<TrainDualConfig>),
    /// Compute AUC, NE, ECE and O/E for a model on a dataset.
    Eval(WithConfig<EvalConfig>),
    /// Sample a model's calibration curve on a grid.
    ExportCurve(WithConfig<ExportConfig>),
    /// Write per-row predictions.
    Score(WithConfig<ScoreConfig>),
}

#[derive(Debug, Args)]
pub struct WithConfig<T: Args> {
    /// JSON file with the same fields as the flags; its values win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub params: T,
}

fn merge(base: &mut Value, over: Value, at: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v, &path)?,
                    Some(slot) => *slot = v,
                    None => return Err(usage(format!("unknown config key `{path}`"))),
                }
            }
            Ok(())
        }
        _ => Err(usage("config file must contain a JSON object")),
    }
}

/// Flags, overridden by the config file when one is given.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: T, file: Option<&Path>) -> Result<T> {
    let Some(path) = file else { return Ok(flags) };
    let text = std::fs::read_to_string(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let over: Value = serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    let mut base = serde_json::to_value(&flags).map_err(|e| usage(e.to_string()))?;
    merge(&mut base, over, "")?;
    serde_json::from_value(base).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("missing required `--{flag}`")))
}

fn report<T: Serialize>(command: &str, config: &T, body: Value) -> Result<Value> {
    let mut out = json!({
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": serde_json::to_value(config).map_err(|e| usage(e.to_string()))?,
    });
    if let (Value::Object(o), Value::Object(b)) = (&mut out, body) {
        o.extend(b);
    }
    Ok(out)
}

fn write_report(path: &Path, value: &Value) -> Result<()> {
    to_json_file(value, path)?;
    Ok(())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plain data serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum GenKind {
    Quadratic,
    Piecewise,
    Position,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    #[arg(long, value_enum, default_value = "quadratic")]
    pub kind: GenKind,
    /// Number of samples (impressions for `position`).
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub positions: usize,
    #[arg(long, default_value = "oracle-sorted")]
    pub exposure: ExposurePolicy,
    #[arg(long, default_value = "multiplicative")]
    pub label_model: LabelModel,
    /// Weight of the non-relevance feature in the logging score.
    #[arg(long, default_value_t = 1.0)]
    pub confounding: f64,
    /// Simulate the click task only instead of click plus long dwell.
    #[arg(long)]
    pub click_only: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

fn cmd_gen(cfg: &GenConfig) -> Result<()> {
    let out = required(&cfg.out, "out")?;
    let ds = match cfg.kind {
        GenKind::Quadratic => gen_quadratic(cfg.n, cfg.seed)?,
        GenKind::Piecewise => gen_piecewise(cfg.n, cfg.seed)?,
        GenKind::Position => {
            let mut s = if cfg.click_only {
                PositionBiasScenario::click_only(cfg.positions, cfg.n, cfg.seed)
            } else {
                PositionBiasScenario::new(cfg.positions, cfg.n, cfg.seed)
            };
            s.exposure = cfg.exposure;
            s.label_model = cfg.label_model;
            s.confounding = cfg.confounding;
            gen_position_logs(&s)?
        }
    };
    save_dataset(&ds, out)?;
    if let Some(path) = &cfg.report {
        let positives = ds.rows.iter().filter(|r| r.label == 1.0).count();
        let body = json!({
            "rows": ds.len(),
            "feature_dim": ds.feature_dim,
            "positives": positives,
        });
        write_report(path, &report("gen", cfg, body)?)?;
    }
    println!("wrote {} rows to {}", ds.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct LayerArgs {
    #[arg(long, default_value_t = -17.0, allow_negative_numbers = true)]
    pub lower_bound: f64,
    #[arg(long, default_value_t = 8.0, allow_negative_numbers = true)]
    pub upper_bound: f64,
    #[arg(long, default_value_t = 0.05)]
    pub bucket_width: f64,
    #[arg(long, default_value_t = 1)]
    pub units: usize,
}

impl LayerArgs {
    fn config(&self) -> Result<IsotonicConfig> {
        Ok(IsotonicConfig::new(self.lower_bound, self.upper_bound, self.bucket_width, self.units)?)
    }
}

/// Training flags; unset values take the command's defaults.
#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, allow_negative_numbers = true)]
    pub init_weight: Option<f64>,
    #[arg(long)]
    pub lr_decay: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self, d: TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            optimizer: self.optimizer.unwrap_or(d.optimizer),
            seed: self.seed.unwrap_or(d.seed),
            init_weight: self.init_weight.unwrap_or(d.init_weight),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
        }
    }

    fn filled(tc: &TrainConfig) -> Self {
        Self {
            epochs: Some(tc.epochs),
            batch_size: Some(tc.batch_size),
            learning_rate: Some(tc.learning_rate),
            optimizer: Some(tc.optimizer),
            seed: Some(tc.seed),
            init_weight: Some(tc.init_weight),
            lr_decay: Some(tc.lr_decay),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum FitKind {
    Isotonic,
    Pava,
    Platt,
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "isotonic")]
    pub model: FitKind,
    /// Learn one curve per `context_id` through an embedding table.
    #[arg(long)]
    pub conditioned: bool,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn base_rate_loss(labels: &[f64]) -> Result<f64> {
    let p = labels.iter().sum::<f64>() / labels.len() as f64;
    Ok(bce_loss(&vec![p; labels.len()], labels)?.value)
}

fn cmd_fit(cfg: &FitConfig) -> Result<()> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let ds = load_dataset(data)?;
    if ds.is_empty() {
        return Err(Error::Empty("dataset").into());
    }
    let labels = ds.labels();
    let tc = cfg.train.resolve(TrainConfig::default());
    let mut resolved = cfg.clone();
    resolved.train = TrainArgs::filled(&tc);

    let (model, training, final_loss) = match cfg.model {
        FitKind::Isotonic if cfg.conditioned => {
            let layer = cfg.layer.config()?;
            let contexts: Vec<&str> = distinct_contexts(&ds);
            let table = EmbeddingTable::new(&layer, contexts);
            let (params, table, rep) = isolayer::context::fit_conditioned(&ds, &layer, &tc, table)?;
            let loss = rep.final_loss;
            (
                Model::Isotonic {
                    config: layer,
                    params,
                    table: Some(table),
                },
                Some(rep),
                loss,
            )
        }
        FitKind::Isotonic => {
            let layer = cfg.layer.config()?;
            let (params, rep) = fit(&ds, &layer, &tc)?;
            let loss = rep.final_loss;
            (
                Model::Isotonic {
                    config: layer,
                    params,
                    table: None,
                },
                Some(rep),
                loss,
            )
        }
        FitKind::Pava => {
            let function = pava_fit_unsorted(&ds.inputs()?, &labels)?;
            let model = Model::Pava { function };
            let loss = bce_loss(&predict_primary(&model, &ds)?, &labels)?.value;
            (model, None, loss)
        }
        FitKind::Platt => {
            let params = platt_fit(&ds.inputs()?, &labels, &PlattConfig::default())?;
            let model = Model::Platt { params };
            let loss = bce_loss(&predict_primary(&model, &ds)?, &labels)?.value;
            (model, None, loss)
        }
    };
    let config = to_value(&resolved);
    let env = ModelEnvelope::new(model, config, training.clone());
    env.save(out)?;
    let base = base_rate_loss(&labels)?;
    if let Some(path) = &cfg.report {
        let body = json!({
            "model_kind": env.model.kind(),
            "rows": ds.len(),
            "final_loss": final_loss,
            "base_rate_loss": base,
            "epochs": training.as_ref().map_or(0, |t| t.epochs),
            "seed": tc.seed,
            "training": training,
        });
        write_report(path, &report("fit", &resolved, body)?)?;
    }
    println!(
        "{} model written to {} (loss {}, base rate {})",
        env.model.kind(),
        out.display(),
        fmt_f64(final_loss),
        fmt_f64(base)
    );
    Ok(())
}

fn distinct_contexts(ds: &LabeledDataset) -> Vec<&str> {
    let set: std::collections::BTreeSet<&str> = ds.rows.iter().map(|r| r.context_id.as_str()).collect();
    set.into_iter().collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct CalibrateConfig {
    /// CSV with `prediction`, `label` and `context_id` columns.
    #[arg(long)]
    pub scores: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Contexts to include even when the scores file has none of their rows.
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<String>,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn cmd_calibrate(cfg: &CalibrateConfig) -> Result<()> {
    let scores_path = required(&cfg.scores, "scores")?;
    let out = required(&cfg.out, "out")?;
    let preds = load_predictions(scores_path)?;
    let tc = cfg.train.resolve(TrainConfig::calibration());
    let mut resolved = cfg.clone();
    resolved.train = TrainArgs::filled(&tc);
    let layer = cfg.layer.config()?;
    let scores: Vec<f64> = preds.iter().map(|p| p.prediction).collect();
    let labels: Vec<f64> = preds.iter().map(|p| p.label).collect();
    let contexts: Vec<String> = preds.iter().map(|p| p.context_id.clone()).collect();
    let set = calibrate_frozen(&scores, &labels, &contexts, &cfg.contexts, &layer, &tc)?;

    let mut per_context = BTreeMap::new();
    for (c, rep) in &set.reports {
        let (mut n, mut mean_pred, mut rate) = (0usize, 0.0, 0.0);
        for p in preds.iter().filter(|p| &p.context_id == c) {
            n += 1;
            mean_pred += set.predict(p.prediction, c)?;
            rate += p.label;
        }
        per_context.insert(
            c.clone(),
            json!({
                "rows": n,
                "final_loss": rep.final_loss,
                "mean_prediction": mean_pred / n as f64,
                "empirical_rate": rate / n as f64,
            }),
        );
    }
    let fallback = set.fallback.clone();
    let env = ModelEnvelope::new(Model::Calibration { set }, to_value(&resolved), None);
    env.save(out)?;
    if let Some(path) = &cfg.report {
        let body = json!({
            "model_kind": "calibration",
            "rows": preds.len(),
            "seed": tc.seed,
            "contexts": per_context,
            "fallback": fallback,
        });
        write_report(path, &report("calibrate", &resolved, body)?)?;
    }
    println!("calibrated {} contexts, written to {}", per_context.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct TrainDualConfig {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "16,16")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value = "tanh")]
    pub activation: Activation,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    #[arg(long, default_value_t = 0.75)]
    pub beta: f64,
    /// Drop the per-context logit bias of the isotonic heads.
    #[arg(long)]
    pub no_context_bias: bool,
    #[command(flatten)]
    pub layer: LayerArgs,
    #[command(flatten)]
    pub train: TrainArgs,
}

fn cmd_train_dual(cfg: &TrainDualConfig) -> Result<()> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let ds = load_dataset(data)?;
    ds.validate(true)?;
    let tc = cfg.train.resolve(TrainConfig::dual_tower());
    let mut resolved = cfg.clone();
    resolved.train = TrainArgs::filled(&tc);
    let dcfg = DualTowerConfig {
        hidden: cfg.hidden.clone(),
        activation: cfg.activation,
        layer: cfg.layer.config()?.with_units(1),
        context_bias: !cfg.no_context_bias,
        loss_weights: LossWeights {
            alpha: cfg.alpha,
            beta: cfg.beta,
        },
    };
    let init = DualTowerModel::for_dataset(&ds, &dcfg, tc.seed)?;
    let (model, rep) = train_dual_tower(&ds, &init, &tc)?;
    let env = ModelEnvelope::new(Model::DualTower { model }, to_value(&resolved), Some(rep.clone()));
    env.save(out)?;
    if let Some(path) = &cfg.report {
        let body = json!({
            "model_kind": "dual_tower",
            "rows": ds.len(),
            "final_loss": rep.final_loss,
            "epochs": rep.epochs,
            "seed": tc.seed,
            "training": rep,
        });
        write_report(path, &report("train-dual", &resolved, body)?)?;
    }
    println!("dual tower written to {} (joint loss {})", out.display(), fmt_f64(rep.final_loss));
    Ok(())
}

fn input_col(ds: &LabeledDataset) -> Result<Vec<f64>> {
    Ok(ds.inputs()?)
}

/// Named prediction columns of a model on a dataset. Dual-tower models give
/// `inference` and `isotonic`; everything else gives `prediction`.
pub fn predictions(model: &Model, ds: &LabeledDataset) -> Result<Vec<(String, Vec<f64>)>> {
    let one = |v: Vec<f64>| vec![("prediction".to_string(), v)];
    Ok(match model {
        Model::Isotonic { config, params, table } => {
            let xs = input_col(ds)?;
            let mut out = Vec::with_capacity(xs.len());
            for (r, x) in ds.rows.iter().zip(xs) {
                out.push(match table {
                    Some(t) => conditioned_forward(x, params, config, 0, &r.context_id, t)?,
                    None => forward(x, params, config, r.task_id as usize, None)?,
                });
            }
            one(out)
        }
        Model::Pava { function } => one(input_col(ds)?.iter().map(|&x| function.predict(x)).collect()),
        Model::Platt { params } => one(input_col(ds)?.iter().map(|&x| params.predict(x)).collect()),
        Model::Calibration { set } => {
            let xs = input_col(ds)?;
            let out = ds
                .rows
                .iter()
                .zip(xs)
                .map(|(r, x)| set.predict(x, &r.context_id))
                .collect::<isolayer::Result<Vec<f64>>>()?;
            one(out)
        }
        Model::DualTower { model } => {
            let (inf, iso) = model.predict_rows(&ds.rows)?;
            vec![("inference".to_string(), inf), ("isotonic".to_string(), iso)]
        }
    })
}

fn predict_primary(model: &Model, ds: &LabeledDataset) -> Result<Vec<f64>> {
    Ok(predictions(model, ds)?.swap_remove(0).1)
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn eval_report(model: &Model, ds: &LabeledDataset) -> Result<BTreeMap<String, EvalReport>> {
    let labels = ds.labels();
    let groups: Vec<String> = ds.rows.iter().map(|r| r.context_id.clone()).collect();
    let truth: Option<Vec<f64>> = if ds.has_latent_truth() {
        Some(ds.rows.iter().map(|r| r.latent_truth.unwrap_or_default()).collect())
    } else {
        None
    };
    let mut out = BTreeMap::new();
    for (name, preds) in predictions(model, ds)? {
        out.insert(name, evaluate(&preds, &labels, &groups, truth.as_deref())?);
    }
    Ok(out)
}

fn cmd_eval(cfg: &EvalConfig) -> Result<()> {
    let model_path = required(&cfg.model, "model")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let env = ModelEnvelope::load(model_path)?;
    let ds = load_dataset(data)?;
    let metrics = eval_report(&env.model, &ds)?;
    let body = json!({
        "model_kind": env.model.kind(),
        "model_config": env.config,
        "metrics": metrics,
    });
    write_report(out, &report("eval", cfg, body)?)?;
    for (name, m) in &metrics {
        println!(
            "{name}: auc {} ne {} ece {}",
            m.auc.map_or("-".into(), fmt_f64),
            m.normalized_entropy.map_or("-".into(), fmt_f64),
            fmt_f64(m.ece)
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = -5.0, allow_negative_numbers = true)]
    pub lower: f64,
    #[arg(long, default_value_t = 5.0, allow_negative_numbers = true)]
    pub upper: f64,
    #[arg(long, default_value_t = 201)]
    pub points: usize,
    /// Contexts to export, comma separated. Without it the neutral curve is
    /// exported (all contexts for calibration models).
    #[arg(long, value_delimiter = ',')]
    pub contexts: Vec<String>,
    /// Task (isotonic unit or dual-tower head).
    #[arg(long, default_value_t = 0)]
    pub task: usize,
}

pub fn grid(lower: f64, upper: f64, points: usize) -> Result<Vec<f64>> {
    if !(lower.is_finite() && upper.is_finite() && lower <= upper) || points == 0 {
        return Err(usage("grid needs finite lower <= upper and at least one point"));
    }
    if points == 1 {
        return Ok(vec![lower]);
    }
    let step = (upper - lower) / (points - 1) as f64;
    Ok((0..points)
        .map(|k| if k == points - 1 { upper } else { lower + step * k as f64 })
        .collect())
}

fn unknown_context(c: &str) -> CliError {
    CliError::Core(Error::Config(format!("unknown context `{c}`")))
}

/// Curve columns `(name, values)` of a model over `xs`.
pub fn curve_columns(model: &Model, xs: &[f64], contexts: &[String], task: usize) -> Result<Vec<(String, Vec<f64>)>> {
    let eval = |f: &dyn Fn(f64) -> isolayer::Result<f64>| -> Result<Vec<f64>> {
        Ok(xs.iter().map(|&x| f(x)).collect::<isolayer::Result<Vec<f64>>>()?)
    };
    let no_contexts = |kind: &str| -> Result<()> {
        if contexts.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("{kind} models have no contexts")))
        }
    };
    let mut cols = Vec::new();
    match model {
        Model::Isotonic { config, params, table } => match table {
            None => {
                no_contexts("unconditioned isotonic")?;
                cols.push(("y".into(), eval(&|x| forward(x, params, config, task, None))?));
            }
            Some(t) if contexts.is_empty() => {
                let c = t.curve_at(params, config, 0, t.reference_index())?;
                cols.push(("y".into(), eval(&|x| c.prob(x))?));
            }
            Some(t) => {
                for ctx in contexts {
                    t.index_of(ctx).ok_or_else(|| unknown_context(ctx))?;
                    let c = t.curve(params, config, 0, ctx)?;
                    cols.push((format!("y_{ctx}"), eval(&|x| c.prob(x))?));
                }
            }
        },
        Model::Pava { function } => {
            no_contexts("pava")?;
            cols.push(("y".into(), xs.iter().map(|&x| function.predict(x)).collect()));
        }
        Model::Platt { params } => {
            no_contexts("platt")?;
            cols.push(("y".into(), xs.iter().map(|&x| params.predict(x)).collect()));
        }
        Model::Calibration { set } => {
            let wanted: Vec<String> = if contexts.is_empty() {
                set.contexts.keys().cloned().collect()
            } else {
                contexts.to_vec()
            };
            for ctx in &wanted {
                if !set.contexts.contains_key(ctx) {
                    return Err(unknown_context(ctx));
                }
                cols.push((format!("y_{ctx}"), eval(&|x| set.predict_logit(x, ctx))?));
            }
        }
        Model::DualTower { model } => {
            if task >= model.tasks() {
                return Err(CliError::Core(Error::Config(format!("task {task} out of range"))));
            }
            let head = &model.heads[task];
            if contexts.is_empty() {
                let c = head.table.curve_at(&head.params, &model.layer, 0, head.table.reference_index())?;
                cols.push(("y".into(), eval(&|x| c.prob(x))?));
            } else {
                for ctx in contexts {
                    head.table.index_of(ctx).ok_or_else(|| unknown_context(ctx))?;
                    let c = model.curve(task, ctx)?;
                    cols.push((format!("y_{ctx}"), eval(&|x| c.prob(x))?));
                }
            }
        }
    }
    Ok(cols)
}

fn cmd_export_curve(cfg: &ExportConfig) -> Result<()> {
    let model_path = required(&cfg.model, "model")?;
    let out = required(&cfg.out, "out")?;
    let env = ModelEnvelope::load(model_path)?;
    let xs = grid(cfg.lower, cfg.upper, cfg.points)?;
    let cols = curve_columns(&env.model, &xs, &cfg.contexts, cfg.task)?;
    let mut text = String::from("x");
    for (name, _) in &cols {
        text.push(',');
        text.push_str(name);
    }
    text.push('\n');
    for (k, x) in xs.iter().enumerate() {
        text.push_str(&fmt_f64(*x));
        for (_, v) in &cols {
            text.push(',');
            text.push_str(&fmt_f64(v[k]));
        }
        text.push('\n');
    }
    std::fs::write(out, text).map_err(Error::from)?;
    println!("{} curve points written to {}", xs.len(), out.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize, Args)]
#[serde(deny_unknown_fields)]
pub struct ScoreConfig {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Prediction column for dual-tower models: `inference` or `isotonic`.
    #[arg(long)]
    pub head: Option<String>,
}

fn cmd_score(cfg: &ScoreConfig) -> Result<()> {
    let model_path = required(&cfg.model, "model")?;
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let env = ModelEnvelope::load(model_path)?;
    let ds = load_dataset(data)?;
    let mut cols = predictions(&env.model, &ds)?;
    let k = match &cfg.head {
        None => 0,
        Some(h) => cols
            .iter()
            .position(|(name, _)| name == h)
            .ok_or_else(|| usage(format!("model has no `{h}` head")))?,
    };
    let values = cols.swap_remove(k).1;
    let preds: Vec<Prediction> = ds
        .rows
        .iter()
        .zip(values)
        .map(|(r, p)| Prediction {
            prediction: p,
            label: r.label,
            context_id: r.context_id.clone(),
            task_id: r.task_id,
        })
        .collect();
    save_predictions(&preds, out)?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&resolve(a.params, a.config.as_deref())?),
        Command::Fit(a) => cmd_fit(&resolve(a.params, a.config.as_deref())?),
        Command::Calibrate(a) => cmd_calibrate(&resolve(a.params, a.config.as_deref())?),
        Command::TrainDual(a) => cmd_train_dual(&resolve(a.params, a.config.as_deref())?),
        Command::Eval(a) => cmd_eval(&resolve(a.params, a.config.as_deref())?),
        Command::ExportCurve(a) => cmd_export_curve(&resolve(a.params, a.config.as_deref())?),
        Command::Score(a) => cmd_score(&resolve(a.params, a.config.as_deref())?),
    }
}

/// Parse `args` (program name first) and run; returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
