//! Dataset CSV files, prediction files and the versioned JSON model envelope.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{PlattParams, StepFunction};
use crate::context::EmbeddingTable;
use crate::dataset::{LabeledDataset, Row};
use crate::dual_tower::DualTowerModel;
use crate::error::{Error, Result};
use crate::layer::{IsotonicConfig, IsotonicParams};
use crate::training::{CalibrationSet, TrainReport};

pub const FORMAT_VERSION: u32 = 1;

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Exact header for a dataset with `feature_dim` features.
pub fn dataset_header(feature_dim: usize) -> Vec<String> {
    let mut h = vec!["input".to_string()];
    h.extend((0..feature_dim).map(|k| format!("feat_{k}")));
    h.extend(["context_id", "task_id", "label", "latent_truth"].map(String::from));
    h
}

pub fn write_dataset<W: Write>(ds: &LabeledDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(dataset_header(ds.feature_dim))?;
    let mut rec = Vec::with_capacity(ds.feature_dim + 5);
    for (k, r) in ds.rows.iter().enumerate() {
        if r.features.len() != ds.feature_dim {
            return Err(Error::data(format!(
                "row {k}: {} features, expected {}",
                r.features.len(),
                ds.feature_dim
            )));
        }
        rec.clear();
        rec.push(fmt_opt(r.input));
        rec.extend(r.features.iter().map(|f| fmt_f64(*f)));
        rec.push(r.context_id.clone());
        rec.push(r.task_id.to_string());
        rec.push(fmt_f64(r.label));
        rec.push(fmt_opt(r.latent_truth));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    write_dataset(ds, BufWriter::new(File::create(path)?))
}

fn schema_error(actual: &[String], expected: &[String]) -> Error {
    let missing: Vec<&str> = expected
        .iter()
        .filter(|c| !actual.contains(c))
        .map(String::as_str)
        .collect();
    let unexpected: Vec<&str> = actual
        .iter()
        .filter(|c| !expected.contains(c))
        .map(String::as_str)
        .collect();
    let mut parts = Vec::new();
    if !missing.is_empty() {
        parts.push(format!("missing columns: {}", missing.join(", ")));
    }
    if !unexpected.is_empty() {
        parts.push(format!("unexpected columns: {}", unexpected.join(", ")));
    }
    if parts.is_empty() {
        parts.push(format!("columns out of order, expected `{}`", expected.join(",")));
    }
    Error::data(format!("dataset schema mismatch; {}", parts.join("; ")))
}

fn parse_f64(cell: &str, line: u64, column: &str) -> Result<f64> {
    cell.parse::<f64>()
        .map_err(|_| Error::data(format!("line {line}, column `{column}`: `{cell}` is not a number")))
}

fn parse_opt(cell: &str, line: u64, column: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        Ok(None)
    } else {
        parse_f64(cell, line, column).map(Some)
    }
}

pub fn read_dataset<R: Read>(input: R) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let feature_dim = header.iter().filter(|c| c.starts_with("feat_")).count();
    let expected = dataset_header(feature_dim);
    if header != expected {
        return Err(schema_error(&header, &expected));
    }
    let mut ds = LabeledDataset::new(feature_dim);
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let features = (0..feature_dim)
            .map(|k| parse_f64(cell(k + 1), line, &expected[k + 1]))
            .collect::<Result<Vec<f64>>>()?;
        let base = feature_dim + 1;
        let context_id = cell(base).to_string();
        if context_id.is_empty() {
            return Err(Error::data(format!("line {line}: empty `context_id`")));
        }
        let task_id = cell(base + 1)
            .parse::<u32>()
            .map_err(|_| Error::data(format!("line {line}, column `task_id`: `{}` is not a task id", cell(base + 1))))?;
        ds.rows.push(Row {
            input: parse_opt(cell(0), line, "input")?,
            features,
            context_id,
            task_id,
            label: parse_f64(cell(base + 2), line, "label")?,
            latent_truth: parse_opt(cell(base + 3), line, "latent_truth")?,
        });
    }
    ds.validate(false)?;
    Ok(ds)
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// One scored row, as written by `score` and read by `calibrate`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub prediction: f64,
    pub label: f64,
    pub context_id: String,
    pub task_id: u32,
}

pub const PREDICTION_HEADER: [&str; 4] = ["prediction", "label", "context_id", "task_id"];

pub fn write_predictions<W: Write>(preds: &[Prediction], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(PREDICTION_HEADER)?;
    for p in preds {
        w.write_record([
            fmt_f64(p.prediction),
            fmt_f64(p.label),
            p.context_id.clone(),
            p.task_id.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    write_predictions(preds, BufWriter::new(File::create(path)?))
}

/// Reads any CSV with `prediction`, `label` and `context_id` columns, in any
/// order. `task_id` is optional and defaults to 0.
pub fn read_predictions<R: Read>(input: R) -> Result<Vec<Prediction>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    let find = |name: &str| header.iter().position(|c| c == name);
    let required = ["prediction", "label", "context_id"];
    let missing: Vec<&str> = required.iter().copied().filter(|c| find(c).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::data(format!("scores file missing columns: {}", missing.join(", "))));
    }
    let (pi, li, ci) = (find("prediction").unwrap(), find("label").unwrap(), find("context_id").unwrap());
    let ti = find("task_id");
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let cell = |k: usize| rec.get(k).unwrap_or("");
        let task_id = match ti {
            Some(k) if !cell(k).is_empty() => cell(k)
                .parse::<u32>()
                .map_err(|_| Error::data(format!("line {line}, column `task_id`: `{}` is not a task id", cell(k))))?,
            _ => 0,
        };
        out.push(Prediction {
            prediction: parse_f64(cell(pi), line, "prediction")?,
            label: parse_f64(cell(li), line, "label")?,
            context_id: cell(ci).to_string(),
            task_id,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_predictions(BufReader::new(File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Model {
    Isotonic {
        config: IsotonicConfig,
        params: IsotonicParams,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        table: Option<EmbeddingTable>,
    },
    Pava {
        function: StepFunction,
    },
    Platt {
        params: PlattParams,
    },
    DualTower {
        model: DualTowerModel,
    },
    Calibration {
        set: CalibrationSet,
    },
}

impl Model {
    pub fn kind(&self) -> &'static str {
        match self {
            Model::Isotonic { .. } => "isotonic",
            Model::Pava { .. } => "pava",
            Model::Platt { .. } => "platt",
            Model::DualTower { .. } => "dual_tower",
            Model::Calibration { .. } => "calibration",
        }
    }
}

/// Versioned on-disk model with the run configuration that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnvelope {
    pub format_version: u32,
    pub model: Model,
    /// Full run configuration, including the seed.
    pub config: serde_json::Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainReport>,
}

impl ModelEnvelope {
    pub fn new(model: Model, config: serde_json::Value, training: Option<TrainReport>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            model,
            config,
            training,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let env: Self = serde_json::from_str(s)?;
        if env.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                env.format_version
            )));
        }
        Ok(env)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Pretty JSON with a trailing newline, the format of every report file.
pub fn to_json_file<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}
