//! Seeded generators for the synthetic calibration tasks and a position-bias
//! click-log simulator with known ground truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LabeledDataset, Row};
use crate::error::{Error, Result};
use crate::layer::{logit, sigmoid};

/// Kink of the distorted target: `x^2` up to here, `(1.9 - x)^2` after.
pub const PIECEWISE_BREAK: f64 = 0.95;

pub fn quadratic_target(x: f64) -> f64 {
    x * x
}

pub fn piecewise_target(x: f64) -> f64 {
    if x <= PIECEWISE_BREAK {
        x * x
    } else {
        (1.9 - x) * (1.9 - x)
    }
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            return u;
        }
    }
}

fn gen_scalar(n: usize, seed: u64, target: fn(f64) -> f64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::Empty("sample count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ds = LabeledDataset::new(0);
    ds.rows.reserve(n);
    for _ in 0..n {
        let x = open_unit(&mut rng);
        let truth = target(x);
        let label = if rng.gen::<f64>() < truth { 1.0 } else { 0.0 };
        ds.rows.push(Row {
            input: Some(logit(x)),
            features: Vec::new(),
            context_id: "0".to_string(),
            task_id: 0,
            label,
            latent_truth: Some(truth),
        });
    }
    Ok(ds)
}

/// `x ~ U(0, 1)`, input `logit(x)`, label `~ Bernoulli(x^2)`.
pub fn gen_quadratic(n: usize, seed: u64) -> Result<LabeledDataset> {
    gen_scalar(n, seed, quadratic_target)
}

/// Like [`gen_quadratic`] with the non-monotone tail above `x = 0.95`.
pub fn gen_piecewise(n: usize, seed: u64) -> Result<LabeledDataset> {
    gen_scalar(n, seed, piecewise_target)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposurePolicy {
    /// Each impression gets an independent uniformly random position.
    Uniform,
    /// Impressions are grouped into sessions of `positions` items and shown in
    /// descending order of the logging score.
    OracleSorted,
}

impl std::str::FromStr for ExposurePolicy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "oracle-sorted" => Ok(Self::OracleSorted),
            other => Err(format!("unknown exposure policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelModel {
    /// `P(click) = r * propensity[p]`.
    Multiplicative,
    /// `P(click) = sigmoid(logit(r) + ln propensity[p])`.
    LogitShift,
}

impl std::str::FromStr for LabelModel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "multiplicative" => Ok(Self::Multiplicative),
            "logit-shift" => Ok(Self::LogitShift),
            other => Err(format!("unknown label model `{other}`")),
        }
    }
}

/// Latent relevance and position sensitivity of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBias {
    pub name: String,
    /// Examination probability per position, index 0 = position 1.
    pub propensity: Vec<f64>,
    /// Hidden `theta` in `r = sigmoid(theta . features + offset)`.
    pub relevance_weights: Vec<f64>,
    pub relevance_offset: f64,
}

/// `1 / log2(p + 1)` for `p = 1..=k`.
pub fn log_discount_propensity(k: usize) -> Vec<f64> {
    (1..=k).map(|p| 1.0 / ((p + 1) as f64).log2()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionBiasScenario {
    pub positions: usize,
    pub feature_dim: usize,
    pub tasks: Vec<TaskBias>,
    pub exposure: ExposurePolicy,
    pub label_model: LabelModel,
    /// Weight of the last feature in the logging score used by
    /// [`ExposurePolicy::OracleSorted`]. The feature carries no relevance, so
    /// any nonzero weight confounds position with a non-relevance signal.
    pub confounding: f64,
    pub sample_count: usize,
    pub seed: u64,
}

impl PositionBiasScenario {
    /// Click task only, `1/log2(p+1)` propensities, oracle-sorted exposure.
    pub fn click_only(positions: usize, sample_count: usize, seed: u64) -> Self {
        Self {
            positions,
            feature_dim: 4,
            tasks: vec![TaskBias {
                name: "click".into(),
                propensity: log_discount_propensity(positions),
                relevance_weights: vec![1.2, -0.8, 0.5, 0.0],
                relevance_offset: -1.0,
            }],
            exposure: ExposurePolicy::OracleSorted,
            label_model: LabelModel::Multiplicative,
            confounding: 1.0,
            sample_count,
            seed,
        }
    }

    /// Click plus a long-dwell task that is less sensitive to position.
    pub fn new(positions: usize, sample_count: usize, seed: u64) -> Self {
        let mut s = Self::click_only(positions, sample_count, seed);
        s.tasks.push(TaskBias {
            name: "long_dwell".into(),
            propensity: log_discount_propensity(positions).iter().map(|p| p.sqrt()).collect(),
            relevance_weights: vec![0.7, -0.3, 1.0, 0.0],
            relevance_offset: -2.0,
        });
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions == 0 {
            return Err(Error::config("scenario needs at least one position"));
        }
        if self.sample_count == 0 {
            return Err(Error::Empty("scenario sample count"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("scenario needs at least one feature"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("scenario needs at least one task"));
        }
        if !self.confounding.is_finite() {
            return Err(Error::config("confounding weight must be finite"));
        }
        for t in &self.tasks {
            if t.propensity.len() != self.positions {
                return Err(Error::config(format!(
                    "task `{}`: {} propensities for {} positions",
                    t.name,
                    t.propensity.len(),
                    self.positions
                )));
            }
            if t.propensity.iter().any(|p| !(*p > 0.0 && *p <= 1.0)) {
                return Err(Error::config(format!("task `{}`: propensities must lie in (0, 1]", t.name)));
            }
            if t.propensity.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::config(format!("task `{}`: propensities must be non-increasing", t.name)));
            }
            if t.relevance_weights.len() != self.feature_dim {
                return Err(Error::config(format!(
                    "task `{}`: relevance weights do not match feature_dim",
                    t.name
                )));
            }
        }
        Ok(())
    }

    /// Latent relevance of `task` for a feature vector.
    pub fn relevance(&self, task: usize, features: &[f64]) -> f64 {
        let t = &self.tasks[task];
        let score: f64 = t.relevance_weights.iter().zip(features).map(|(w, f)| w * f).sum();
        sigmoid(score + t.relevance_offset)
    }

    fn logging_score(&self, features: &[f64]) -> f64 {
        let base = logit(self.relevance(0, features));
        base + self.confounding * features[self.feature_dim - 1]
    }
}

/// Simulate logged impressions. Each impression emits one row per task with
/// `context_id` = displayed position (1-based) and `latent_truth` = the
/// task's relevance.
pub fn gen_position_logs(s: &PositionBiasScenario) -> Result<LabeledDataset> {
    s.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let features: Vec<Vec<f64>> = (0..s.sample_count)
        .map(|_| (0..s.feature_dim).map(|_| rng.sample(StandardNormal)).collect())
        .collect();

    let mut position = vec![0usize; s.sample_count];
    match s.exposure {
        ExposurePolicy::Uniform => {
            for p in position.iter_mut() {
                *p = rng.gen_range(0..s.positions);
            }
        }
        ExposurePolicy::OracleSorted => {
            let scores: Vec<f64> = features.iter().map(|f| s.logging_score(f)).collect();
            let mut start = 0;
            while start < s.sample_count {
                let end = (start + s.positions).min(s.sample_count);
                let mut session: Vec<usize> = (start..end).collect();
                // randomize before the stable sort so exact ties do not favor
                // earlier impressions
                session.shuffle(&mut rng);
                session.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
                for (rank, &i) in session.iter().enumerate() {
                    position[i] = rank;
                }
                start = end;
            }
        }
    }

    let mut ds = LabeledDataset::new(s.feature_dim);
    ds.rows.reserve(s.sample_count * s.tasks.len());
    for (i, f) in features.into_iter().enumerate() {
        let p = position[i];
        for (task, tb) in s.tasks.iter().enumerate() {
            let r = s.relevance(task, &f);
            let prob = match s.label_model {
                LabelModel::Multiplicative => r * tb.propensity[p],
                LabelModel::LogitShift => sigmoid(logit(r) + tb.propensity[p].ln()),
            };
            let label = if rng.gen::<f64>() < prob { 1.0 } else { 0.0 };
            ds.rows.push(Row {
                input: None,
                features: f.clone(),
                context_id: (p + 1).to_string(),
                task_id: task as u32,
                label,
                latent_truth: Some(r),
            });
        }
    }
    Ok(ds)
}
