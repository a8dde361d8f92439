use crate::error::{Error, Result};

/// One labeled observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    /// Scalar input logit (or probability for score files), when the row has one.
    pub input: Option<f64>,
    pub features: Vec<f64>,
    pub context_id: String,
    pub task_id: u32,
    pub label: f64,
    /// Hidden ground truth known only to simulators.
    pub latent_truth: Option<f64>,
}

impl Row {
    /// Row carrying only a scalar input and a label.
    pub fn scalar(input: f64, label: f64) -> Self {
        Self {
            input: Some(input),
            features: Vec::new(),
            context_id: "0".to_string(),
            task_id: 0,
            label,
            latent_truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub feature_dim: usize,
    pub rows: Vec<Row>,
}

impl LabeledDataset {
    pub fn new(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Row) -> Result<()> {
        if row.features.len() != self.feature_dim {
            return Err(Error::Shape {
                what: "row features",
                expected: self.feature_dim,
                actual: row.features.len(),
            });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Scalar inputs of every row; fails if any row lacks one.
    pub fn inputs(&self) -> Result<Vec<f64>> {
        self.rows
            .iter()
            .enumerate()
            .map(|(k, r)| {
                r.input
                    .ok_or_else(|| Error::data(format!("row {k} has no `input` value")))
            })
            .collect()
    }

    pub fn has_latent_truth(&self) -> bool {
        !self.rows.is_empty() && self.rows.iter().all(|r| r.latent_truth.is_some())
    }

    /// Distinct task ids in ascending order.
    pub fn tasks(&self) -> Vec<u32> {
        let mut t: Vec<u32> = self.rows.iter().map(|r| r.task_id).collect();
        t.sort_unstable();
        t.dedup();
        t
    }

    /// Structural checks: consistent features, finite values, binary labels.
    pub fn validate(&self, binary_labels: bool) -> Result<()> {
        let has_input = self.rows.first().map(|r| r.input.is_some());
        let has_truth = self.rows.first().map(|r| r.latent_truth.is_some());
        for (k, r) in self.rows.iter().enumerate() {
            if r.features.len() != self.feature_dim {
                return Err(Error::data(format!(
                    "row {k}: {} features, expected {}",
                    r.features.len(),
                    self.feature_dim
                )));
            }
            if Some(r.input.is_some()) != has_input || Some(r.latent_truth.is_some()) != has_truth {
                return Err(Error::data(format!("row {k}: optional columns inconsistent with row 0")));
            }
            let finite = r.input.is_none_or(f64::is_finite)
                && r.latent_truth.is_none_or(f64::is_finite)
                && r.features.iter().all(|f| f.is_finite())
                && r.label.is_finite();
            if !finite {
                return Err(Error::data(format!("row {k}: non-finite value")));
            }
            if binary_labels && r.label != 0.0 && r.label != 1.0 {
                return Err(Error::data(format!("row {k}: label {} is not binary", r.label)));
            }
        }
        Ok(())
    }
}
