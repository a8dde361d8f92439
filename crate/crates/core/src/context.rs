//! Context-conditioned isotonic embeddings.
//!
//! Each context (display position, platform, a composite key such as
//! `"3|ios"`) owns a row of per-bucket weight offsets. In additive mode the
//! effective slopes are `relu(w + E(c))`, so a zero row reproduces the shared
//! base curve; in replace mode they are `relu(E(c))` and the base weights are
//! unused. Either way every context gets its own monotone curve.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::{sigmoid, Curve, Evaluation, IsotonicConfig, IsotonicParams};
use crate::optim::{ensure_finite, OptimizerState};
use crate::training::{bce_from_logit, BucketGrad, GradientBundle, TrainConfig, TrainReport};

/// Id of the synthetic neutral context added to every table by default.
pub const REFERENCE_CONTEXT: &str = "__reference__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineMode {
    /// `relu(w + E(c))`
    #[default]
    Additive,
    /// `relu(E(c))`
    Replace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    keys: Vec<String>,
    vocabulary: BTreeMap<String, usize>,
    rows: Vec<Vec<f64>>,
    context_bias: Option<Vec<f64>>,
    reference: usize,
    frozen_reference: bool,
    mode: CombineMode,
    buckets: usize,
}

/// Result of a table lookup.
#[derive(Debug, Clone, Copy)]
pub struct Lookup<'a> {
    pub row: usize,
    pub offset: &'a [f64],
    pub bias: f64,
    /// The context was unknown and the reference row was returned instead.
    pub out_of_vocabulary: bool,
}

impl EmbeddingTable {
    /// Additive table with zero rows for `contexts` plus a frozen synthetic
    /// reference row.
    pub fn new<I, S>(cfg: &IsotonicConfig, contexts: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(cfg, contexts, CombineMode::Additive, 0.0)
    }

    /// Replace-mode table; every row, including the reference, starts at `init`.
    pub fn replacing<I, S>(cfg: &IsotonicConfig, contexts: I, init: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::build(cfg, contexts, CombineMode::Replace, init)
    }

    fn build<I, S>(cfg: &IsotonicConfig, contexts: I, mode: CombineMode, init: f64) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let buckets = cfg.num_buckets();
        let mut table = Self {
            keys: Vec::new(),
            vocabulary: BTreeMap::new(),
            rows: Vec::new(),
            context_bias: None,
            reference: 0,
            frozen_reference: true,
            mode,
            buckets,
        };
        table.insert(REFERENCE_CONTEXT.to_string(), init);
        for c in contexts {
            table.insert(c.into(), init);
        }
        table
    }

    fn insert(&mut self, key: String, init: f64) {
        if self.vocabulary.contains_key(&key) {
            return;
        }
        self.vocabulary.insert(key.clone(), self.keys.len());
        self.keys.push(key);
        self.rows.push(vec![init; self.buckets]);
        if let Some(b) = &mut self.context_bias {
            b.push(0.0);
        }
    }

    /// Enable a learnable per-context bias `b(c)`, initialized to zero.
    pub fn with_context_bias(mut self) -> Self {
        self.context_bias = Some(vec![0.0; self.rows.len()]);
        self
    }

    /// Use an existing context as the neutralization reference. Its row stays
    /// trainable.
    pub fn with_reference(mut self, context: &str) -> Result<Self> {
        let idx = self
            .index_of(context)
            .ok_or_else(|| Error::config(format!("reference context `{context}` not in vocabulary")))?;
        self.reference = idx;
        self.frozen_reference = context == REFERENCE_CONTEXT;
        Ok(self)
    }

    pub fn mode(&self) -> CombineMode {
        self.mode
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn contexts(&self) -> &[String] {
        &self.keys
    }

    pub fn reference_context(&self) -> &str {
        &self.keys[self.reference]
    }

    pub fn reference_index(&self) -> usize {
        self.reference
    }

    pub fn has_context_bias(&self) -> bool {
        self.context_bias.is_some()
    }

    pub fn index_of(&self, context: &str) -> Option<usize> {
        self.vocabulary.get(context).copied()
    }

    /// Whether training may modify row `idx`.
    pub fn is_trainable(&self, idx: usize) -> bool {
        !(self.frozen_reference && idx == self.reference)
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx]
    }

    pub fn row_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.rows[idx]
    }

    pub fn bias(&self, idx: usize) -> f64 {
        self.context_bias.as_ref().map_or(0.0, |b| b[idx])
    }

    pub fn bias_mut(&mut self, idx: usize) -> Option<&mut f64> {
        self.context_bias.as_mut().map(|b| &mut b[idx])
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [Vec<f64>], Option<&mut [f64]>) {
        (&mut self.rows, self.context_bias.as_deref_mut())
    }

    /// Row for `context`; unknown contexts resolve to the reference row.
    pub fn lookup(&self, context: &str) -> Lookup<'_> {
        let (row, out_of_vocabulary) = match self.index_of(context) {
            Some(i) => (i, false),
            None => (self.reference, true),
        };
        Lookup {
            row,
            offset: &self.rows[row],
            bias: self.bias(row),
            out_of_vocabulary,
        }
    }

    fn check(&self, cfg: &IsotonicConfig) -> Result<()> {
        if self.buckets != cfg.num_buckets() {
            return Err(Error::Shape {
                what: "embedding row length",
                expected: cfg.num_buckets(),
                actual: self.buckets,
            });
        }
        Ok(())
    }

    /// Curve of `unit` under the context stored at row `idx`.
    pub fn curve_at(
        &self,
        params: &IsotonicParams,
        cfg: &IsotonicConfig,
        unit: usize,
        idx: usize,
    ) -> Result<Curve> {
        self.check(cfg)?;
        let extra = self.bias(idx);
        match self.mode {
            CombineMode::Additive => Curve::with_extra_bias(params, cfg, unit, Some(&self.rows[idx]), extra),
            CombineMode::Replace => {
                params.check(cfg)?;
                if unit >= cfg.units {
                    return Err(Error::config(format!("unit {unit} out of range")));
                }
                let slopes = self.rows[idx].iter().map(|e| e.max(0.0)).collect();
                Curve::from_slopes(cfg, slopes, params.bias[unit] + extra)
            }
        }
    }

    /// Curve for a context id (reference curve when out of vocabulary).
    pub fn curve(
        &self,
        params: &IsotonicParams,
        cfg: &IsotonicConfig,
        unit: usize,
        context: &str,
    ) -> Result<Curve> {
        self.curve_at(params, cfg, unit, self.lookup(context).row)
    }
}

/// Probability under the curve of context `c`.
pub fn conditioned_forward(
    x: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    context: &str,
    table: &EmbeddingTable,
) -> Result<f64> {
    table.curve(params, cfg, unit, context)?.prob(x)
}

/// Probability under the reference context, the debiased score.
pub fn neutralized_forward(
    x: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    table: &EmbeddingTable,
) -> Result<f64> {
    table.curve_at(params, cfg, unit, table.reference_index())?.prob(x)
}

/// Gradient of one conditioned example: the layer part plus the single
/// embedding row (and context bias) it touched.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionedGradients {
    pub layer: GradientBundle,
    pub row: usize,
    pub d_row: Vec<f64>,
    pub d_context_bias: f64,
}

/// Per-row accumulation of conditioned gradients over a batch.
#[derive(Debug, Clone)]
pub(crate) struct TableGrad {
    pub(crate) buckets: Vec<Option<BucketGrad>>,
    pub(crate) bias: Vec<f64>,
}

impl TableGrad {
    pub(crate) fn new(rows: usize) -> Self {
        Self {
            buckets: vec![None; rows],
            bias: vec![0.0; rows],
        }
    }

    pub(crate) fn add(&mut self, row: usize, n: usize, e: &Evaluation, g: f64) {
        self.buckets[row].get_or_insert_with(|| BucketGrad::new(n)).add(e, g);
        self.bias[row] += g;
    }

    /// Split into `(d_base_weights, d_rows)`; untouched rows stay `None`.
    pub(crate) fn resolve(
        &self,
        table: &EmbeddingTable,
        curves: &[Option<Curve>],
        width: f64,
    ) -> (Vec<f64>, Vec<Option<Vec<f64>>>) {
        let n = table.buckets();
        let mut d_base = vec![0.0; n];
        let mut d_rows = vec![None; self.buckets.len()];
        for (idx, acc) in self.buckets.iter().enumerate() {
            let (Some(acc), Some(curve)) = (acc, &curves[idx]) else {
                continue;
            };
            let g = acc.gated(width, curve.slopes());
            if table.mode() == CombineMode::Additive {
                for (d, v) in d_base.iter_mut().zip(&g) {
                    *d += v;
                }
            }
            d_rows[idx] = Some(g);
        }
        (d_base, d_rows)
    }
}

pub fn conditioned_backward(
    x: f64,
    label: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    context: &str,
    table: &EmbeddingTable,
) -> Result<ConditionedGradients> {
    let row = table.lookup(context).row;
    let curve = table.curve_at(params, cfg, unit, row)?;
    let e = curve.evaluate(x)?;
    let g = sigmoid(e.logit) - label;
    let mut acc = TableGrad::new(table.len());
    acc.add(row, cfg.num_buckets(), &e, g);
    let mut curves = vec![None; table.len()];
    curves[row] = Some(curve.clone());
    let (d_base, mut d_rows) = acc.resolve(table, &curves, cfg.bucket_width);

    let mut layer = GradientBundle::zeros(cfg);
    layer.d_weights[unit] = d_base;
    layer.d_bias[unit] = g;
    layer.d_input = if e.clipped == x { g * curve.slopes()[e.index] } else { 0.0 };
    Ok(ConditionedGradients {
        layer,
        row,
        d_row: d_rows[row].take().unwrap_or_else(|| vec![0.0; cfg.num_buckets()]),
        d_context_bias: if table.has_context_bias() { g } else { 0.0 },
    })
}

/// Optimizer slot layout shared by conditioned training loops: base weight
/// rows, then the bias vector, then one slot per table row, then the context
/// biases.
#[allow(clippy::too_many_arguments)]
pub(crate) fn apply_table_step(
    params: &mut IsotonicParams,
    table: &mut EmbeddingTable,
    d_weights: &[Vec<f64>],
    d_bias: &[f64],
    d_rows: &[Option<Vec<f64>>],
    d_context_bias: &[f64],
    state: &mut OptimizerState,
    slot_base: usize,
) -> Result<()> {
    for row in d_weights {
        ensure_finite("isotonic weights", row)?;
    }
    ensure_finite("isotonic bias", d_bias)?;
    for row in d_rows.iter().flatten() {
        ensure_finite("embedding row", row)?;
    }
    ensure_finite("context bias", d_context_bias)?;

    let units = params.weights.len();
    for (u, row) in params.weights.iter_mut().enumerate() {
        state.update(slot_base + u, row, &d_weights[u]);
    }
    state.update(slot_base + units, &mut params.bias, d_bias);
    let rows_base = slot_base + units + 1;
    for (idx, d) in d_rows.iter().enumerate() {
        if !table.is_trainable(idx) {
            continue;
        }
        if let Some(d) = d {
            state.update(rows_base + idx, table.row_mut(idx), d);
        }
    }
    if table.has_context_bias() {
        let frozen = (0..table.len()).filter(|i| !table.is_trainable(*i)).collect::<Vec<_>>();
        let mut grads = d_context_bias.to_vec();
        for i in frozen {
            grads[i] = 0.0;
        }
        let slot = rows_base + table.len();
        if let Some(b) = table.context_bias.as_mut() {
            state.update(slot, b, &grads);
        }
    }
    Ok(())
}

/// One optimizer step from a single conditioned example.
pub fn conditioned_step(
    params: &mut IsotonicParams,
    table: &mut EmbeddingTable,
    grads: &ConditionedGradients,
    state: &mut OptimizerState,
) -> Result<()> {
    let mut d_rows = vec![None; table.len()];
    d_rows[grads.row] = Some(grads.d_row.clone());
    let mut d_cb = vec![0.0; table.len()];
    d_cb[grads.row] = grads.d_context_bias;
    state.begin_step();
    apply_table_step(
        params,
        table,
        &grads.layer.d_weights,
        &grads.layer.d_bias,
        &d_rows,
        &d_cb,
        state,
        0,
    )
}

/// Jointly train base weights and per-context rows on `(input, context_id,
/// label)` rows with a single unit.
pub fn fit_conditioned(
    dataset: &LabeledDataset,
    cfg: &IsotonicConfig,
    tc: &TrainConfig,
    mut table: EmbeddingTable,
) -> Result<(IsotonicParams, EmbeddingTable, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    tc.check()?;
    if cfg.units != 1 {
        return Err(Error::config("conditioned fitting uses a single-unit layer"));
    }
    let inputs = dataset.inputs()?;
    let samples: Vec<(f64, f64, usize)> = dataset
        .rows
        .iter()
        .zip(&inputs)
        .map(|(r, &x)| (x, r.label, table.lookup(&r.context_id).row))
        .collect();
    let mut params = IsotonicParams::constant(cfg, tc.init_weight);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = OptimizerState::new(tc.optimizer, tc.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let n = cfg.num_buckets();

    let curves_for = |params: &IsotonicParams, table: &EmbeddingTable| -> Result<Vec<Option<Curve>>> {
        (0..table.len())
            .map(|i| table.curve_at(params, cfg, 0, i).map(Some))
            .collect()
    };
    let loss_of = |curves: &[Option<Curve>]| -> Result<f64> {
        let mut total = 0.0;
        for &(x, t, row) in &samples {
            let c = curves[row].as_ref().expect("curve for every row");
            total += bce_from_logit(c.logit(x)?, t);
        }
        Ok(total / samples.len() as f64)
    };

    for epoch in 0..tc.epochs {
        state.learning_rate = tc.rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size.min(samples.len())) {
            let curves = curves_for(&params, &table)?;
            let mut acc = TableGrad::new(table.len());
            let mut d_bias = 0.0;
            let scale = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let (x, t, row) = samples[k];
                let e = curves[row].as_ref().expect("curve").evaluate(x)?;
                let g = (sigmoid(e.logit) - t) * scale;
                acc.add(row, n, &e, g);
                d_bias += g;
            }
            let (d_base, d_rows) = acc.resolve(&table, &curves, cfg.bucket_width);
            state.begin_step();
            let d_cb = acc.bias.clone();
            apply_table_step(&mut params, &mut table, &[d_base], &[d_bias], &d_rows, &d_cb, &mut state, 0)?;
        }
        let loss = loss_of(&curves_for(&params, &table)?)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        trace.push(loss);
    }
    let final_loss = match trace.last() {
        Some(l) => *l,
        None => loss_of(&curves_for(&params, &table)?)?,
    };
    let report = TrainReport {
        epochs: trace.len(),
        loss_trace: trace,
        final_loss,
        seed: tc.seed,
    };
    Ok((params, table, report))
}

/// On-disk form: only rows with a nonzero entry are stored.
#[derive(Serialize, Deserialize)]
struct TableRepr {
    mode: CombineMode,
    buckets: usize,
    vocabulary: Vec<String>,
    reference: String,
    frozen_reference: bool,
    /// Fill value for rows not listed in `rows`.
    default_value: f64,
    rows: BTreeMap<String, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    context_bias: Option<BTreeMap<String, f64>>,
}

impl Serialize for EmbeddingTable {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        // replace-mode tables are dense around their init value, so store
        // rows that differ from the most common uniform fill
        let default_value = match self.mode {
            CombineMode::Additive => 0.0,
            CombineMode::Replace => self.rows[self.reference].first().copied().unwrap_or(0.0),
        };
        let rows = self
            .keys
            .iter()
            .zip(&self.rows)
            .filter(|(_, r)| r.iter().any(|v| v.to_bits() != default_value.to_bits()))
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect();
        let context_bias = self.context_bias.as_ref().map(|b| {
            self.keys
                .iter()
                .zip(b)
                .filter(|(_, v)| v.to_bits() != 0f64.to_bits())
                .map(|(k, v)| (k.clone(), *v))
                .collect()
        });
        TableRepr {
            mode: self.mode,
            buckets: self.buckets,
            vocabulary: self.keys.clone(),
            reference: self.keys[self.reference].clone(),
            frozen_reference: self.frozen_reference,
            default_value,
            rows,
            context_bias,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EmbeddingTable {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let repr = TableRepr::deserialize(d)?;
        let mut vocabulary = BTreeMap::new();
        for (i, k) in repr.vocabulary.iter().enumerate() {
            if vocabulary.insert(k.clone(), i).is_some() {
                return Err(D::Error::custom(format!("duplicate context `{k}`")));
            }
        }
        let reference = *vocabulary
            .get(&repr.reference)
            .ok_or_else(|| D::Error::custom("reference context missing from vocabulary"))?;
        let mut rows = vec![vec![repr.default_value; repr.buckets]; repr.vocabulary.len()];
        for (k, r) in repr.rows {
            let i = *vocabulary
                .get(&k)
                .ok_or_else(|| D::Error::custom(format!("row for unknown context `{k}`")))?;
            if r.len() != repr.buckets {
                return Err(D::Error::custom(format!("row `{k}` has {} entries", r.len())));
            }
            rows[i] = r;
        }
        let context_bias = match repr.context_bias {
            None => None,
            Some(map) => {
                let mut b = vec![0.0; rows.len()];
                for (k, v) in map {
                    let i = *vocabulary
                        .get(&k)
                        .ok_or_else(|| D::Error::custom(format!("bias for unknown context `{k}`")))?;
                    b[i] = v;
                }
                Some(b)
            }
        };
        Ok(Self {
            keys: repr.vocabulary,
            vocabulary,
            rows,
            context_bias,
            reference,
            frozen_reference: repr.frozen_reference,
            mode: repr.mode,
            buckets: repr.buckets,
        })
    }
}
