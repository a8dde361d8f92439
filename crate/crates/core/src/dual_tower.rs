//! Relevance tower with per-task isotonic heads conditioned on display
//! context. Both heads train jointly; serving uses the tower alone.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::{EmbeddingTable, TableGrad};
use crate::dataset::{LabeledDataset, Row};
use crate::error::{Error, Result};
use crate::layer::{sigmoid, Curve, IsotonicConfig, IsotonicParams};
use crate::optim::{ensure_finite, OptimizerState};
use crate::training::{bce_from_logit, relative_error, GradCheck, TrainConfig, TrainReport, FD_STEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Softplus,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Self::Tanh => z.tanh(),
            Self::Softplus => crate::layer::softplus(z),
            Self::Identity => z,
        }
    }

    /// Derivative given the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - a * a,
            Self::Softplus => sigmoid(z),
            Self::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "softplus" => Ok(Self::Softplus),
            "identity" => Ok(Self::Identity),
            other => Err(format!("unknown activation `{other}`")),
        }
    }
}

/// Fully connected layer, weights stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn xavier(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        let mut d = Self::zeros(inputs, outputs);
        for w in d.weights.iter_mut() {
            *w = rng.gen_range(-a..a);
        }
        d
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + w.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect()
    }
}

/// Small MLP emitting one relevance logit per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceTower {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

struct Trace {
    /// Input of every layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every hidden layer.
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

/// Gradient of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl RelevanceTower {
    /// Xavier-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: &[usize], outputs: usize, activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = Self::sizes(input_dim, hidden, outputs)?;
        let layers = sizes.windows(2).map(|w| Dense::xavier(w[0], w[1], &mut rng)).collect();
        Ok(Self { layers, activation })
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], outputs: usize, activation: Activation) -> Result<Self> {
        let sizes = Self::sizes(input_dim, hidden, outputs)?;
        let layers = sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect();
        Ok(Self { layers, activation })
    }

    fn sizes(input_dim: usize, hidden: &[usize], outputs: usize) -> Result<Vec<usize>> {
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(outputs);
        if sizes.contains(&0) {
            return Err(Error::config("tower layer sizes must be positive"));
        }
        Ok(sizes)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("tower has no layers"));
        }
        for (k, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return Err(Error::config(format!("tower layer {k} has inconsistent shapes")));
            }
            if k > 0 && self.layers[k - 1].outputs != l.inputs {
                return Err(Error::config(format!("tower layer {k} does not compose with layer {}", k - 1)));
            }
        }
        Ok(())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::Shape {
                what: "tower features",
                expected: self.input_dim(),
                actual: features.len(),
            });
        }
        Ok(())
    }

    /// Logits for every task.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(features)?.output)
    }

    fn trace(&self, features: &[f64]) -> Result<Trace> {
        self.check_input(features)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut x = features.to_vec();
        for (k, l) in self.layers.iter().enumerate() {
            let z = l.forward(&x);
            inputs.push(x);
            if k == last {
                return Ok(Trace { inputs, pre, output: z });
            }
            x = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre.push(z);
        }
        unreachable!("tower has at least one layer")
    }

    fn backprop(&self, trace: &Trace, d_out: &[f64], grads: &mut [DenseGrad]) {
        let mut delta = d_out.to_vec();
        for k in (0..self.layers.len()).rev() {
            let l = &self.layers[k];
            let x = &trace.inputs[k];
            let g = &mut grads[k];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.bias[o] += d;
                let row = &mut g.weights[o * l.inputs..(o + 1) * l.inputs];
                for (gw, xi) in row.iter_mut().zip(x) {
                    *gw += d * xi;
                }
            }
            if k == 0 {
                break;
            }
            let z = &trace.pre[k - 1];
            let mut next = vec![0.0; l.inputs];
            for (o, d) in delta.iter().enumerate() {
                let w = &l.weights[o * l.inputs..(o + 1) * l.inputs];
                for (n, w) in next.iter_mut().zip(w) {
                    *n += w * d;
                }
            }
            for (i, n) in next.iter_mut().enumerate() {
                *n *= self.activation.derivative(z[i], x[i]);
            }
            delta = next;
        }
    }

    fn zero_grads(&self) -> Vec<DenseGrad> {
        self.layers
            .iter()
            .map(|l| DenseGrad {
                weights: vec![0.0; l.weights.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.75 }
    }
}

impl LossWeights {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.alpha) || !ok(self.beta) {
            return Err(Error::config("loss weights must be finite and non-negative"));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::config("alpha and beta cannot both be zero"));
        }
        Ok(())
    }
}

/// Isotonic head of one task: single-unit layer plus its context table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsoHead {
    pub params: IsotonicParams,
    pub table: EmbeddingTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTowerConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub layer: IsotonicConfig,
    /// Give every context a learnable logit shift on top of its bucket offsets.
    pub context_bias: bool,
    pub loss_weights: LossWeights,
}

impl Default for DualTowerConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16, 16],
            activation: Activation::Tanh,
            layer: IsotonicConfig::default(),
            context_bias: true,
            loss_weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualTowerModel {
    pub layer: IsotonicConfig,
    pub tower: RelevanceTower,
    pub heads: Vec<IsoHead>,
    pub loss_weights: Vec<LossWeights>,
}

impl DualTowerModel {
    /// Fresh model: Xavier tower, identity isotonic heads with zero tables,
    /// so both heads start out equal.
    pub fn new<S: AsRef<str>>(
        feature_dim: usize,
        tasks: usize,
        contexts: &[S],
        cfg: &DualTowerConfig,
        seed: u64,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::config("dual tower needs at least one task"));
        }
        let layer = cfg.layer.with_units(1);
        layer.validate()?;
        cfg.loss_weights.validate()?;
        let tower = RelevanceTower::new(feature_dim, &cfg.hidden, tasks, cfg.activation, seed)?;
        let heads = (0..tasks)
            .map(|_| {
                let table = EmbeddingTable::new(&layer, contexts.iter().map(|c| c.as_ref()));
                IsoHead {
                    params: IsotonicParams::identity(&layer),
                    table: if cfg.context_bias { table.with_context_bias() } else { table },
                }
            })
            .collect();
        Ok(Self {
            layer,
            tower,
            heads,
            loss_weights: vec![cfg.loss_weights; tasks],
        })
    }

    /// Model sized for a dataset: one task per distinct `task_id` up to the
    /// largest, one context per distinct `context_id`.
    pub fn for_dataset(dataset: &LabeledDataset, cfg: &DualTowerConfig, seed: u64) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let tasks = dataset.rows.iter().map(|r| r.task_id as usize).max().unwrap_or(0) + 1;
        let contexts: BTreeSet<&str> = dataset.rows.iter().map(|r| r.context_id.as_str()).collect();
        let contexts: Vec<&str> = contexts.into_iter().collect();
        Self::new(dataset.feature_dim, tasks, &contexts, cfg, seed)
    }

    pub fn tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.tower.validate()?;
        self.layer.validate()?;
        if self.layer.units != 1 {
            return Err(Error::config("isotonic heads use single-unit layers"));
        }
        if self.heads.is_empty() || self.heads.len() != self.tower.output_dim() {
            return Err(Error::config(format!(
                "{} isotonic heads for {} tower outputs",
                self.heads.len(),
                self.tower.output_dim()
            )));
        }
        if self.loss_weights.len() != self.heads.len() {
            return Err(Error::config("one pair of loss weights per task"));
        }
        for w in &self.loss_weights {
            w.validate()?;
        }
        for h in &self.heads {
            h.params.check(&self.layer)?;
            if h.table.buckets() != self.layer.num_buckets() {
                return Err(Error::config("embedding rows do not match the layer's bucket count"));
            }
        }
        Ok(())
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.heads.len() {
            return Err(Error::data(format!("task {task} out of range ({} tasks)", self.heads.len())));
        }
        Ok(())
    }

    /// Calibration curve of `task` under `context`, as a function of the
    /// relevance logit.
    pub fn curve(&self, task: usize, context: &str) -> Result<Curve> {
        self.check_task(task)?;
        let h = &self.heads[task];
        h.table.curve(&h.params, &self.layer, 0, context)
    }

    /// All table curves of every head, indexed `[task][row]`.
    fn curves(&self) -> Result<Vec<Vec<Curve>>> {
        self.heads
            .iter()
            .map(|h| {
                (0..h.table.len())
                    .map(|i| h.table.curve_at(&h.params, &self.layer, 0, i))
                    .collect()
            })
            .collect()
    }

    /// `(y_inf, y_iso)` for every row.
    pub fn predict_rows(&self, rows: &[Row]) -> Result<(Vec<f64>, Vec<f64>)> {
        let curves = self.curves()?;
        let mut inf = Vec::with_capacity(rows.len());
        let mut iso = Vec::with_capacity(rows.len());
        for row in rows {
            let task = row.task_id as usize;
            self.check_task(task)?;
            let r = self.tower.forward(&row.features)?[task];
            let idx = self.heads[task].table.lookup(&row.context_id).row;
            inf.push(sigmoid(r));
            iso.push(curves[task][idx].prob(r)?);
        }
        Ok((inf, iso))
    }

    /// Add uniform noise of half-width `scale` to every parameter except
    /// frozen table rows.
    pub fn jitter(&mut self, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in self.blocks_mut() {
            if block.trainable {
                for v in block.values.iter_mut() {
                    *v += rng.gen_range(-scale..=scale);
                }
            }
        }
    }

    /// Parameter blocks in a fixed order: tower layers (weights, bias), then
    /// per head the base weights, bias, table rows and context biases.
    fn blocks_mut(&mut self) -> Vec<Block<'_>> {
        let mut out = Vec::new();
        for l in self.tower.layers.iter_mut() {
            out.push(Block::new(&mut l.weights, true));
            out.push(Block::new(&mut l.bias, true));
        }
        for h in self.heads.iter_mut() {
            let trainable: Vec<bool> = (0..h.table.len()).map(|i| h.table.is_trainable(i)).collect();
            out.push(Block::new(&mut h.params.weights[0], true));
            out.push(Block::new(&mut h.params.bias, true));
            let (rows, bias) = h.table.parts_mut();
            for (row, t) in rows.iter_mut().zip(&trainable) {
                out.push(Block::new(row, *t));
            }
            if let Some(b) = bias {
                out.push(Block::new(b, true));
            }
        }
        out
    }
}

struct Block<'a> {
    values: &'a mut [f64],
    trainable: bool,
}

impl<'a> Block<'a> {
    fn new(values: &'a mut [f64], trainable: bool) -> Self {
        Self { values, trainable }
    }
}

/// Relevance logit `r` of `task`.
pub fn tower_forward(features: &[f64], tower: &RelevanceTower, task: usize) -> Result<f64> {
    let out = tower.forward(features)?;
    out.get(task)
        .copied()
        .ok_or_else(|| Error::data(format!("task {task} out of range ({} tower outputs)", out.len())))
}

/// `sigmoid(r)`. Takes no context argument, so logged position cannot
/// influence it.
pub fn inference_head(features: &[f64], model: &DualTowerModel, task: usize) -> Result<f64> {
    Ok(sigmoid(tower_forward(features, &model.tower, task)?))
}

/// Serving path; same function as [`inference_head`].
pub fn infer_relevance(features: &[f64], model: &DualTowerModel, task: usize) -> Result<f64> {
    inference_head(features, model, task)
}

/// Isotonic head of `task` under `context`, applied to `r`.
pub fn isotonic_head(features: &[f64], context: &str, model: &DualTowerModel, task: usize) -> Result<f64> {
    let r = tower_forward(features, &model.tower, task)?;
    model.curve(task, context)?.prob(r)
}

/// Gradient of the joint loss over one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrad {
    pub d_weights: Vec<f64>,
    pub d_bias: f64,
    pub d_rows: Vec<Option<Vec<f64>>>,
    pub d_context_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGradient {
    pub tower: Vec<DenseGrad>,
    pub heads: Vec<HeadGrad>,
}

impl JointGradient {
    fn ensure_finite(&self) -> Result<()> {
        for (k, g) in self.tower.iter().enumerate() {
            ensure_finite(&format!("tower layer {k} weights"), &g.weights)?;
            ensure_finite(&format!("tower layer {k} bias"), &g.bias)?;
        }
        for h in &self.heads {
            ensure_finite("isotonic weights", &h.d_weights)?;
            ensure_finite("isotonic bias", &[h.d_bias])?;
            for r in h.d_rows.iter().flatten() {
                ensure_finite("embedding row", r)?;
            }
            ensure_finite("context bias", &h.d_context_bias)?;
        }
        Ok(())
    }

    fn blocks(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for g in &self.tower {
            out.push(g.weights.clone());
            out.push(g.bias.clone());
        }
        for h in &self.heads {
            out.push(h.d_weights.clone());
            out.push(vec![h.d_bias]);
            for r in &h.d_rows {
                out.push(r.clone().unwrap_or_else(|| vec![0.0; h.d_weights.len()]));
            }
            if !h.d_context_bias.is_empty() {
                out.push(h.d_context_bias.clone());
            }
        }
        out
    }
}

fn task_counts(model: &DualTowerModel, rows: &[&Row]) -> Result<Vec<usize>> {
    if rows.is_empty() {
        return Err(Error::Empty("loss batch"));
    }
    let mut counts = vec![0usize; model.tasks()];
    for r in rows {
        model.check_task(r.task_id as usize)?;
        counts[r.task_id as usize] += 1;
    }
    Ok(counts)
}

/// Loss and gradient of `sum_s alpha_s BCE_inf + beta_s BCE_iso`, each BCE a
/// mean over the rows of task `s`.
fn loss_and_gradient(model: &DualTowerModel, rows: &[&Row], curves: &[Vec<Curve>]) -> Result<(f64, JointGradient)> {
    let counts = task_counts(model, rows)?;
    let n = model.layer.num_buckets();
    let tasks = model.tasks();
    let mut tower = model.tower.zero_grads();
    let mut table_grads: Vec<TableGrad> = model.heads.iter().map(|h| TableGrad::new(h.table.len())).collect();
    let mut d_bias = vec![0.0; tasks];
    let mut loss = 0.0;
    let mut d_out = vec![0.0; tasks];

    for row in rows {
        let task = row.task_id as usize;
        let trace = model.tower.trace(&row.features)?;
        let r = trace.output[task];
        let w = model.loss_weights[task];
        let scale = 1.0 / counts[task] as f64;
        let idx = model.heads[task].table.lookup(&row.context_id).row;
        let curve = &curves[task][idx];
        let e = curve.evaluate(r)?;
        loss += scale * (w.alpha * bce_from_logit(r, row.label) + w.beta * bce_from_logit(e.logit, row.label));

        let g_inf = w.alpha * scale * (sigmoid(r) - row.label);
        let g_iso = w.beta * scale * (sigmoid(e.logit) - row.label);
        table_grads[task].add(idx, n, &e, g_iso);
        d_bias[task] += g_iso;
        let slope = if e.clipped == r { curve.slopes()[e.index] } else { 0.0 };
        d_out[task] = g_inf + g_iso * slope;
        model.tower.backprop(&trace, &d_out, &mut tower);
        d_out[task] = 0.0;
    }

    let heads = model
        .heads
        .iter()
        .zip(&table_grads)
        .enumerate()
        .map(|(s, (h, tg))| {
            let opt: Vec<Option<Curve>> = curves[s].iter().cloned().map(Some).collect();
            let (d_weights, d_rows) = tg.resolve(&h.table, &opt, model.layer.bucket_width);
            let d_context_bias = if h.table.has_context_bias() {
                tg.bias.clone()
            } else {
                Vec::new()
            };
            HeadGrad {
                d_weights,
                d_bias: d_bias[s],
                d_rows,
                d_context_bias,
            }
        })
        .collect();
    Ok((loss, JointGradient { tower, heads }))
}

/// Joint weighted BCE of a batch. Each row contributes to its own task only.
pub fn joint_loss(rows: &[Row], model: &DualTowerModel) -> Result<f64> {
    let refs: Vec<&Row> = rows.iter().collect();
    batch_loss(model, &refs, &model.curves()?)
}

fn batch_loss(model: &DualTowerModel, rows: &[&Row], curves: &[Vec<Curve>]) -> Result<f64> {
    let counts = task_counts(model, rows)?;
    let mut loss = 0.0;
    for row in rows {
        let task = row.task_id as usize;
        let r = model.tower.forward(&row.features)?[task];
        let w = model.loss_weights[task];
        let idx = model.heads[task].table.lookup(&row.context_id).row;
        let z = curves[task][idx].logit(r)?;
        loss += (w.alpha * bce_from_logit(r, row.label) + w.beta * bce_from_logit(z, row.label)) / counts[task] as f64;
    }
    Ok(loss)
}

/// Analytic gradient of [`joint_loss`].
pub fn joint_gradient(rows: &[Row], model: &DualTowerModel) -> Result<(f64, JointGradient)> {
    let refs: Vec<&Row> = rows.iter().collect();
    loss_and_gradient(model, &refs, &model.curves()?)
}

fn apply(model: &mut DualTowerModel, grads: &JointGradient, state: &mut OptimizerState) -> Result<()> {
    grads.ensure_finite()?;
    state.begin_step();
    for (k, (l, g)) in model.tower.layers.iter_mut().zip(&grads.tower).enumerate() {
        state.update(2 * k, &mut l.weights, &g.weights);
        state.update(2 * k + 1, &mut l.bias, &g.bias);
    }
    let mut slot = 2 * model.tower.layers.len();
    for (h, g) in model.heads.iter_mut().zip(&grads.heads) {
        let stride = h.table.len() + 3;
        crate::context::apply_table_step(
            &mut h.params,
            &mut h.table,
            std::slice::from_ref(&g.d_weights),
            &[g.d_bias],
            &g.d_rows,
            &g.d_context_bias,
            state,
            slot,
        )?;
        slot += stride;
    }
    Ok(())
}

/// Minibatch joint training of tower, base weights, tables and biases.
pub fn train_dual_tower(
    dataset: &LabeledDataset,
    model: &DualTowerModel,
    tc: &TrainConfig,
) -> Result<(DualTowerModel, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    tc.check()?;
    model.validate()?;
    let mut model = model.clone();
    let rows: Vec<&Row> = dataset.rows.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = OptimizerState::new(tc.optimizer, tc.learning_rate);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let mut batch: Vec<&Row> = Vec::with_capacity(tc.batch_size.min(rows.len()));

    for epoch in 0..tc.epochs {
        state.learning_rate = tc.rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size.min(rows.len())) {
            batch.clear();
            batch.extend(chunk.iter().map(|&k| rows[k]));
            let curves = model.curves()?;
            let (_, grads) = loss_and_gradient(&model, &batch, &curves)?;
            apply(&mut model, &grads, &mut state)?;
        }
        let loss = batch_loss(&model, &rows, &model.curves()?)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        trace.push(loss);
    }
    let final_loss = match trace.last() {
        Some(l) => *l,
        None => batch_loss(&model, &rows, &model.curves()?)?,
    };
    Ok((
        model,
        TrainReport {
            epochs: trace.len(),
            loss_trace: trace,
            final_loss,
            seed: tc.seed,
        },
    ))
}

/// Discrete state the loss is smooth within: active buckets, clipping, and
/// the rectifier gates of every curve.
fn signature(model: &DualTowerModel, rows: &[Row]) -> Result<Vec<u64>> {
    let curves = model.curves()?;
    let mut sig = Vec::new();
    for row in rows {
        let task = row.task_id as usize;
        let r = model.tower.forward(&row.features)?[task];
        let idx = model.heads[task].table.lookup(&row.context_id).row;
        let e = curves[task][idx].evaluate(r)?;
        sig.push(e.index as u64);
        sig.push(u64::from(e.clipped == r));
    }
    for per_task in &curves {
        for c in per_task {
            sig.extend(c.slopes().iter().map(|&s| u64::from(s > 0.0)));
        }
    }
    Ok(sig)
}

/// Gradients smaller than this are dominated by rounding in the difference
/// quotient and are not compared.
const GRAD_FLOOR: f64 = 1e-6;

/// Compare [`joint_gradient`] with central differences on randomly drawn
/// coordinates. A coordinate is skipped when moving it by `h` either way
/// changes an active bucket, a clip or a rectifier gate, or when both
/// gradients are below a small floor.
pub fn joint_gradient_check(model: &DualTowerModel, rows: &[Row], sample_count: usize, seed: u64) -> Result<GradCheck> {
    model.validate()?;
    let h = FD_STEP;
    let (_, grads) = joint_gradient(rows, model)?;
    let analytic = grads.blocks();
    let base_sig = signature(model, rows)?;
    let mut probe = model.clone();
    let sizes: Vec<usize> = probe.blocks_mut().iter().map(|b| b.values.len()).collect();
    debug_assert_eq!(sizes.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let max_attempts = sample_count.saturating_mul(200).max(200);
    let mut attempts = 0;
    while check.checked < sample_count && attempts < max_attempts {
        attempts += 1;
        let b = rng.gen_range(0..sizes.len());
        if sizes[b] == 0 {
            continue;
        }
        let k = rng.gen_range(0..sizes[b]);
        let original = probe.blocks_mut()[b].values[k];
        let mut eval = |v: f64| -> Result<(f64, bool)> {
            probe.blocks_mut()[b].values[k] = v;
            let same = signature(&probe, rows)? == base_sig;
            Ok((joint_loss(rows, &probe)?, same))
        };
        let (plus, same_plus) = eval(original + h)?;
        let (minus, same_minus) = eval(original - h)?;
        probe.blocks_mut()[b].values[k] = original;
        let a = analytic[b][k];
        let numeric = (plus - minus) / (2.0 * h);
        if !same_plus || !same_minus || (a.abs() < GRAD_FLOOR && numeric.abs() < GRAD_FLOOR) {
            check.skipped += 1;
            continue;
        }
        check.max_relative_error = check.max_relative_error.max(relative_error(a, numeric));
        check.checked += 1;
    }
    Ok(check)
}
