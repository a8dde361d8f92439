//! Loss, hand-derived gradients and training loops for stand-alone layers.
//!
//! The pre-activation is affine in the rectified weights, so every gradient is
//! closed form. For a batch the per-bucket gradients are accumulated as two
//! histograms (full activations and partial activations by active bucket) and
//! turned into weight gradients with a single suffix sum, which keeps a step at
//! `O(batch + N)` instead of `O(batch * N)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::layer::{logit, sigmoid, softplus, Curve, Evaluation, IsotonicConfig, IsotonicParams};
use crate::optim::{ensure_finite, OptimizerKind, OptimizerState};

/// Initial value of every bucket weight when training from scratch.
pub const W_INIT_FACTOR: f64 = 0.1;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BceLoss {
    pub value: f64,
    /// Number of predictions that fell outside `(0, 1)` and were clamped.
    pub clamped: usize,
}

/// Mean binary cross-entropy.
pub fn bce_loss(preds: &[f64], labels: &[f64]) -> Result<BceLoss> {
    if preds.is_empty() {
        return Err(Error::Empty("bce_loss predictions"));
    }
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            what: "bce_loss labels",
            expected: preds.len(),
            actual: labels.len(),
        });
    }
    let mut clamped = 0;
    let mut total = 0.0;
    for (&p, &t) in preds.iter().zip(labels) {
        if p.is_nan() || !t.is_finite() {
            return Err(Error::NonFinite("bce_loss input".into()));
        }
        if !(p > 0.0 && p < 1.0) {
            clamped += 1;
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= t * p.ln() + (1.0 - t) * (-p).ln_1p();
    }
    Ok(BceLoss {
        value: total / preds.len() as f64,
        clamped,
    })
}

/// BCE of `sigmoid(z)` against `t`, evaluated from the logit without
/// forming the probability.
#[inline]
pub fn bce_from_logit(z: f64, t: f64) -> f64 {
    softplus(z) - t * z
}

/// Gradients of the per-example loss with respect to one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub d_weights: Vec<Vec<f64>>,
    pub d_bias: Vec<f64>,
    pub d_offset: Option<Vec<f64>>,
    pub d_input: f64,
}

impl GradientBundle {
    pub fn zeros(cfg: &IsotonicConfig) -> Self {
        Self {
            d_weights: vec![vec![0.0; cfg.num_buckets()]; cfg.units],
            d_bias: vec![0.0; cfg.units],
            d_offset: None,
            d_input: 0.0,
        }
    }
}

/// Per-bucket gradient histograms for one curve.
#[derive(Debug, Clone)]
pub(crate) struct BucketGrad {
    full: Vec<f64>,
    partial: Vec<f64>,
}

impl BucketGrad {
    pub(crate) fn new(buckets: usize) -> Self {
        Self {
            full: vec![0.0; buckets],
            partial: vec![0.0; buckets],
        }
    }

    /// Record `dL/dz = g` for an input evaluated at `e`.
    #[inline]
    pub(crate) fn add(&mut self, e: &Evaluation, g: f64) {
        self.full[e.index] += g;
        self.partial[e.index] += g * e.partial;
    }

    /// `dL/dslope_j` for every bucket, then zeroed where the slope is rectified.
    pub(crate) fn gated(&self, width: f64, slopes: &[f64]) -> Vec<f64> {
        let n = self.full.len();
        let mut out = vec![0.0; n];
        let mut above = 0.0;
        for j in (0..n).rev() {
            if slopes[j] > 0.0 {
                out[j] = width * above + self.partial[j];
            }
            above += self.full[j];
        }
        out
    }
}

/// Gradients of `BCE(forward(x), label)` for one example.
pub fn backward(
    x: f64,
    label: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    offset: Option<&[f64]>,
) -> Result<GradientBundle> {
    let curve = Curve::new(params, cfg, unit, offset)?;
    let e = curve.evaluate(x)?;
    let g = sigmoid(e.logit) - label;
    let mut acc = BucketGrad::new(cfg.num_buckets());
    acc.add(&e, g);
    let row = acc.gated(cfg.bucket_width, curve.slopes());
    let mut out = GradientBundle::zeros(cfg);
    out.d_bias[unit] = g;
    out.d_input = if e.clipped == x {
        g * curve.slopes()[e.index]
    } else {
        0.0
    };
    out.d_offset = offset.map(|_| row.clone());
    out.d_weights[unit] = row;
    Ok(out)
}

/// Apply one optimizer step. Nothing is modified if any gradient is non-finite.
pub fn step(params: &mut IsotonicParams, grads: &GradientBundle, state: &mut OptimizerState) -> Result<()> {
    if grads.d_weights.len() != params.weights.len() || grads.d_bias.len() != params.bias.len() {
        return Err(Error::Shape {
            what: "gradient bundle",
            expected: params.weights.len(),
            actual: grads.d_weights.len(),
        });
    }
    for (u, (row, g)) in params.weights.iter().zip(&grads.d_weights).enumerate() {
        if row.len() != g.len() {
            return Err(Error::Shape {
                what: "gradient row",
                expected: row.len(),
                actual: g.len(),
            });
        }
        ensure_finite(&format!("weight row {u}"), g)?;
    }
    ensure_finite("bias", &grads.d_bias)?;

    state.begin_step();
    let units = params.weights.len();
    for (u, row) in params.weights.iter_mut().enumerate() {
        state.update(u, row, &grads.d_weights[u]);
    }
    state.update(units, &mut params.bias, &grads.d_bias);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Starting value of every bucket weight; `1.0` starts at the identity map.
    pub init_weight: f64,
    /// Learning rate multiplier applied after every epoch.
    #[serde(default = "unit_decay")]
    pub lr_decay: f64,
}

fn unit_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 256,
            learning_rate: 5e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            init_weight: W_INIT_FACTOR,
            lr_decay: 0.9,
        }
    }
}

impl TrainConfig {
    /// Defaults for post-hoc calibration of a frozen scorer: start at the
    /// identity mapping and use full-batch steps.
    pub fn calibration() -> Self {
        Self {
            epochs: 300,
            batch_size: usize::MAX,
            learning_rate: 1e-2,
            init_weight: 1.0,
            lr_decay: 1.0,
            ..Self::default()
        }
    }

    /// Defaults for joint dual-tower training. The decay matters: without it
    /// minibatch noise keeps the per-context curves from settling.
    pub fn dual_tower() -> Self {
        Self {
            epochs: 8,
            batch_size: 256,
            learning_rate: 3e-3,
            lr_decay: 0.7,
            ..Self::default()
        }
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay.powi(epoch.min(i32::MAX as usize) as i32)
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning rate must be positive and finite"));
        }
        if !(self.lr_decay.is_finite() && self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config("learning rate decay must lie in (0, 1]"));
        }
        if !self.init_weight.is_finite() {
            return Err(Error::config("initial weight must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    x: f64,
    t: f64,
    unit: usize,
}

fn mean_loss(samples: &[Sample], curves: &[Curve]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        total += bce_from_logit(curves[s.unit].logit(s.x)?, s.t);
    }
    Ok(total / samples.len() as f64)
}

fn curves_of(params: &IsotonicParams, cfg: &IsotonicConfig) -> Result<Vec<Curve>> {
    (0..cfg.units).map(|u| Curve::new(params, cfg, u, None)).collect()
}

fn train_samples(
    samples: &[Sample],
    cfg: &IsotonicConfig,
    tc: &TrainConfig,
    mut params: IsotonicParams,
) -> Result<(IsotonicParams, TrainReport)> {
    if samples.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    tc.check()?;
    params.check(cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut state = OptimizerState::new(tc.optimizer, tc.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(tc.epochs);
    let n = cfg.num_buckets();

    for epoch in 0..tc.epochs {
        state.learning_rate = tc.rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(tc.batch_size.min(samples.len())) {
            let curves = curves_of(&params, cfg)?;
            let mut acc = vec![BucketGrad::new(n); cfg.units];
            let mut d_bias = vec![0.0; cfg.units];
            let scale = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let s = samples[k];
                let e = curves[s.unit].evaluate(s.x)?;
                let g = (sigmoid(e.logit) - s.t) * scale;
                acc[s.unit].add(&e, g);
                d_bias[s.unit] += g;
            }
            let grads = GradientBundle {
                d_weights: acc
                    .iter()
                    .zip(&curves)
                    .map(|(a, c)| a.gated(cfg.bucket_width, c.slopes()))
                    .collect(),
                d_bias,
                d_offset: None,
                d_input: 0.0,
            };
            step(&mut params, &grads, &mut state)?;
        }
        let loss = mean_loss(samples, &curves_of(&params, cfg)?)?;
        if !loss.is_finite() {
            return Err(Error::Divergence { epoch, loss });
        }
        trace.push(loss);
    }

    let final_loss = match trace.last() {
        Some(l) => *l,
        None => mean_loss(samples, &curves_of(&params, cfg)?)?,
    };
    Ok((
        params,
        TrainReport {
            epochs: trace.len(),
            loss_trace: trace,
            final_loss,
            seed: tc.seed,
        },
    ))
}

/// Train a layer on rows with scalar logit inputs. Each row's `task_id`
/// selects the unit it trains.
pub fn fit(
    dataset: &LabeledDataset,
    cfg: &IsotonicConfig,
    tc: &TrainConfig,
) -> Result<(IsotonicParams, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    cfg.validate()?;
    let inputs = dataset.inputs()?;
    let mut samples = Vec::with_capacity(dataset.len());
    for (k, (row, x)) in dataset.rows.iter().zip(inputs).enumerate() {
        let unit = row.task_id as usize;
        if unit >= cfg.units {
            return Err(Error::data(format!(
                "row {k}: task {unit} has no isotonic unit ({} configured)",
                cfg.units
            )));
        }
        if !(0.0..=1.0).contains(&row.label) {
            return Err(Error::data(format!("row {k}: label {} outside [0, 1]", row.label)));
        }
        samples.push(Sample { x, t: row.label, unit });
    }
    train_samples(&samples, cfg, tc, IsotonicParams::constant(cfg, tc.init_weight))
}

/// Independent per-context calibration mappings for a frozen scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub config: IsotonicConfig,
    pub contexts: BTreeMap<String, IsotonicParams>,
    /// Contexts that had no samples and were given identity parameters.
    pub fallback: Vec<String>,
    pub reports: BTreeMap<String, TrainReport>,
}

impl CalibrationSet {
    pub fn params(&self, context: &str) -> Result<&IsotonicParams> {
        self.contexts
            .get(context)
            .ok_or_else(|| Error::data(format!("unknown calibration context `{context}`")))
    }

    /// Calibrated probability for an upstream logit.
    pub fn predict_logit(&self, x: f64, context: &str) -> Result<f64> {
        crate::layer::forward(x, self.params(context)?, &self.config, 0, None)
    }

    /// Calibrated probability for an upstream probability.
    pub fn predict(&self, score: f64, context: &str) -> Result<f64> {
        if !(score > 0.0 && score < 1.0) {
            return Err(Error::data(format!("score {score} outside (0, 1)")));
        }
        self.predict_logit(logit(score), context)
    }
}

/// Fit one isotonic mapping per context on the frozen outputs of an upstream
/// model. Scores are probabilities and are moved to logit space first.
/// Contexts listed in `vocabulary` but absent from the data receive identity
/// parameters and are reported in `fallback`.
pub fn calibrate_frozen(
    scores: &[f64],
    labels: &[f64],
    contexts: &[String],
    vocabulary: &[String],
    cfg: &IsotonicConfig,
    tc: &TrainConfig,
) -> Result<CalibrationSet> {
    if scores.len() != labels.len() || scores.len() != contexts.len() {
        return Err(Error::Shape {
            what: "calibration columns",
            expected: scores.len(),
            actual: labels.len().min(contexts.len()),
        });
    }
    cfg.validate()?;
    if cfg.units != 1 {
        return Err(Error::config("per-context calibration uses single-unit layers"));
    }
    let mut groups: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for (k, ((&s, &t), c)) in scores.iter().zip(labels).zip(contexts).enumerate() {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::data(format!("row {k}: score {s} outside (0, 1)")));
        }
        groups.entry(c.clone()).or_default().push(Sample {
            x: logit(s),
            t,
            unit: 0,
        });
    }
    if groups.is_empty() && vocabulary.is_empty() {
        return Err(Error::Empty("calibration scores"));
    }

    let mut out = CalibrationSet {
        config: *cfg,
        contexts: BTreeMap::new(),
        fallback: Vec::new(),
        reports: BTreeMap::new(),
    };
    for (context, samples) in &groups {
        let init = IsotonicParams::constant(cfg, tc.init_weight);
        let (params, report) = train_samples(samples, cfg, tc, init)?;
        out.contexts.insert(context.clone(), params);
        out.reports.insert(context.clone(), report);
    }
    let known: BTreeSet<&String> = groups.keys().collect();
    for c in vocabulary {
        if !known.contains(c) && !out.contexts.contains_key(c) {
            out.contexts.insert(c.clone(), IsotonicParams::identity(cfg));
            out.fallback.push(c.clone());
        }
    }
    Ok(out)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Loss evaluated by the literal activation-vector dot product rather than the
/// prefix-sum path used by [`Curve`].
fn literal_loss(x: f64, t: f64, row: &[f64], bias: f64, cfg: &IsotonicConfig) -> f64 {
    let xt = cfg.clip(x).expect("finite input");
    let a = cfg.activation(xt);
    let dot: f64 = a.values.iter().zip(row).map(|(a, w)| a * w.max(0.0)).sum();
    bce_from_logit(dot + cfg.residue() + bias, t)
}

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1e-12)
}

/// Compare [`backward`] against central differences at `sample_count`
/// randomly drawn (input, label, coordinate) triples. Coordinates within
/// `10 h` of a rectifier kink, a bucket edge or a clipping bound are skipped
/// and redrawn. For the input coordinate the kink in question is the one of
/// the active bucket's weight, since that weight is the derivative.
pub fn finite_difference_check(
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    sample_count: usize,
    seed: u64,
) -> Result<GradCheck> {
    params.check(cfg)?;
    let h = FD_STEP;
    let margin = 10.0 * h;
    let n = cfg.num_buckets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = GradCheck {
        max_relative_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let max_attempts = sample_count.saturating_mul(100).max(100);
    let mut attempts = 0;
    while check.checked < sample_count && attempts < max_attempts {
        attempts += 1;
        let unit = rng.gen_range(0..cfg.units);
        let x = rng.gen_range(cfg.lower_bound..cfg.upper_bound);
        let t = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        let coord = rng.gen_range(0..n + 2);
        let row = &params.weights[unit];
        let b = params.bias[unit];
        let grads = backward(x, t, params, cfg, unit, None)?;

        let (analytic, numeric) = if coord < n {
            if row[coord].abs() < margin {
                check.skipped += 1;
                continue;
            }
            let mut plus = row.clone();
            let mut minus = row.clone();
            plus[coord] += h;
            minus[coord] -= h;
            let num = (literal_loss(x, t, &plus, b, cfg) - literal_loss(x, t, &minus, b, cfg)) / (2.0 * h);
            (grads.d_weights[unit][coord], num)
        } else if coord == n {
            let num = (literal_loss(x, t, row, b + h, cfg) - literal_loss(x, t, row, b - h, cfg)) / (2.0 * h);
            (grads.d_bias[unit], num)
        } else {
            let xt = cfg.clip(x)?;
            let a = cfg.activation(xt);
            let edge_gap = a.partial().min(cfg.bucket_width - a.partial());
            let lo_gap = (x - (cfg.lower_bound + cfg.clip_epsilon)).abs();
            let hi_gap = (x - (cfg.upper_bound - cfg.clip_epsilon)).abs();
            let slope_gap = row[a.index].abs();
            if edge_gap < margin || lo_gap < margin || hi_gap < margin || slope_gap < margin {
                check.skipped += 1;
                continue;
            }
            let num = (literal_loss(x + h, t, row, b, cfg) - literal_loss(x - h, t, row, b, cfg)) / (2.0 * h);
            (grads.d_input, num)
        };
        check.max_relative_error = check.max_relative_error.max(relative_error(analytic, numeric));
        check.checked += 1;
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Row;
    use crate::layer::forward_logit;

    #[test]
    fn bce_examples() {
        let l = bce_loss(&[0.5], &[1.0]).unwrap();
        assert!((l.value - 2f64.ln()).abs() < 1e-12);
        assert_eq!(l.clamped, 0);

        let l = bce_loss(&[1.0 - PROB_CLAMP], &[1.0]).unwrap();
        assert!(l.value < 1e-11);

        let l = bce_loss(&[0.8, 0.2], &[1.0, 0.0]).unwrap();
        assert!((l.value - 0.223_143_551_314_209_7).abs() < 1e-12);
    }

    #[test]
    fn bce_errors_and_clamping() {
        assert!(matches!(bce_loss(&[], &[]), Err(Error::Empty(_))));
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
        let l = bce_loss(&[1.0, 0.0, 1.5], &[1.0, 0.0, 1.0]).unwrap();
        assert_eq!(l.clamped, 3);
        assert!(l.value.is_finite());
    }

    #[test]
    fn logit_form_matches_probability_form() {
        for z in [-12.0, -1.3, 0.0, 0.4, 6.0] {
            for t in [0.0, 1.0] {
                let p = bce_loss(&[sigmoid(z)], &[t]).unwrap().value;
                assert!((bce_from_logit(z, t) - p).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn backward_zero_when_prediction_exact() {
        let cfg = IsotonicConfig::default();
        let p = IsotonicParams::identity(&cfg);
        let y = crate::layer::forward(0.7, &p, &cfg, 0, None).unwrap();
        let g = backward(0.7, y, &p, &cfg, 0, None).unwrap();
        assert!(g.d_weights[0].iter().all(|v| *v == 0.0));
        assert_eq!(g.d_bias[0], 0.0);
        assert_eq!(g.d_input, 0.0);
    }

    #[test]
    fn backward_dead_weights() {
        let cfg = IsotonicConfig::default();
        let p = IsotonicParams::constant(&cfg, -0.5);
        let g = backward(1.0, 1.0, &p, &cfg, 0, None).unwrap();
        assert!(g.d_weights[0].iter().all(|v| *v == 0.0));
        let y = sigmoid(cfg.residue());
        assert!((g.d_bias[0] - (y - 1.0)).abs() < 1e-15);
        assert_eq!(g.d_input, 0.0);
    }

    #[test]
    fn backward_matches_closed_form() {
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let mut p = IsotonicParams::initial(&cfg);
        p.weights[0][3] = -1.0;
        let x = -16.05;
        let offset = vec![0.05; cfg.num_buckets()];
        let g = backward(x, 1.0, &p, &cfg, 0, Some(&offset)).unwrap();
        let y = sigmoid(forward_logit(x, &p, &cfg, 0, Some(&offset)).unwrap());
        let a = cfg.activation(x);
        for j in 0..cfg.num_buckets() {
            let gate = if p.weights[0][j] + offset[j] > 0.0 { 1.0 } else { 0.0 };
            let expect = (y - 1.0) * a.values[j] * gate;
            assert!((g.d_weights[0][j] - expect).abs() < 1e-15, "bucket {j}");
        }
        assert_eq!(g.d_offset.as_ref().unwrap(), &g.d_weights[0]);
        assert!((g.d_input - (y - 1.0) * 0.15).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_identity_and_dead() {
        let cfg = IsotonicConfig::default();
        let c = finite_difference_check(&IsotonicParams::identity(&cfg), &cfg, 100, 3).unwrap();
        assert_eq!(c.checked, 100);
        assert!(c.max_relative_error < 1e-5, "{c:?}");

        let dead = IsotonicParams::constant(&cfg, -1.0);
        let c = finite_difference_check(&dead, &cfg, 100, 3).unwrap();
        assert_eq!(c.checked, 100);
        assert!(c.max_relative_error < 1e-5, "{c:?}");
    }

    #[test]
    fn gradient_check_skips_kinks() {
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let near_kink = IsotonicParams::constant(&cfg, 1e-7);
        let c = finite_difference_check(&near_kink, &cfg, 20, 1).unwrap();
        // only the bias coordinate survives the skip rule
        assert!(c.checked > 0);
        assert!(c.skipped > 0);
        assert!(c.max_relative_error < 1e-5, "{c:?}");
    }

    #[test]
    fn step_rejects_non_finite() {
        let cfg = IsotonicConfig::default();
        let mut p = IsotonicParams::identity(&cfg);
        let before = p.clone();
        let mut g = GradientBundle::zeros(&cfg);
        g.d_weights[0][5] = f64::NAN;
        let mut s = OptimizerState::adam(0.1);
        assert!(step(&mut p, &g, &mut s).is_err());
        assert_eq!(p, before);
        assert_eq!(s.steps(), 0);
    }

    #[test]
    fn sgd_step_on_params() {
        let cfg = IsotonicConfig::new(0.0, 1.0, 1.0, 1).unwrap();
        let mut p = IsotonicParams::identity(&cfg);
        let mut g = GradientBundle::zeros(&cfg);
        g.d_weights[0] = vec![1.0, 1.0];
        step(&mut p, &g, &mut OptimizerState::sgd(0.1)).unwrap();
        assert!(p.weights[0].iter().all(|w| (w - 0.9).abs() < 1e-15));
    }

    fn single_point(n: usize) -> LabeledDataset {
        let mut d = LabeledDataset::new(0);
        for _ in 0..n {
            d.push(Row::scalar(0.0, 1.0)).unwrap();
        }
        d
    }

    #[test]
    fn fit_single_point_drives_output_up() {
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let mut prev = 0.0;
        for epochs in [1, 3, 10, 30] {
            let tc = TrainConfig {
                epochs,
                batch_size: 1,
                learning_rate: 1e-2,
                lr_decay: 1.0,
                ..TrainConfig::default()
            };
            let (p, r) = fit(&single_point(8), &cfg, &tc).unwrap();
            assert_eq!(r.loss_trace.len(), epochs);
            let y = crate::layer::forward(0.0, &p, &cfg, 0, None).unwrap();
            assert!(y > prev, "epochs {epochs}: {y} <= {prev}");
            prev = y;
        }
        assert!(prev > 0.9);
    }

    #[test]
    fn fit_zero_epochs_keeps_init() {
        let cfg = IsotonicConfig::default();
        let tc = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (p, r) = fit(&single_point(3), &cfg, &tc).unwrap();
        assert_eq!(p, IsotonicParams::initial(&cfg));
        assert!(r.loss_trace.is_empty());
        assert!(r.final_loss > 0.0);
    }

    #[test]
    fn fit_errors() {
        let cfg = IsotonicConfig::default();
        let tc = TrainConfig::default();
        assert!(matches!(fit(&LabeledDataset::new(0), &cfg, &tc), Err(Error::Empty(_))));
        let mut d = single_point(2);
        d.rows[1].task_id = 4;
        assert!(fit(&d, &cfg, &tc).is_err());
        let mut d = single_point(2);
        d.rows[0].input = None;
        assert!(fit(&d, &cfg, &tc).is_err());
    }

    #[test]
    fn fit_is_deterministic() {
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let mut d = LabeledDataset::new(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let t = if rng.gen_bool(sigmoid(x)) { 1.0 } else { 0.0 };
            d.push(Row::scalar(x, t)).unwrap();
        }
        let tc = TrainConfig {
            epochs: 5,
            batch_size: 32,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = fit(&d, &cfg, &tc).unwrap();
        let b = fit(&d, &cfg, &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn prefix_coupling() {
        // changing bucket j moves every input whose active bucket lies above j
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let w: Vec<f64> = (0..cfg.num_buckets()).map(|_| rng.gen_range(0.05..2.0)).collect();
            let p = IsotonicParams::new(&cfg, vec![w], vec![0.0]).unwrap();
            let j = rng.gen_range(0..cfg.num_buckets() - 1);
            let mut q = p.clone();
            q.weights[0][j] += 0.5;
            for _ in 0..20 {
                let x = rng.gen_range(-17.0..8.0);
                let i = cfg.bucket_index(cfg.clip(x).unwrap());
                let z0 = forward_logit(x, &p, &cfg, 0, None).unwrap();
                let z1 = forward_logit(x, &q, &cfg, 0, None).unwrap();
                if i > j {
                    assert!((z1 - z0 - 0.5 * cfg.bucket_width).abs() < 1e-9);
                } else if i < j {
                    assert_eq!(z0, z1);
                }
            }
        }
    }

    #[test]
    fn calibration_fallback_for_missing_context() {
        let cfg = IsotonicConfig::default().with_bucket_width(0.2);
        let scores = vec![0.2, 0.7, 0.4, 0.9];
        let labels = vec![0.0, 1.0, 0.0, 1.0];
        let ctx: Vec<String> = ["a", "a", "a", "a"].iter().map(|s| s.to_string()).collect();
        let vocab = vec!["a".to_string(), "b".to_string()];
        let tc = TrainConfig {
            epochs: 2,
            ..TrainConfig::calibration()
        };
        let set = calibrate_frozen(&scores, &labels, &ctx, &vocab, &cfg, &tc).unwrap();
        assert_eq!(set.fallback, vec!["b".to_string()]);
        assert_eq!(set.contexts["b"], IsotonicParams::identity(&cfg));
        assert!((set.predict(0.3, "b").unwrap() - 0.3).abs() < 1e-9);
        assert!(set.predict(0.3, "zzz").is_err());
        assert!(calibrate_frozen(&[1.2], &[1.0], &ctx[..1], &[], &cfg, &tc).is_err());
    }
}
