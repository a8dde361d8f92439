//! Forward pass of the isotonic layer.
//!
//! An input logit is clipped to `[L + eps, U - eps]`, bucketized into `N`
//! fixed-width buckets, and expanded into a cumulative activation vector.
//! The pre-activation is the dot product of that vector with the rectified
//! bucket weights plus the residue `L - width` and a learned bias, so that
//! unit weights reproduce the clipped input exactly.
//!
//! Evaluation goes through [`Curve`], which caches the running sum of
//! `width * relu(w)` per bucket. The running sum is what makes monotonicity
//! hold bit-for-bit in floating point, not just in exact arithmetic: the value
//! just below a bucket edge can never exceed the cached prefix at that edge.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logistic function. Written as a composition of monotone floating point
/// operations, so it is non-decreasing over all of `f64`.
#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Inverse of [`sigmoid`] for `p` in `(0, 1)`.
#[inline]
pub fn logit(p: f64) -> f64 {
    p.ln() - (-p).ln_1p()
}

/// `ln(1 + e^z)` without overflow.
#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Bucket geometry shared by every isotonic unit in a layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsotonicConfig {
    pub lower_bound: f64,
    pub upper_bound: f64,
    pub bucket_width: f64,
    pub units: usize,
    pub clip_epsilon: f64,
}

impl Default for IsotonicConfig {
    fn default() -> Self {
        Self {
            lower_bound: -17.0,
            upper_bound: 8.0,
            bucket_width: Self::DEFAULT_BUCKET_WIDTH,
            units: 1,
            clip_epsilon: 1e-9,
        }
    }
}

/// Upper limit on the bucket count, to keep weight matrices allocatable.
const MAX_BUCKETS: f64 = 1e7;

impl IsotonicConfig {
    pub const DEFAULT_BUCKET_WIDTH: f64 = 0.05;
    /// Coarser width used by the multi-task reference layout (12 units).
    pub const COARSE_BUCKET_WIDTH: f64 = 0.2;

    pub fn new(lower_bound: f64, upper_bound: f64, bucket_width: f64, units: usize) -> Result<Self> {
        let cfg = Self {
            lower_bound,
            upper_bound,
            bucket_width,
            units,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// `L = -17`, `U = 8`, width `0.2`, twelve units.
    pub fn coarse_multi_task() -> Self {
        Self {
            bucket_width: Self::COARSE_BUCKET_WIDTH,
            units: 12,
            ..Self::default()
        }
    }

    pub fn with_units(mut self, units: usize) -> Self {
        self.units = units;
        self
    }

    pub fn with_bucket_width(mut self, width: f64) -> Self {
        self.bucket_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            lower_bound: l,
            upper_bound: u,
            bucket_width: w,
            units,
            clip_epsilon: eps,
        } = *self;
        if !(l.is_finite() && u.is_finite() && w.is_finite() && eps.is_finite()) {
            return Err(Error::config("bounds, bucket width and clip epsilon must be finite"));
        }
        if l >= u {
            return Err(Error::config(format!("lower bound {l} must be below upper bound {u}")));
        }
        if w <= 0.0 {
            return Err(Error::config(format!("bucket width must be positive, got {w}")));
        }
        if eps <= 0.0 || eps >= w {
            return Err(Error::config(format!(
                "clip epsilon must lie in (0, bucket width), got {eps}"
            )));
        }
        if 2.0 * eps >= u - l {
            return Err(Error::config("clip epsilon leaves an empty clipping interval"));
        }
        if units == 0 {
            return Err(Error::config("at least one isotonic unit is required"));
        }
        if (u - l) / w > MAX_BUCKETS {
            return Err(Error::config(format!(
                "bucket width {w} yields more than {MAX_BUCKETS} buckets"
            )));
        }
        Ok(())
    }

    /// Tolerance used to snap bucket-index quotients onto an exact integer edge.
    ///
    /// Quotients such as `17.05 / 0.05` land a few ulps away from the integer the
    /// decimal arithmetic intends. The tolerance stays below `eps / width` so the
    /// top clipped input still resolves to the last bucket.
    fn edge_tolerance(&self) -> f64 {
        (0.25 * self.clip_epsilon / self.bucket_width).min(1e-10)
    }

    /// `N = ceil((U - L) / width) + 1`.
    pub fn num_buckets(&self) -> usize {
        let q = (self.upper_bound - self.lower_bound) / self.bucket_width;
        let snapped = q.round();
        let spans = if (q - snapped).abs() <= 1e-9 * snapped.max(1.0) {
            snapped
        } else {
            q.ceil()
        };
        spans as usize + 1
    }

    /// Constant offset `L - width` aligning the cumulative sum with the input.
    pub fn residue(&self) -> f64 {
        self.lower_bound - self.bucket_width
    }

    /// Clamp `x` into `[L + eps, U - eps]`.
    pub fn clip(&self, x: f64) -> Result<f64> {
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("isotonic layer input {x}")));
        }
        Ok(x.clamp(self.lower_bound + self.clip_epsilon, self.upper_bound - self.clip_epsilon))
    }

    /// `floor((x - L + width) / width)` clamped to `[0, N - 1]`. Inputs sitting
    /// on a bucket edge go to the higher bucket.
    pub fn bucket_index(&self, clipped: f64) -> usize {
        let q = (clipped - self.lower_bound + self.bucket_width) / self.bucket_width;
        let i = (q + self.edge_tolerance()).floor();
        let last = self.num_buckets() - 1;
        if i <= 0.0 {
            0
        } else {
            (i as usize).min(last)
        }
    }

    /// Partial activation of the active bucket `index`, clamped to `[0, width]`.
    fn partial(&self, clipped: f64, index: usize) -> f64 {
        let shifted = clipped - self.lower_bound + self.bucket_width;
        (shifted - index as f64 * self.bucket_width).clamp(0.0, self.bucket_width)
    }

    pub fn activation(&self, clipped: f64) -> ActivationVector {
        let n = self.num_buckets();
        let index = self.bucket_index(clipped);
        let mut values = vec![0.0; n];
        values[..index].fill(self.bucket_width);
        values[index] = self.partial(clipped, index);
        ActivationVector {
            values,
            input: clipped,
            index,
        }
    }
}

/// Cumulative bucket activations for one clipped input.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationVector {
    pub values: Vec<f64>,
    pub input: f64,
    /// Index of the partially filled bucket.
    pub index: usize,
}

impl ActivationVector {
    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn partial(&self) -> f64 {
        self.values[self.index]
    }
}

/// Learnable weights (`units x N`, unconstrained) and per-unit biases.
///
/// The residue is derived from the config and is never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IsotonicParams {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl IsotonicParams {
    pub fn new(cfg: &IsotonicConfig, weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        let params = Self { weights, bias };
        params.check(cfg)?;
        Ok(params)
    }

    /// Every weight set to `value`, biases zero.
    pub fn constant(cfg: &IsotonicConfig, value: f64) -> Self {
        Self {
            weights: vec![vec![value; cfg.num_buckets()]; cfg.units],
            bias: vec![0.0; cfg.units],
        }
    }

    /// Unit weights and zero bias: `z(x) = clip(x)`.
    pub fn identity(cfg: &IsotonicConfig) -> Self {
        Self::constant(cfg, 1.0)
    }

    /// Default training start, `w = 0.1`.
    pub fn initial(cfg: &IsotonicConfig) -> Self {
        Self::constant(cfg, crate::training::W_INIT_FACTOR)
    }

    pub fn units(&self) -> usize {
        self.bias.len()
    }

    pub fn check(&self, cfg: &IsotonicConfig) -> Result<()> {
        cfg.validate()?;
        if self.weights.len() != cfg.units {
            return Err(Error::Shape {
                what: "weight rows",
                expected: cfg.units,
                actual: self.weights.len(),
            });
        }
        if self.bias.len() != cfg.units {
            return Err(Error::Shape {
                what: "bias",
                expected: cfg.units,
                actual: self.bias.len(),
            });
        }
        let n = cfg.num_buckets();
        for row in &self.weights {
            if row.len() != n {
                return Err(Error::Shape {
                    what: "weight columns",
                    expected: n,
                    actual: row.len(),
                });
            }
        }
        Ok(())
    }

    /// Rectified weights of one unit after adding an optional offset row.
    pub fn effective_weights(&self, unit: usize, offset: Option<&[f64]>) -> Vec<f64> {
        let row = &self.weights[unit];
        match offset {
            Some(o) => row.iter().zip(o).map(|(w, e)| (w + e).max(0.0)).collect(),
            None => row.iter().map(|w| w.max(0.0)).collect(),
        }
    }
}

/// Result of evaluating a curve at one input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub clipped: f64,
    pub index: usize,
    pub partial: f64,
    /// Pre-sigmoid output `z`.
    pub logit: f64,
}

/// One unit's calibration curve with precomputed prefix sums.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    cfg: IsotonicConfig,
    slopes: Vec<f64>,
    prefix: Vec<f64>,
    shift: f64,
}

impl Curve {
    /// Build from already non-negative slopes (rectified weights).
    pub fn from_slopes(cfg: &IsotonicConfig, slopes: Vec<f64>, bias: f64) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.num_buckets();
        if slopes.len() != n {
            return Err(Error::Shape {
                what: "curve slopes",
                expected: n,
                actual: slopes.len(),
            });
        }
        debug_assert!(slopes.iter().all(|s| *s >= 0.0));
        let mut prefix = Vec::with_capacity(n + 1);
        let mut acc = 0.0;
        prefix.push(acc);
        for s in &slopes {
            acc += cfg.bucket_width * s;
            prefix.push(acc);
        }
        Ok(Self {
            cfg: *cfg,
            slopes,
            prefix,
            shift: cfg.residue() + bias,
        })
    }

    /// Curve of `unit` with effective weights `relu(w + offset)`.
    pub fn new(
        params: &IsotonicParams,
        cfg: &IsotonicConfig,
        unit: usize,
        offset: Option<&[f64]>,
    ) -> Result<Self> {
        Self::with_extra_bias(params, cfg, unit, offset, 0.0)
    }

    pub(crate) fn with_extra_bias(
        params: &IsotonicParams,
        cfg: &IsotonicConfig,
        unit: usize,
        offset: Option<&[f64]>,
        extra_bias: f64,
    ) -> Result<Self> {
        params.check(cfg)?;
        if unit >= cfg.units {
            return Err(Error::config(format!("unit {unit} out of range for {} units", cfg.units)));
        }
        if let Some(o) = offset {
            if o.len() != cfg.num_buckets() {
                return Err(Error::Shape {
                    what: "weight offset",
                    expected: cfg.num_buckets(),
                    actual: o.len(),
                });
            }
        }
        let slopes = params.effective_weights(unit, offset);
        Self::from_slopes(cfg, slopes, params.bias[unit] + extra_bias)
    }

    pub fn config(&self) -> &IsotonicConfig {
        &self.cfg
    }

    /// Rectified per-bucket slopes.
    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    pub fn evaluate(&self, x: f64) -> Result<Evaluation> {
        let clipped = self.cfg.clip(x)?;
        let index = self.cfg.bucket_index(clipped);
        let partial = self.cfg.partial(clipped, index);
        let logit = (self.prefix[index] + partial * self.slopes[index]) + self.shift;
        Ok(Evaluation {
            clipped,
            index,
            partial,
            logit,
        })
    }

    pub fn logit(&self, x: f64) -> Result<f64> {
        Ok(self.evaluate(x)?.logit)
    }

    pub fn prob(&self, x: f64) -> Result<f64> {
        Ok(sigmoid(self.logit(x)?))
    }

    /// Derivative `dz/dx`: the active bucket's slope, zero where clipping binds.
    pub fn input_slope(&self, x: f64) -> Result<f64> {
        let e = self.evaluate(x)?;
        if e.clipped != x {
            return Ok(0.0);
        }
        Ok(self.slopes[e.index])
    }
}

/// `y = sigmoid(sum_j a_j relu(w_j + offset_j) + r + b)` for one unit.
pub fn forward(
    x: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    offset: Option<&[f64]>,
) -> Result<f64> {
    Curve::new(params, cfg, unit, offset)?.prob(x)
}

/// Pre-sigmoid output `z(x)` for one unit.
pub fn forward_logit(
    x: f64,
    params: &IsotonicParams,
    cfg: &IsotonicConfig,
    unit: usize,
    offset: Option<&[f64]>,
) -> Result<f64> {
    Curve::new(params, cfg, unit, offset)?.logit(x)
}

/// Evaluate a scalar input against every unit of the layer.
pub fn forward_all_units(x: f64, params: &IsotonicParams, cfg: &IsotonicConfig) -> Result<Vec<f64>> {
    (0..cfg.units).map(|u| forward(x, params, cfg, u, None)).collect()
}
