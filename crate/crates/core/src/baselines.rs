//! Classical calibrators: pool-adjacent-violators isotonic regression and
//! Platt scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::sigmoid;
use crate::training::bce_from_logit;

/// Right-continuous staircase produced by PAVA.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepFunction {
    /// First input of every pooled block, strictly increasing.
    pub breakpoints: Vec<f64>,
    /// Weighted mean target of every block, non-decreasing.
    pub levels: Vec<f64>,
}

impl StepFunction {
    /// Level of the block containing `x`, clamped to the first/last level
    /// outside the fitted range.
    pub fn predict(&self, x: f64) -> f64 {
        let k = self.breakpoints.partition_point(|b| *b <= x);
        self.levels[k.saturating_sub(1)]
    }
}

pub fn pava_predict(f: &StepFunction, x: f64) -> f64 {
    f.predict(x)
}

struct Block {
    start: f64,
    sum: f64,
    weight: f64,
}

impl Block {
    fn mean(&self) -> f64 {
        self.sum / self.weight
    }
}

/// Weighted least-squares non-decreasing fit of `ys` over sorted `xs`.
/// Tied inputs are pooled into one point before the pass.
pub fn pava_fit(xs: &[f64], ys: &[f64], weights: &[f64]) -> Result<StepFunction> {
    if xs.is_empty() {
        return Err(Error::Empty("pava input"));
    }
    if ys.len() != xs.len() || weights.len() != xs.len() {
        return Err(Error::Shape {
            what: "pava columns",
            expected: xs.len(),
            actual: ys.len().min(weights.len()),
        });
    }
    if xs.iter().chain(ys).chain(weights).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("pava input".into()));
    }
    if weights.iter().any(|w| *w <= 0.0) {
        return Err(Error::data("pava weights must be positive"));
    }
    if xs.windows(2).any(|p| p[0] > p[1]) {
        return Err(Error::data("pava inputs must be sorted ascending"));
    }

    let mut blocks: Vec<Block> = Vec::with_capacity(xs.len());
    let mut k = 0;
    while k < xs.len() {
        let mut point = Block {
            start: xs[k],
            sum: 0.0,
            weight: 0.0,
        };
        while k < xs.len() && xs[k] == point.start {
            point.sum += weights[k] * ys[k];
            point.weight += weights[k];
            k += 1;
        }
        blocks.push(point);
        while blocks.len() >= 2 {
            let last = &blocks[blocks.len() - 1];
            let prev = &blocks[blocks.len() - 2];
            if prev.mean() <= last.mean() {
                break;
            }
            let last = blocks.pop().expect("two blocks");
            let prev = blocks.last_mut().expect("one block");
            prev.sum += last.sum;
            prev.weight += last.weight;
        }
    }
    Ok(StepFunction {
        breakpoints: blocks.iter().map(|b| b.start).collect(),
        levels: blocks.iter().map(Block::mean).collect(),
    })
}

/// [`pava_fit`] with unit weights.
pub fn pava_fit_unweighted(xs: &[f64], ys: &[f64]) -> Result<StepFunction> {
    pava_fit(xs, ys, &vec![1.0; xs.len()])
}

/// Sort `(x, y)` pairs by `x` and fit with unit weights.
pub fn pava_fit_unsorted(xs: &[f64], ys: &[f64]) -> Result<StepFunction> {
    if xs.len() != ys.len() {
        return Err(Error::Shape {
            what: "pava columns",
            expected: xs.len(),
            actual: ys.len(),
        });
    }
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let sx: Vec<f64> = idx.iter().map(|&i| xs[i]).collect();
    let sy: Vec<f64> = idx.iter().map(|&i| ys[i]).collect();
    pava_fit_unweighted(&sx, &sy)
}

/// `p = sigmoid(slope * s + intercept)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattParams {
    pub slope: f64,
    pub intercept: f64,
}

impl PlattParams {
    pub fn predict(&self, score: f64) -> f64 {
        sigmoid(self.slope * score + self.intercept)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlattConfig {
    pub max_iterations: usize,
    /// Stop once a step changes the loss by less than this.
    pub tolerance: f64,
    pub initial_step: f64,
}

impl Default for PlattConfig {
    fn default() -> Self {
        Self {
            max_iterations: 20_000,
            tolerance: 1e-10,
            initial_step: 1.0,
        }
    }
}

/// Fit Platt scaling by full-batch gradient descent with a backtracking line
/// search, against the smoothed targets `(n+ + 1) / (n+ + 2)` and
/// `1 / (n- + 2)`.
pub fn platt_fit(scores: &[f64], labels: &[f64], cfg: &PlattConfig) -> Result<PlattParams> {
    if scores.is_empty() {
        return Err(Error::Empty("platt scores"));
    }
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            what: "platt labels",
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("platt scores".into()));
    }
    let positives = labels.iter().filter(|&&t| t == 1.0).count();
    let negatives = labels.iter().filter(|&&t| t == 0.0).count();
    if positives + negatives != labels.len() {
        return Err(Error::data("platt labels must be 0 or 1"));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClass("platt_fit"));
    }
    let hi = (positives as f64 + 1.0) / (positives as f64 + 2.0);
    let lo = 1.0 / (negatives as f64 + 2.0);
    let targets: Vec<f64> = labels.iter().map(|&t| if t == 1.0 { hi } else { lo }).collect();
    let n = scores.len() as f64;

    let loss = |a: f64, b: f64| -> f64 {
        scores
            .iter()
            .zip(&targets)
            .map(|(&s, &t)| bce_from_logit(a * s + b, t))
            .sum::<f64>()
            / n
    };
    let grad = |a: f64, b: f64| -> (f64, f64) {
        let (mut ga, mut gb) = (0.0, 0.0);
        for (&s, &t) in scores.iter().zip(&targets) {
            let r = sigmoid(a * s + b) - t;
            ga += r * s;
            gb += r;
        }
        (ga / n, gb / n)
    };

    let (mut a, mut b) = (1.0, 0.0);
    let mut current = loss(a, b);
    let mut eta = cfg.initial_step;
    for _ in 0..cfg.max_iterations {
        let (ga, gb) = grad(a, b);
        let norm2 = ga * ga + gb * gb;
        if norm2 == 0.0 {
            break;
        }
        let mut accepted = None;
        while eta > 1e-16 {
            let (na, nb) = (a - eta * ga, b - eta * gb);
            let candidate = loss(na, nb);
            if candidate <= current - 0.5 * eta * norm2 {
                accepted = Some((na, nb, candidate));
                break;
            }
            eta *= 0.5;
        }
        let Some((na, nb, candidate)) = accepted else {
            break;
        };
        let delta = current - candidate;
        a = na;
        b = nb;
        current = candidate;
        eta *= 2.0;
        if delta.abs() < cfg.tolerance {
            break;
        }
    }
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::NonFinite("platt parameters".into()));
    }
    Ok(PlattParams {
        slope: a,
        intercept: b,
    })
}
