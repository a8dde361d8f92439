//! Plain-Rust operations behind the browser bindings. Each returns a JSON
//! document ready for plotting.

use isolayer::baselines::pava_fit_unsorted;
use isolayer::bias_sim::{gen_piecewise, gen_position_logs, gen_quadratic, piecewise_target, PositionBiasScenario};
use isolayer::dual_tower::{train_dual_tower, DualTowerConfig, DualTowerModel};
use isolayer::layer::{logit, sigmoid, Curve, IsotonicConfig, IsotonicParams};
use isolayer::training::{fit, TrainConfig};
use isolayer::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

const GRID: usize = 100;

#[derive(Debug, Serialize)]
pub struct TargetFit {
    pub x: Vec<f64>,
    pub target: Vec<f64>,
    pub layer: Vec<f64>,
    pub pava: Vec<f64>,
    pub loss_trace: Vec<f64>,
}

/// Fit the layer and PAVA to `quadratic` or `piecewise` synthetic data.
pub fn fit_target(target: &str, n: usize, epochs: usize, seed: u64) -> Result<TargetFit> {
    let (ds, truth): (_, fn(f64) -> f64) = match target {
        "quadratic" => (gen_quadratic(n, seed)?, |x| x * x),
        "piecewise" => (gen_piecewise(n, seed)?, piecewise_target),
        other => return Err(isolayer::Error::Config(format!("unknown target `{other}`"))),
    };
    let cfg = IsotonicConfig::default();
    let tc = TrainConfig { epochs, seed, ..TrainConfig::default() };
    let (params, report) = fit(&ds, &cfg, &tc)?;
    let curve = Curve::new(&params, &cfg, 0, None)?;
    let pava = pava_fit_unsorted(&ds.inputs()?, &ds.labels())?;

    let x: Vec<f64> = (0..GRID).map(|k| (k as f64 + 0.5) / GRID as f64).collect();
    let layer = x.iter().map(|&p| curve.prob(logit(p))).collect::<Result<_>>()?;
    Ok(TargetFit {
        target: x.iter().map(|&p| truth(p)).collect(),
        pava: x.iter().map(|&p| pava.predict(logit(p))).collect(),
        layer,
        x,
        loss_trace: report.loss_trace,
    })
}

#[derive(Debug, Serialize)]
pub struct PositionCurves {
    /// Tower logit grid.
    pub r: Vec<f64>,
    /// One learned click curve per position, position 1 first.
    pub curves: Vec<Vec<f64>>,
    pub click_rate: Vec<f64>,
}

/// Train a small dual tower on position-biased click logs and return the
/// isotonic head's curve for every position.
pub fn position_curves(positions: usize, n: usize, epochs: usize, seed: u64) -> Result<PositionCurves> {
    let scenario = PositionBiasScenario::click_only(positions, n, seed);
    let ds = gen_position_logs(&scenario)?;
    let cfg = DualTowerConfig {
        hidden: vec![8],
        layer: IsotonicConfig::coarse_multi_task().with_units(1),
        ..DualTowerConfig::default()
    };
    let init = DualTowerModel::for_dataset(&ds, &cfg, seed)?;
    let tc = TrainConfig { epochs, seed, ..TrainConfig::dual_tower() };
    let (model, _) = train_dual_tower(&ds, &init, &tc)?;

    let r: Vec<f64> = (0..=GRID).map(|k| -6.0 + 10.0 * k as f64 / GRID as f64).collect();
    let mut curves = Vec::with_capacity(positions);
    let mut click_rate = Vec::with_capacity(positions);
    for p in 1..=positions {
        let ctx = p.to_string();
        let curve = model.curve(0, &ctx)?;
        curves.push(r.iter().map(|&x| curve.prob(x)).collect::<Result<_>>()?);
        let (clicks, shown) = ds
            .rows
            .iter()
            .filter(|row| row.task_id == 0 && row.context_id == ctx)
            .fold((0.0, 0.0), |(c, s), row| (c + row.label, s + 1.0));
        click_rate.push(if shown > 0.0 { clicks / shown } else { 0.0 });
    }
    Ok(PositionCurves { r, curves, click_rate })
}

#[derive(Debug, Serialize)]
pub struct RandomLayer {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigmoid: Vec<f64>,
    pub dead_buckets: usize,
}

/// A layer with random weights, many of them negative. The curve stays
/// monotone because only `relu(w)` ever enters the prefix sum.
pub fn random_layer(seed: u64) -> Result<RandomLayer> {
    let cfg = IsotonicConfig::coarse_multi_task().with_units(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..cfg.num_buckets()).map(|_| rng.gen_range(-2.0..2.5)).collect();
    let dead_buckets = weights.iter().filter(|&&w| w <= 0.0).count();
    let params = IsotonicParams::new(&cfg, vec![weights], vec![rng.gen_range(-1.0..1.0)])?;
    let curve = Curve::new(&params, &cfg, 0, None)?;
    let x: Vec<f64> = (0..=4 * GRID).map(|k| -20.0 + 30.0 * k as f64 / (4 * GRID) as f64).collect();
    Ok(RandomLayer {
        y: x.iter().map(|&v| curve.prob(v)).collect::<Result<_>>()?,
        sigmoid: x.iter().map(|&v| sigmoid(v)).collect(),
        x,
        dead_buckets,
    })
}
