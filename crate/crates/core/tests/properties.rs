use proptest::prelude::*;

use isolayer::baselines::pava_fit;
use isolayer::bias_sim::{gen_position_logs, gen_quadratic, piecewise_target, PositionBiasScenario, PIECEWISE_BREAK};
use isolayer::context::{conditioned_forward, fit_conditioned, EmbeddingTable};
use isolayer::dataset::{LabeledDataset, Row};
use isolayer::layer::{logit, sigmoid, Curve, IsotonicConfig, IsotonicParams};
use isolayer::metrics::{auc, normalized_entropy};
use isolayer::persist::write_dataset;
use isolayer::training::{fit, TrainConfig};

fn coarse() -> IsotonicConfig {
    IsotonicConfig::coarse_multi_task().with_units(1)
}

fn csv_bytes(ds: &LabeledDataset) -> Vec<u8> {
    let mut out = Vec::new();
    write_dataset(ds, &mut out).unwrap();
    out
}

fn assert_monotone(curve: &Curve) {
    let mut prev = f64::NEG_INFINITY;
    for k in 0..=2000 {
        let x = -20.0 + 30.0 * k as f64 / 2000.0;
        let y = curve.prob(x).unwrap();
        assert!(y >= prev, "curve decreases at x={x}");
        prev = y;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_survives_strictly_monotone_layer(
        scores in prop::collection::vec(-6.0f64..6.0, 2..40),
        flips in prop::collection::vec(any::<bool>(), 40),
        weights in prop::collection::vec(0.01f64..3.0, 126),
        bias in -3.0f64..3.0,
    ) {
        let mut labels: Vec<f64> = flips.iter().take(scores.len()).map(|&b| f64::from(u8::from(b))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let cfg = coarse();
        let params = IsotonicParams::new(&cfg, vec![weights], vec![bias]).unwrap();
        let curve = Curve::new(&params, &cfg, 0, None).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|&x| curve.logit(x).unwrap()).collect();
        prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&mapped, &labels).unwrap());
    }

    #[test]
    fn base_rate_predictor_has_unit_entropy(flips in prop::collection::vec(any::<bool>(), 2..200)) {
        let mut labels: Vec<f64> = flips.iter().map(|&b| f64::from(u8::from(b))).collect();
        labels[0] = 1.0;
        labels[1] = 0.0;
        let rate = labels.iter().sum::<f64>() / labels.len() as f64;
        let ne = normalized_entropy(&vec![rate; labels.len()], &labels).unwrap();
        prop_assert!((ne - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pava_is_monotone_and_idempotent(
        ys in prop::collection::vec(-5.0f64..5.0, 1..60),
        ws in prop::collection::vec(0.1f64..4.0, 60),
    ) {
        let xs: Vec<f64> = (0..ys.len()).map(|i| i as f64 * 0.5).collect();
        let ws = &ws[..ys.len()];
        let f = pava_fit(&xs, &ys, ws).unwrap();
        prop_assert!(f.levels.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(f.breakpoints.windows(2).all(|w| w[0] < w[1]));
        let fitted: Vec<f64> = xs.iter().map(|&x| f.predict(x)).collect();
        let again = pava_fit(&xs, &fitted, ws).unwrap();
        for (&x, y) in xs.iter().zip(&fitted) {
            prop_assert!((again.predict(x) - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn conditioned_curves_are_monotone_per_context(
        weights in prop::collection::vec(-1.0f64..2.0, 126),
        rows in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 126), 3),
        biases in prop::collection::vec(-3.0f64..3.0, 3),
        x1 in -25.0f64..15.0,
        x2 in -25.0f64..15.0,
    ) {
        let cfg = coarse();
        let params = IsotonicParams::new(&cfg, vec![weights], vec![0.0]).unwrap();
        let mut table = EmbeddingTable::new(&cfg, ["a", "b", "c"]).with_context_bias();
        for (i, (row, b)) in rows.iter().zip(&biases).enumerate() {
            table.row_mut(i).copy_from_slice(row);
            *table.bias_mut(i).unwrap() = *b;
        }
        let (lo, hi) = if x1 <= x2 { (x1, x2) } else { (x2, x1) };
        for ctx in ["a", "b", "c", "unseen"] {
            let ylo = conditioned_forward(lo, &params, &cfg, 0, ctx, &table).unwrap();
            let yhi = conditioned_forward(hi, &params, &cfg, 0, ctx, &table).unwrap();
            prop_assert!(ylo <= yhi);
        }
    }
}

#[test]
fn generators_serialize_identically_per_seed() {
    let a = csv_bytes(&gen_quadratic(2000, 7).unwrap());
    let b = csv_bytes(&gen_quadratic(2000, 7).unwrap());
    let c = csv_bytes(&gen_quadratic(2000, 8).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, c);

    let scenario = PositionBiasScenario::new(4, 500, 3);
    assert_eq!(
        csv_bytes(&gen_position_logs(&scenario).unwrap()),
        csv_bytes(&gen_position_logs(&scenario).unwrap())
    );
}

#[test]
fn piecewise_target_is_continuous_at_break() {
    let left = PIECEWISE_BREAK * PIECEWISE_BREAK;
    assert_eq!(piecewise_target(PIECEWISE_BREAK), left);
    let just_right = piecewise_target(f64::from_bits(PIECEWISE_BREAK.to_bits() + 1));
    assert!((just_right - left).abs() < 1e-12);
}

#[test]
fn every_epoch_leaves_a_monotone_curve() {
    let cfg = IsotonicConfig::default();
    let ds = gen_quadratic(3000, 2).unwrap();
    for epochs in [1, 2, 5] {
        let tc = TrainConfig { epochs, ..TrainConfig::default() };
        let (params, report) = fit(&ds, &cfg, &tc).unwrap();
        assert_eq!(report.loss_trace.len(), epochs);
        assert_monotone(&Curve::new(&params, &cfg, 0, None).unwrap());
    }
}

#[test]
fn conditioned_fit_keeps_every_context_monotone() {
    let cfg = coarse();
    let mut ds = LabeledDataset::new(0);
    for i in 0..4000 {
        let x = -4.0 + 8.0 * (i as f64 + 0.5) / 4000.0;
        let ctx = ["low", "high"][i % 2];
        let shift = if ctx == "low" { -1.0 } else { 1.0 };
        let p = sigmoid(x + shift);
        let mut row = Row::scalar(x, if (i * 7919 % 1000) as f64 / 1000.0 < p { 1.0 } else { 0.0 });
        row.context_id = ctx.to_string();
        ds.push(row).unwrap();
    }
    let table = EmbeddingTable::new(&cfg, ["low", "high"]);
    let tc = TrainConfig { epochs: 5, ..TrainConfig::default() };
    let (params, table, _) = fit_conditioned(&ds, &cfg, &tc, table).unwrap();
    for ctx in ["low", "high"] {
        assert_monotone(&table.curve(&params, &cfg, 0, ctx).unwrap());
    }
    let lo = table.curve(&params, &cfg, 0, "low").unwrap().prob(logit(0.5)).unwrap();
    let hi = table.curve(&params, &cfg, 0, "high").unwrap().prob(logit(0.5)).unwrap();
    assert!(hi > lo, "shifted contexts should separate: {lo} vs {hi}");
}
