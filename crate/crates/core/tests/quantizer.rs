mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use zsq_core::nn::{build_resnet, ForwardOptions, ResnetDepth, ResnetSpec};
use zsq_core::quant::{
    calibrate_weights, dequantize, fake_quantize, quant_report, quantize, unwrap_model,
    weight_qparams, wrap_model, DequantMode, Granularity, QuantConfig, QuantParams, RangeTracker,
    WeightQuant,
};
use zsq_core::tensor::{Tape, Tensor};
use zsq_core::Error;

fn qp(lo: f64, hi: f64, bits: u32) -> QuantParams {
    QuantParams::compute(lo, hi, bits, Granularity::PerTensor).unwrap()
}

/// Nearest representable value by exhaustive search over every code.
fn brute_force_code(x: f64, q: &QuantParams) -> u32 {
    (0..=q.max_code())
        .min_by(|&a, &b| {
            let da = (q.dequantize_value(a) - x).abs();
            let db = (q.dequantize_value(b) - x).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

#[test]
fn scale_matches_formula_within_one_ulp() {
    let mut r = rng(1);
    for _ in 0..200 {
        let lo: f64 = r.random_range(-5.0..5.0);
        let hi = lo + r.random_range(1e-3..10.0);
        for bits in 2..=8 {
            let q = qp(lo, hi, bits);
            let expect = (hi - lo) / ((1u64 << bits) - 1) as f64;
            assert!((q.scale - expect).abs() <= expect * f64::EPSILON);
        }
    }
}

#[test]
fn codes_match_nearest_grid_point_search() {
    let mut r = rng(2);
    for _ in 0..50 {
        let lo: f64 = r.random_range(-3.0..1.0);
        let hi = lo + r.random_range(0.1..4.0);
        let q = qp(lo, hi, 4);
        for _ in 0..200 {
            let x = r.random_range(lo..=hi);
            let code = q.quantize_value(x);
            let best = brute_force_code(x, &q);
            // Exact ties may resolve to either neighbour.
            let d = (q.dequantize_value(code) - x).abs();
            let db = (q.dequantize_value(best) - x).abs();
            assert!(d <= db + 1e-12, "x={x} code={code} best={best}");
        }
    }
}

#[test]
fn lower_bound_on_grid_maps_to_code_zero_and_back() {
    let q = qp(-0.6, 0.9, 4);
    assert_eq!(q.scale, 0.1);
    assert_eq!(q.zero_point, -6);
    assert_eq!(q.quantize_value(-0.6), 0);
    assert!((q.dequantize_value(0) + 0.6).abs() < 1e-12);
    for k in 0..=15u32 {
        let x = -0.6 + k as f64 * 0.1;
        assert!(
            (q.fake_quantize_value(x) - x).abs() < 1e-12,
            "grid point {k}"
        );
    }
}

#[test]
fn tensor_quantize_dequantize_round_trip() {
    let q = qp(-1.0, 2.0, 3);
    let x = Tensor::<f64>::new(&[5], vec![-1.0, -0.2, 0.5, 1.7, 9.0]).unwrap();
    let codes = quantize(&x, &q);
    assert!(codes.iter().all(|&c| c <= 7));
    let back = dequantize::<f64>(&codes, &[5], &q).unwrap();
    for (a, b) in back.data()[..4].iter().zip(&x.data()[..4]) {
        assert!((a - b).abs() <= q.scale / 2.0 + 1e-12);
    }
    assert!(matches!(
        dequantize::<f64>(&[8], &[1], &q),
        Err(Error::Range(_))
    ));
}

#[test]
fn printed_mode_breaks_the_bound_on_asymmetric_ranges() {
    let q = qp(-1.0, 1.0, 4).with_dequant(DequantMode::Printed);
    assert!((q.fake_quantize_value(-1.0) + 1.0).abs() > q.scale);
}

#[test]
fn eight_bit_tight_range_is_near_identity() {
    let q = qp(-0.01, 0.01, 8);
    let mut r = rng(3);
    for _ in 0..1000 {
        let x = r.random_range(-0.01..0.01);
        assert!((q.fake_quantize_value(x) - x).abs() <= q.scale / 2.0 + 1e-12);
    }
}

#[test]
fn straight_through_gradient_is_the_clipped_identity_mask() {
    let q = qp(-1.0, 1.0, 4);
    let mut r = rng(4);
    let x = Tensor::<f64>::from_fn(&[200], |_| r.random_range(-2.0..2.0));
    let tape = Tape::new();
    let v = tape.param(&x);
    let g = tape.backward(fake_quantize(v, &q).unwrap().sum()).unwrap();
    let grad = g.get(v).unwrap();
    for (xi, gi) in x.data().iter().zip(grad) {
        let mask = if (-1.0..=1.0).contains(xi) { 1.0 } else { 0.0 };
        assert_eq!(*gi, mask);
    }
    let tape = Tape::new();
    let edge = Tensor::<f64>::new(&[2], vec![0.3, 2.0]).unwrap();
    let v = tape.param(&edge);
    let g = tape.backward(fake_quantize(v, &q).unwrap().sum()).unwrap();
    assert_eq!(g.get(v).unwrap(), &[1.0, 0.0]);
}

#[test]
fn staircase_is_not_differentiable_by_finite_differences() {
    // Away from steps the numerical slope is zero while the STE reports one.
    let q = qp(0.0, 1.5, 2);
    let x = 0.2;
    let h = 1e-4;
    let fd = (q.fake_quantize_value(x + h) - q.fake_quantize_value(x - h)) / (2.0 * h);
    assert_eq!(fd, 0.0);
}

#[test]
fn weight_calibration_arithmetic_and_degenerate_weights() {
    let cfg = QuantConfig::new(4, 4);
    let w = Tensor::<f64>::new(&[2, 2], vec![-0.5, 0.1, 0.5, 0.0]).unwrap();
    match weight_qparams(&w, &cfg).unwrap() {
        WeightQuant::PerTensor(q) => assert!((q.scale - 1.0 / 15.0).abs() < 1e-15),
        other => panic!("{other:?}"),
    }
    let zeros = Tensor::<f64>::zeros(&[3, 3]);
    match weight_qparams(&zeros, &cfg).unwrap() {
        WeightQuant::PerTensor(q) => {
            assert!(q.clip_lo < 0.0 && q.clip_hi > 0.0);
            assert!(q.fake_quantize_value(0.0).abs() <= q.scale / 2.0);
        }
        other => panic!("{other:?}"),
    }
    let per_channel = QuantConfig {
        per_channel: true,
        ..cfg
    };
    match weight_qparams(&w, &per_channel).unwrap() {
        WeightQuant::PerChannel(qs) => assert_eq!(qs.len(), 2),
        other => panic!("{other:?}"),
    }
}

#[test]
fn recalibration_is_idempotent() {
    let m = build_resnet::<f32>(
        &ResnetSpec::new(ResnetDepth::Resnet8, 3, 0.25).with_image_size(8),
        1,
    )
    .unwrap();
    let cfg = QuantConfig::new(4, 4);
    assert_eq!(
        calibrate_weights(&m, &cfg).unwrap(),
        calibrate_weights(&m, &cfg).unwrap()
    );
}

#[test]
fn tracker_ema_freeze_and_rejection() {
    assert!(RangeTracker::new(1.5, 20).is_err());
    let mut t = RangeTracker::new(0.9, 3).unwrap();
    t.observe(-1.0, 1.0).unwrap();
    t.observe(-2.0, 3.0).unwrap();
    let (lo, hi) = t.range().unwrap();
    assert!((lo - (-1.1)).abs() < 1e-12 && (hi - 1.2).abs() < 1e-12);
    assert!(!t.warmup_done());
    t.observe(0.0, 0.5).unwrap();
    assert!(t.warmup_done());
    let q = t.freeze(4, DequantMode::OffsetCorrected).unwrap();
    assert_eq!(t.frozen(), Some(&q));
    assert!(matches!(t.observe(0.0, 1.0), Err(Error::Frozen(_))));
    let (lo, hi) = t.range().unwrap();
    assert!(lo <= hi);
}

fn warm_up(m: &mut zsq_core::nn::Model<f64>, seed: u64) {
    let mut r = rng(seed);
    while m.quant_state().is_some_and(|q| !q.all_frozen()) {
        let x = randn(&[4, 3, 8, 8], &mut r);
        let tape = Tape::new();
        let bound = m.bind(&tape, false);
        let out = m
            .forward(&bound, tape.constant(&x), ForwardOptions::eval())
            .unwrap();
        m.observe_activations(&out).unwrap();
    }
}

#[test]
fn wrapping_tracks_every_activation_and_unwraps_exactly() {
    let m = build_resnet::<f64>(
        &ResnetSpec::new(ResnetDepth::Resnet8, 3, 0.25).with_image_size(8),
        2,
    )
    .unwrap();
    let mut q = wrap_model(&m, QuantConfig::new(4, 4)).unwrap();
    let acts = m
        .layers()
        .iter()
        .filter(|l| matches!(l.kind, zsq_core::nn::LayerKind::Act { .. }))
        .count();
    assert_eq!(q.quant_state().unwrap().sites.len(), acts);
    warm_up(&mut q, 5);
    let report = quant_report(&q).unwrap();
    assert_eq!(report["weight_bits"], 4);
    assert!(report["weights"]["fc.weight"]["S"].as_f64().unwrap() > 0.0);
    assert!(report["weights"]["stem.conv.weight"].is_object());
    let x = randn(&[3, 3, 8, 8], &mut rng(6));
    let fp = m.predict(&x, 3).unwrap();
    assert_ne!(q.predict(&x, 3).unwrap(), fp);
    assert_eq!(unwrap_model(&q).predict(&x, 3).unwrap(), fp);
}

#[test]
fn eight_bit_wrap_stays_close_to_full_precision() {
    let m = build_resnet::<f64>(
        &ResnetSpec::new(ResnetDepth::Resnet8, 3, 0.25).with_image_size(8),
        3,
    )
    .unwrap();
    let mut q8 = wrap_model(&m, QuantConfig::new(8, 8)).unwrap();
    let mut q4 = wrap_model(&m, QuantConfig::new(4, 4)).unwrap();
    warm_up(&mut q8, 7);
    warm_up(&mut q4, 7);
    let x = randn(&[8, 3, 8, 8], &mut rng(8));
    let fp = m.predict(&x, 8).unwrap();
    let err =
        |q: &zsq_core::nn::Model<f64>| max_abs_diff(q.predict(&x, 8).unwrap().data(), fp.data());
    assert!(err(&q8) < err(&q4));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_bound_codes_and_monotonicity(
        lo in -10.0f64..10.0,
        width in 1e-3f64..20.0,
        bits in prop::sample::select(vec![3u32, 4, 5, 8]),
        xs in prop::collection::vec(0.0f64..=1.0, 1..64),
    ) {
        let q = qp(lo, lo + width, bits);
        let mut pts: Vec<f64> = xs.iter().map(|t| lo + t * width).collect();
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut prev = 0;
        for &x in &pts {
            let c = q.quantize_value(x);
            prop_assert!(c <= q.max_code());
            prop_assert!(c >= prev);
            prev = c;
            prop_assert!((q.dequantize_value(c) - x).abs() <= q.scale / 2.0 + 1e-6);
        }
    }

    #[test]
    fn codes_stay_in_range_far_outside(
        lo in -5.0f64..5.0,
        width in 1e-2f64..5.0,
        bits in 2u32..=8,
        x in -1e6f64..1e6,
    ) {
        let q = qp(lo, lo + width, bits);
        prop_assert!(q.quantize_value(x) <= q.max_code());
    }

    #[test]
    fn fake_quantize_is_idempotent(
        lo in -5.0f64..5.0,
        width in 1e-2f64..5.0,
        bits in 2u32..=8,
        x in -10.0f64..10.0,
    ) {
        let q = qp(lo, lo + width, bits);
        let once = q.fake_quantize_value(x);
        prop_assert!((q.fake_quantize_value(once) - once).abs() <= 1e-9 * (1.0 + once.abs()));
    }
}
