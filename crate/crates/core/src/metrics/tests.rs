use proptest::prelude::*;

use super::*;
use crate::model::{build_synthetic_model, evaluate};
use crate::theory::{near_tie_model, separated_model};

fn model(dims: &[usize], seed: u64) -> LayeredModel {
    build_synthetic_model(dims, seed).unwrap()
}

fn synthetic() -> Metric {
    Metric::synthetic(1.0, 0.0).unwrap()
}

fn curve(points: &[(f64, f64)]) -> QuantCurve {
    QuantCurve::from_points(points.to_vec()).unwrap()
}

fn direct_score(m: &LayeredModel, ops: &[CompressionOp]) -> f64 {
    let mut cur = m.clone();
    for op in ops {
        cur = compressors::apply(op, &cur, m).unwrap().0;
    }
    evaluate(&cur, m, &synthetic()).unwrap()
}

#[test]
fn performance_gap_matches_two_evaluations() {
    let m = model(&[8, 8, 8, 8], 2);
    let (f1, f2) = (CompressionOp::prune_row(0.25), CompressionOp::quant(4));
    let pg = performance_gap(&m, &synthetic(), &f1, &f2).unwrap();
    let oracle = direct_score(&m, std::slice::from_ref(&f1)) - direct_score(&m, std::slice::from_ref(&f2));
    assert!((pg - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    assert_eq!(performance_gap(&m, &synthetic(), &f1, &f1).unwrap(), 0.0);
    assert_eq!(pg, -performance_gap(&m, &synthetic(), &f2, &f1).unwrap());
}

#[test]
fn cer_worked_example() {
    let c = curve(&[(2.0, 70.0), (4.0, 60.0)]).invert(65.0);
    assert_eq!(c.value, 3.0);
    assert!(!c.flagged());
}

#[test]
fn cer_knot_clamp_and_extrapolation() {
    let c = curve(&[(1.0, 80.0), (2.0, 70.0), (4.0, 60.0)]);
    assert_eq!(c.invert(70.0), Cer::exact(2.0));
    let top = c.invert(90.0);
    assert_eq!(top.value, 1.0);
    assert!(top.clamped);
    let low = c.invert(50.0);
    assert_eq!(low.value, 6.0);
    assert!(low.extrapolated && !low.clamped);
}

#[test]
fn cer_flat_segment_is_ambiguous() {
    let c = curve(&[(1.0, 80.0), (2.0, 70.0), (3.0, 70.0), (4.0, 60.0)]);
    let r = c.invert(70.0);
    assert_eq!(r.value, 2.5);
    assert!(r.ambiguous);
}

#[test]
fn envelope_repairs_non_monotone_curve() {
    let c = curve(&[(1.0, 80.0), (2.0, 60.0), (3.0, 65.0), (4.0, 50.0)]);
    assert!(!c.is_monotone());
    assert_eq!(c.points[2], (3.0, 60.0));
    assert_eq!(c.raw[2], (3.0, 65.0));
    // the envelope is flat between 2 and 3, so 60 is ambiguous
    assert!(c.invert(60.0).ambiguous);
}

#[test]
fn curve_rejects_bad_input() {
    assert!(QuantCurve::from_points(vec![(1.0, 1.0)]).is_err());
    assert!(QuantCurve::from_points(vec![(1.0, 1.0), (1.0, 0.5)]).is_err());
    assert!(QuantCurve::from_points(vec![(1.0, f64::NAN), (2.0, 0.5)]).is_err());
}

#[test]
fn cer_of_quantization_is_its_own_ratio() {
    let m = model(&[16, 16, 16, 16], 5);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let c = QuantCurve::standard(&ev).unwrap();
    assert!(c.is_monotone());
    for b in CURVE_BITS {
        let got = cer(&m, &synthetic(), &CompressionOp::quant(b), &c).unwrap();
        assert!((got.value - 16.0 / f64::from(b)).abs() < 1e-6, "B={b}: {got:?}");
    }
}

#[test]
fn cer_of_layer_pruning_matches_bisection() {
    let m = model(&[16, 16, 16, 16, 16], 6);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let c = QuantCurve::standard(&ev).unwrap();
    let target = single_score(&ev, &CompressionOp::prune_layer(0.25)).unwrap();
    // independent piecewise-linear interpolant over the raw curve
    let mut pts = c.raw.clone();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let perf = |x: f64| {
        let k = pts.windows(2).position(|w| x <= w[1].0).unwrap_or(pts.len() - 2);
        let ((x0, y0), (x1, y1)) = (pts[k], pts[k + 1]);
        y0 + (x - x0) / (x1 - x0) * (y1 - y0)
    };
    assert!(perf(1.0) > target && perf(8.0) < target);
    let (mut lo, mut hi) = (1.0, 8.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if perf(mid) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let got = c.invert(target);
    assert!(!got.flagged());
    assert!((got.value - 0.5 * (lo + hi)).abs() < 1e-6);
}

#[test]
fn coa_matches_pipeline_evaluations() {
    let m = model(&[8, 8, 8, 8], 3);
    let (f1, f2) = (CompressionOp::prune_unstructured(0.2), CompressionOp::quant(3));
    let got = coa(&m, &synthetic(), &f1, &f2).unwrap();
    let oracle = direct_score(&m, &[f1.clone(), f2.clone()]) - direct_score(&m, &[f2.clone(), f1.clone()]);
    assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0));
    assert_eq!(coa(&m, &synthetic(), &f1, &f1).unwrap(), 0.0);
    assert_eq!(got, -coa(&m, &synthetic(), &f2, &f1).unwrap());
}

#[test]
fn coa_vanishes_when_one_layer_is_far_below_the_rest() {
    let m = separated_model(&model(&[8, 8, 8, 8, 8], 4), 100.0).unwrap();
    let c = coa(&m, &synthetic(), &CompressionOp::prune_layer(0.25), &CompressionOp::quant(6)).unwrap();
    assert_eq!(c, 0.0);
}

#[test]
fn disjointness_by_granularity() {
    let m = model(&[8, 8, 8, 8, 8], 7);
    let cal = Calibration::of(&m).unwrap();
    let layer = PairRuns::new(&cal, &m, &CompressionOp::prune_layer(0.5), &CompressionOp::quant(4)).unwrap();
    assert!(disjoint_both_orders(&layer).unwrap());
    let row = PairRuns::new(&cal, &m, &CompressionOp::prune_row(0.25), &CompressionOp::quant(4).per_row()).unwrap();
    assert!(disjoint_both_orders(&row).unwrap());
    let elem = PairRuns::new(&cal, &m, &CompressionOp::prune_unstructured(0.1), &CompressionOp::quant(4)).unwrap();
    assert!(!disjoint_both_orders(&elem).unwrap());
    assert!(matches!(partition_from_runs(&elem, AbstractType::Layer), Err(Error::NotDisjoint)));
}

#[test]
fn t_lut_is_the_coarser_level() {
    let q = CompressionOp::quant(4);
    assert_eq!(t_lut(&CompressionOp::prune_unstructured(0.1), &q), AbstractType::Layer);
    assert_eq!(t_lut(&CompressionOp::prune_unstructured(0.1), &q.clone().per_row()), AbstractType::Row);
    assert_eq!(t_lut(&CompressionOp::prune_layer(0.5), &q.per_row()), AbstractType::Layer);
}

#[test]
fn partition_tiles_units_without_flips() {
    let m = model(&[8, 8, 8, 8, 8, 8, 8], 8);
    let p = partition_units(&m, &CompressionOp::prune_layer(2.0 / 6.0), &CompressionOp::quant(8)).unwrap();
    let [g1, g2, g3, g4] = p.sizes();
    assert_eq!(g1 + g2 + g3 + g4, 6);
    assert_eq!(g1, g2);
    // two layers pruned in each order
    assert_eq!(g1 + g4, 2);
    assert_eq!(g3, 4 - g1);
}

#[test]
fn near_tie_flips_one_layer() {
    let q = CompressionOp::quant(4);
    let tie = near_tie_model(&model(&[8, 8, 8, 8, 8], 9), &q, 1).unwrap();
    let (a, b) = tie.pairs[0];
    let p = partition_units(&tie.model, &CompressionOp::prune_layer(0.25), &q).unwrap();
    assert_eq!(p.g1, vec![Unit::layer(a)]);
    assert_eq!(p.g2, vec![Unit::layer(b)]);
    assert_eq!(p.order_dependent(), 1);
}

#[test]
fn disjoint_pair_has_no_interference() {
    let m = model(&[8, 8, 8, 8, 8], 10);
    let i = interference(&m, &CompressionOp::prune_layer(0.5), &CompressionOp::quant(3)).unwrap();
    assert!(i.sum_of_norms < 1e-10);
    assert_eq!(i.units, 2);
    let j = interference(&m, &CompressionOp::prune_row(0.25), &CompressionOp::quant(3).per_row()).unwrap();
    assert!(j.sum_of_norms < 1e-10);
}

#[test]
fn unstructured_interference_matches_direct_sum() {
    let m = model(&[8, 8, 8, 8], 11);
    let (p, q) = (CompressionOp::prune_unstructured(0.05), CompressionOp::quant(8));
    let cal = Calibration::of(&m).unwrap();
    let both = compressors::apply(&q, &compressors::apply(&p, &m, &m).unwrap().0, &m).unwrap().0;
    let alone = compressors::apply(&q, &m, &m).unwrap().0;
    let mut oracle = 0.0;
    for l in 0..m.num_layers() {
        let d = cal.layer_error(&both, l).unwrap().sub(&cal.layer_error(&alone, l).unwrap()).unwrap();
        oracle += frob_norm_sq(&d);
    }
    let got = interference(&m, &p, &q).unwrap();
    assert!(oracle > 0.0);
    assert!((got.sum_of_norms - oracle).abs() <= 1e-10 * oracle);
    assert_eq!(got.units, 3);
    assert!(got.norm_of_sum.is_some());
}

#[test]
fn stochastic_interference_grows_as_bits_fall() {
    let m = model(&[16, 16, 16, 16], 12);
    let p = CompressionOp::prune_unstructured(0.1);
    let at = |b: u8| interference(&m, &p, &CompressionOp::quant(b).stochastic(3)).unwrap().sum_of_norms;
    assert!(at(3) >= at(8));
    assert!(at(8) > 0.0);
}

#[test]
fn order_report_is_consistent() {
    let m = model(&[8, 8, 8, 8, 8], 13);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let c = QuantCurve::standard(&ev).unwrap();
    let (f1, f2) = (CompressionOp::prune_layer(0.25), CompressionOp::quant(4));
    let r = OrderReport::compute(&ev, &f1, &f2, Some(&c)).unwrap();
    assert_eq!(r.pg, r.m_f1 - r.m_f2);
    assert_eq!(r.coa, r.m_f1_first - r.m_f2_first);
    assert!(r.disjoint && r.partition.is_some());
    assert!((r.cer_f2.unwrap().value - 4.0).abs() < 1e-6);
    assert!(r.to_json().unwrap().contains("\"interference_forward\""));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn coa_is_antisymmetric(seed in 0u64..500, bits in 2u8..9, p in 0.1f64..0.5) {
        let m = model(&[8, 8, 8, 8], seed);
        let (f1, f2) = (CompressionOp::prune_row(p), CompressionOp::quant(bits));
        let a = coa(&m, &synthetic(), &f1, &f2).unwrap();
        let b = coa(&m, &synthetic(), &f2, &f1).unwrap();
        prop_assert_eq!(a, -b);
    }

    #[test]
    fn partition_always_tiles(seed in 0u64..500, bits in 2u8..9, k in 1usize..4) {
        let m = model(&[8, 8, 8, 8, 8], seed);
        let part = partition_units(&m, &CompressionOp::prune_layer(k as f64 / 4.0), &CompressionOp::quant(bits)).unwrap();
        let mut all: Vec<Unit> = [part.g1.clone(), part.g2.clone(), part.g3.clone(), part.g4.clone()].concat();
        all.sort_by_key(|u| u.layer);
        prop_assert_eq!(all, units_at(&m, AbstractType::Layer).unwrap());
        prop_assert_eq!(part.g1.len(), part.g2.len());
    }

    #[test]
    fn cer_inverts_interior_points(y in 60.0f64..70.0) {
        let c = curve(&[(2.0, 70.0), (4.0, 60.0)]).invert(y);
        prop_assert!((c.value - (2.0 + (70.0 - y) / 5.0)).abs() < 1e-12);
    }
}
