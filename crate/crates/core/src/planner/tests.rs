use proptest::prelude::*;

use super::*;
use crate::model::{build_synthetic_model, Calibration};
use crate::theory::separated_model;

fn model(dims: &[usize], seed: u64) -> LayeredModel {
    build_synthetic_model(dims, seed).unwrap()
}

fn synthetic() -> Metric {
    Metric::synthetic(1.0, 0.0).unwrap()
}

#[test]
fn permutations_are_lexicographic() {
    assert_eq!(permutations(3), vec![
        vec![0, 1, 2],
        vec![0, 2, 1],
        vec![1, 0, 2],
        vec![1, 2, 0],
        vec![2, 0, 1],
        vec![2, 1, 0]
    ]);
    let p4 = permutations(4);
    assert_eq!(p4.len(), 24);
    assert!(p4.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(permutations(1), vec![vec![0]]);
}

#[test]
fn brute_force_scores_every_order() {
    let m = model(&[8, 8, 8, 8, 8], 1);
    let ops = [CompressionOp::prune_layer(0.25), CompressionOp::quant(4), CompressionOp::prune_unstructured(0.1)];
    let bf = brute_force_order(&m, &synthetic(), &ops).unwrap();
    assert_eq!(bf.table.len(), 6);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    for row in &bf.table {
        let steps: Vec<CompressionOp> = row.order.iter().map(|&k| ops[k].clone()).collect();
        assert_eq!(row.score, pipeline_score(&ev, &steps).unwrap());
        assert!(row.score <= bf.best_score);
    }
    assert_eq!(bf.rank_of(bf.best_score), 0);
    let t = bf.to_table();
    assert_eq!(t.rows.len(), 6);
    assert!(t.rows.iter().any(|r| r[0] == crate::report::Cell::Int(0)));
}

#[test]
fn brute_force_ties_go_to_the_first_permutation() {
    // quantizers on different layers commute exactly
    let m = model(&[8, 8, 8], 2);
    let ops = [CompressionOp::quant(8).on_layers(vec![1]), CompressionOp::quant(4).on_layers(vec![0])];
    let bf = brute_force_order(&m, &synthetic(), &ops).unwrap();
    assert_eq!(bf.table[0].score, bf.table[1].score);
    assert_eq!(bf.best.steps, ops.to_vec());
    assert_eq!(bf.rank_of(bf.table[1].score), 0);
}

#[test]
fn brute_force_limits() {
    let m = model(&[8, 8, 8], 3);
    let seven = vec![CompressionOp::quant(8); MAX_BRUTE_FORCE_OPS + 1];
    assert!(brute_force_order(&m, &synthetic(), &seven).is_err());
    assert!(brute_force_order(&m, &synthetic(), &[]).is_err());
    assert!(brute_force_order(&m, &synthetic(), &[CompressionOp::quant(1)]).is_err());
}

#[test]
fn progressive_puts_the_weaker_operator_first() {
    let m = model(&[8, 8, 8, 8, 8], 4);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let curve = QuantCurve::standard(&ev).unwrap();
    let q = CompressionOp::quant(8);
    let p = CompressionOp::prune_layer(0.5);
    for ops in [vec![q.clone(), p.clone()], vec![p.clone(), q.clone()]] {
        let plan = progressive_order(&m, &synthetic(), &ops, &curve).unwrap();
        assert_eq!(plan.steps, vec![q.clone(), p.clone()]);
        let rank = plan.predicted_rank.unwrap();
        assert!(rank[0].value < rank[1].value);
        assert!((rank[0].value - 2.0).abs() < 1e-9);
    }
}

#[test]
fn progressive_breaks_cer_ties_by_ratio() {
    // tying two identical layers changes nothing, so both CERs are exactly 1
    let mut m = model(&[8, 8, 8], 5);
    let w = m.layers[0].weight.clone();
    m.set_weight(1, w).unwrap();
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let curve = QuantCurve::standard(&ev).unwrap();
    let ops = [CompressionOp::share(2), CompressionOp::quant(16)];
    let plan = progressive_order(&m, &synthetic(), &ops, &curve).unwrap();
    assert_eq!(plan.steps, vec![ops[1].clone(), ops[0].clone()]);
    let rank = plan.predicted_rank.unwrap();
    assert_eq!(rank[0].value, rank[1].value);
}

#[test]
fn progressive_warns_beyond_the_curve() {
    let m = model(&[8, 8, 8, 8, 8], 6);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let curve = QuantCurve::build(&ev, &CompressionOp::quant(8), &[16, 12, 8]).unwrap();
    let plan = progressive_order(&m, &synthetic(), &[CompressionOp::prune_layer(0.5)], &curve).unwrap();
    assert!(plan.predicted_rank.unwrap()[0].extrapolated);
    assert_eq!(plan.warnings.len(), 1);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn brute_force_dominates_progressive(seed in 0u64..1000, bits in 3u8..9, p in 0.05f64..0.4) {
        let m = model(&[8, 8, 8, 8, 8], seed);
        let ops = [CompressionOp::prune_layer(0.25), CompressionOp::quant(bits), CompressionOp::prune_unstructured(p)];
        let bf = brute_force_order(&m, &synthetic(), &ops).unwrap();
        let ev = Evaluator::new(&m, synthetic()).unwrap();
        let curve = QuantCurve::standard(&ev).unwrap();
        let plan = progressive_order(&m, &synthetic(), &ops, &curve).unwrap();
        let prog = pipeline_score(&ev, &plan.steps).unwrap();
        prop_assert!(bf.best_score >= prog);
        prop_assert!(bf.table.iter().all(|r| r.score <= bf.best_score));
        prop_assert_eq!(bf.rank_of(prog), bf.table.iter().filter(|r| r.score > prog + 1e-12 * prog.abs().max(1.0)).count());
    }
}

#[test]
fn ratio_account_multiplies_for_prune_then_quant() {
    let m = model(&[8, 8, 8, 8, 8, 8, 8], 7);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let steps = [CompressionOp::prune_layer(2.0 / 6.0), CompressionOp::quant(8)];
    let run = compressors::run_pipeline(&m, &ev.calibration, &steps).unwrap();
    let acc = ratio_account(&m, &steps, &run.model).unwrap();
    assert!((acc.nominal - 3.0).abs() < 1e-12);
    assert!(acc.consistent, "{acc:?}");
    assert_eq!(acc.exception, None);

    let twice = [CompressionOp::prune_layer(1.0 / 6.0), CompressionOp::prune_layer(1.0 / 6.0)];
    let run = compressors::run_pipeline(&m, &ev.calibration, &twice).unwrap();
    assert!(ratio_account(&m, &twice, &run.model).unwrap().exception.is_some());
}

#[test]
fn multi_stage_symmetry() {
    let m = model(&[16, 16, 16, 16, 16], 8);
    let p = CompressionOp::prune_unstructured(0.1);
    let q = CompressionOp::quant(6);
    let rows = multi_stage(&m, &synthetic(), 0.3, &[(0.15, 0.15), (0.1, 0.2), (0.2, 0.1)], &p, &q, 4, 1).unwrap();
    assert_eq!(rows[0].advantage, 0.0);
    assert_eq!(rows[0].advantage_se, 0.0);
    assert_eq!(rows[1].advantage, -rows[2].advantage);
    assert_eq!(rows[1].score, rows[2].reverse_score);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let direct =
        pipeline_score(&ev, &[p.with_fraction(0.1), q.clone(), p.with_fraction(0.2)]).unwrap();
    assert_eq!(rows[1].score, direct);
}

#[test]
fn multi_stage_averages_stochastic_draws() {
    let m = model(&[16, 16, 16, 16, 16], 9);
    let p = CompressionOp::prune_unstructured(0.1);
    let q = CompressionOp::quant(4).stochastic(0);
    let rows = multi_stage(&m, &synthetic(), 0.3, &[(0.1, 0.2)], &p, &q, 6, 3).unwrap();
    assert!(rows[0].advantage_se > 0.0);
    let again = multi_stage(&m, &synthetic(), 0.3, &[(0.1, 0.2)], &p, &q, 6, 3).unwrap();
    assert_eq!(rows[0].advantage, again[0].advantage);
}

#[test]
fn multi_stage_argument_checks() {
    let m = model(&[8, 8, 8], 10);
    let p = CompressionOp::prune_unstructured(0.1);
    let q = CompressionOp::quant(6);
    assert!(multi_stage(&m, &synthetic(), 0.3, &[(0.1, 0.1)], &p, &q, 1, 0).is_err());
    assert!(multi_stage(&m, &synthetic(), 0.3, &[(0.0, 0.3)], &p, &q, 1, 0).is_err());
    assert!(multi_stage(&m, &synthetic(), 0.3, &[(0.1, 0.2)], &q, &p, 1, 0).is_err());
}

#[test]
fn assumption2_on_identity_and_coarse_quantization() {
    let m = separated_model(&model(&[8, 8, 8, 8, 8, 8, 8], 11), 2.0).unwrap();
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let p = CompressionOp::prune_layer(2.0 / 6.0);
    let id = verify_assumption2(&ev, &p, &CompressionOp::quant(16), 0.5).unwrap();
    assert_eq!(id.error_ratio, 0.0);
    assert_eq!(id.perturbation, 0.0);
    assert!(id.gap > 0.0);
    assert!(id.holds);

    // oracle for the gap: layer energies sorted ascending
    let cal = Calibration::of(&m).unwrap();
    let mut e: Vec<f64> = cal.outputs.iter().map(frob_norm_sq).collect();
    e.sort_by(f64::total_cmp);
    assert!((id.gap - (e[2] - e[1])).abs() <= 1e-9 * e[2]);

    let coarse = verify_assumption2(&ev, &p, &CompressionOp::quant(2), 0.5).unwrap();
    assert!(coarse.error_ratio > 0.0);
    assert!(coarse.perturbation > 0.0);
    assert!(verify_assumption2(&ev, &CompressionOp::quant(4), &p, 0.5).is_err());
}

#[test]
fn bit_groups_run_widest_first() {
    let groups = bit_groups(&[8, 4, 8, 6], &CompressionOp::quant(8).per_row());
    let got: Vec<(u8, Option<Vec<usize>>)> =
        groups.iter().map(|g| (g.quant_spec().unwrap().bits, g.quant_spec().unwrap().layers.clone())).collect();
    assert_eq!(got, vec![(8, Some(vec![0, 2])), (6, Some(vec![3])), (4, Some(vec![1]))]);
}

#[test]
fn allocation_narrows_the_cheapest_layer() {
    let m = model(&[8, 8, 8], 12);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let q = CompressionOp::quant(8);
    let alloc = allocate_bits(&ev, 6.0, &[8, 4], &q).unwrap();
    let err = |b: u8, i: usize| {
        let (qm, _) = compressors::apply(&q.with_bits(b), &m, &m).unwrap();
        frob_norm_sq(&ev.calibration.layer_error(&qm, i).unwrap())
    };
    let cheaper = if err(4, 0) - err(8, 0) <= err(4, 1) - err(8, 1) { 0 } else { 1 };
    let mut want = vec![8, 8];
    want[cheaper] = 4;
    assert_eq!(alloc, want);
    assert!(allocate_bits(&ev, 3.0, &[8, 4], &q).is_err());
    assert!(allocate_bits(&ev, 6.0, &[], &q).is_err());
}

#[test]
fn mixed_precision_orders_coincide() {
    let m = model(&[8, 8, 8, 8, 8], 13);
    let uniform = mpq_orderings(&m, &synthetic(), 8.0, &[8], &CompressionOp::quant(8)).unwrap();
    assert_eq!(uniform.allocation, vec![8; 4]);
    assert_eq!(uniform.coa, 0.0);
    let mixed = mpq_orderings(&m, &synthetic(), 5.0, &[8, 6, 4], &CompressionOp::quant(8).per_row()).unwrap();
    assert!(mixed.disjoint);
    assert_eq!(mixed.coa, 0.0);
    assert!(mixed.realized_bits <= 5.0 + 1e-12);
    assert!(mixed.allocation.iter().any(|&b| b != mixed.allocation[0]));
    assert!(mpq_orderings(&m, &synthetic(), 5.0, &[8, 6, 4], &CompressionOp::prune_layer(0.1)).is_err());
}

#[test]
fn plan_json_round_trip() {
    let plan = Plan::new(vec![CompressionOp::quant(6).stochastic(3), CompressionOp::prune_row(0.2)]).unwrap();
    let back: Plan = serde_json::from_str(&plan.to_json().unwrap()).unwrap();
    assert_eq!(back, plan);
    assert_eq!(plan.labels().len(), 2);
    assert!(Plan::new(vec![]).is_err());
}
