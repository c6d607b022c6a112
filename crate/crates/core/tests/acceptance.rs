//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `KNOWN_GAPS` fails.

use std::time::Instant;

use ordlab_core::compressors::{self, CompressionOp, Family};
use ordlab_core::harness::{self, ExperimentConfig};
use ordlab_core::metrics::{self, PairRuns, QuantCurve};
use ordlab_core::model::{build_synthetic_model, Calibration, Evaluator, LayeredModel, Metric};
use ordlab_core::planner;
use ordlab_core::theory::{self, TheoremInstance};

/// Criteria this laboratory cannot meet; see the README.
const KNOWN_GAPS: &[u8] = &[5];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn synthetic() -> Metric {
    Metric::synthetic(1.0, 0.0).unwrap()
}

fn model(dims: &[usize], seed: u64) -> LayeredModel {
    build_synthetic_model(dims, seed).unwrap()
}

fn theorem1_exactness() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut n = 0;
    let mut with_flips = 0;
    for seed in 0..120u64 {
        let base = model(&[8, 8, 8, 8, 8, 8, 8], seed);
        let bits = [3u8, 4, 5, 6, 8][(seed % 5) as usize];
        let (m, p, q) = match seed % 3 {
            0 => {
                let q = CompressionOp::quant(bits);
                match theory::near_tie_model(&base, &q, 1) {
                    Ok(t) => (t.model, CompressionOp::prune_layer(1.0 / 6.0), q),
                    Err(_) => continue,
                }
            }
            1 => (base, CompressionOp::prune_layer(2.0 / 6.0), CompressionOp::quant(bits).stochastic(seed)),
            _ => (base, CompressionOp::prune_row(0.2), CompressionOp::quant(bits).per_row()),
        };
        let inst = TheoremInstance::new(m, synthetic(), p, q).unwrap();
        let c = theory::theorem1_check(&inst).unwrap();
        worst = worst.max(c.residual);
        with_flips += usize::from(c.g1 > 0);
        n += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        n >= 100 && worst < 1e-8 && secs < 30.0,
        format!("{n} instances ({with_flips} order-dependent), max residual {worst:.2e}, {secs:.1}s"),
    )
}

fn cer_self_consistency() -> Outcome {
    let m = model(&[16, 16, 16, 16], 1);
    let ev = Evaluator::new(&m, synthetic()).unwrap();
    let widths: Vec<u8> = (2..=16).rev().collect();
    let curve = QuantCurve::build(&ev, &CompressionOp::quant(16), &widths).unwrap();
    let mut worst: f64 = 0.0;
    for &b in &widths {
        let c = metrics::cer(&m, &synthetic(), &CompressionOp::quant(b), &curve).unwrap();
        worst = worst.max((c.value - 16.0 / f64::from(b)).abs());
    }
    let standard = QuantCurve::standard(&ev).unwrap();
    for &b in &metrics::CURVE_BITS {
        let c = metrics::cer(&m, &synthetic(), &CompressionOp::quant(b), &standard).unwrap();
        worst = worst.max((c.value - 16.0 / f64::from(b)).abs());
    }
    let worked = QuantCurve::from_points(vec![(2.0, 70.0), (4.0, 60.0)]).unwrap().invert(65.0);
    outcome(
        worst < 1e-6 && worked.value == 3.0,
        format!("max |cer - 16/B| {worst:.2e} over B = 2..16, worked example {}", worked.value),
    )
}

fn disjointness_dichotomy() -> Outcome {
    let m = model(&[16, 16, 16, 16, 16], 7);
    let cal = Calibration::of(&m).unwrap();
    let prunes = [
        CompressionOp::prune_layer(0.25),
        CompressionOp::prune_row(0.25),
        CompressionOp::prune_unstructured(0.1),
        CompressionOp::prune_unstructured(0.3),
    ];
    let mut pairs = 0;
    let mut coarse_ok = true;
    let mut coarse = 0;
    let mut fine_positive = 0;
    let mut worst_coarse: f64 = 0.0;
    for p in &prunes {
        for b in [8u8, 4, 3] {
            for q in [CompressionOp::quant(b), CompressionOp::quant(b).per_row()] {
                pairs += 1;
                let runs = PairRuns::new(&cal, &m, &p.clone(), &q).unwrap();
                let inter = metrics::interference_from_run(&m, &cal, &runs.forward, &q).unwrap();
                if p.granularity() >= q.granularity() {
                    coarse += 1;
                    let disjoint = metrics::disjoint_both_orders(&runs).unwrap();
                    worst_coarse = worst_coarse.max(inter.sum_of_norms);
                    coarse_ok &= disjoint && inter.sum_of_norms <= 1e-10;
                } else if inter.sum_of_norms > 0.0 {
                    fine_positive += 1;
                }
            }
        }
    }
    // interference at fixed p as the quantizer coarsens, averaged over draws
    let p = CompressionOp::prune_unstructured(0.1);
    let trials = 16u64;
    let means: Vec<f64> = [8u8, 6, 4, 3]
        .iter()
        .map(|&b| {
            (0..trials)
                .map(|t| {
                    let q = CompressionOp::quant(b).stochastic(ordlab_core::rng::derive_seed(3, &[u64::from(b), t]));
                    metrics::interference(&m, &p, &q).unwrap().sum_of_norms
                })
                .sum::<f64>()
                / trials as f64
        })
        .collect();
    let rising = means.windows(2).all(|w| w[1] >= w[0]);
    outcome(
        pairs >= 20 && coarse_ok && fine_positive > 0 && rising,
        format!(
            "{pairs} pairs, {coarse} coarse-pruning pairs disjoint (max interference {worst_coarse:.1e}), \
             {fine_positive} finer pairs interfere, mean interference at B 8/6/4/3 = {:.3e}/{:.3e}/{:.3e}/{:.3e}",
            means[0], means[1], means[2], means[3]
        ),
    )
}

fn theorem2_monotonicity() -> Outcome {
    let start = Instant::now();
    let (mut runs, mut passed, mut skipped) = (0, 0, 0);
    for seed in 0..50u64 {
        let m = theory::separated_model(&model(&[16, 16, 16, 16, 16, 16, 16], seed), 1.05).unwrap();
        let rep = theory::theorem2_experiment(
            &m,
            &synthetic(),
            &CompressionOp::prune_layer(2.0 / 6.0),
            &CompressionOp::quant(8).stochastic(seed),
            &[12, 8, 6, 4],
            64,
            seed,
        )
        .unwrap();
        if rep.assumption_violating {
            skipped += 1;
            continue;
        }
        runs += 1;
        passed += usize::from(rep.monotone);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        runs > 0 && passed * 100 >= runs * 95 && secs < 300.0,
        format!("{passed}/{runs} runs monotone ({skipped} seeds violate the assumption), {secs:.1}s"),
    )
}

fn hypothesis_trend() -> Outcome {
    let src = r#"{
      "kind": "coa_grid",
      "model": { "dims": [32, 32, 32, 32, 32, 32, 32], "seed": 3 },
      "grid": {
        "families": ["PruneUnstructured"],
        "fractions": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3],
        "bits": [4, 5, 6, 7, 8],
        "rounding": "stochastic"
      },
      "trials": 32,
      "seed": 1
    }"#;
    let report = harness::execute(&ExperimentConfig::parse(src).unwrap()).unwrap();
    let series = report.summary["series"].as_array().unwrap();
    let monotone = series.iter().all(|s| s["monotone"] == true);
    let fits = report.fit.as_ref().unwrap()["fits"].as_array().unwrap().clone();
    let mut fit_notes = Vec::new();
    let mut convex = 0;
    for f in fits.iter().rev().take(2) {
        let fit = &f["fit"];
        let ok = fit["converged"] == true && fit["b"].as_f64().is_some_and(|b| b > 0.0);
        convex += usize::from(ok);
        fit_notes.push(format!(
            "p={} a={:.3e} b={:.3e} converged={}",
            f["p"],
            fit["a"].as_f64().unwrap_or(f64::NAN),
            fit["b"].as_f64().unwrap_or(f64::NAN),
            fit["converged"]
        ));
    }
    outcome(
        monotone && convex == 2,
        format!("all {} series monotone: {monotone}; largest p fits: {}", series.len(), fit_notes.join("; ")),
    )
}

fn planner_optimality() -> Outcome {
    let mut two = (0usize, 0usize);
    let mut seed = 0u64;
    let mut misses = Vec::new();
    while two.0 < 100 && seed < 2000 {
        let l = 4 + (seed % 3) as usize;
        let m = model(&vec![16; l + 1], seed);
        let p = CompressionOp::prune_layer((1 + seed % 2) as f64 / l as f64);
        let q = CompressionOp::quant([3u8, 4, 5, 6, 8][(seed % 5) as usize]);
        seed += 1;
        let ev = Evaluator::new(&m, synthetic()).unwrap();
        if !planner::verify_assumption2(&ev, &p, &q, theory::DEFAULT_ASSUMPTION_RATIO).unwrap().holds {
            continue;
        }
        let runs = PairRuns::new(&ev.calibration, &m, &p, &q).unwrap();
        if !metrics::disjoint_both_orders(&runs).unwrap() {
            continue;
        }
        two.0 += 1;
        let ops = [p, q];
        let bf = planner::brute_force_order(&m, &synthetic(), &ops).unwrap();
        let plan = planner::progressive_order(&m, &synthetic(), &ops, &QuantCurve::standard(&ev).unwrap()).unwrap();
        let score = planner::pipeline_score(&ev, &plan.steps).unwrap();
        if bf.rank_of(score) == 0 {
            two.1 += 1;
        } else {
            misses.push(format!("2-method seed {}: {:?} vs {:?}", seed - 1, plan.labels(), bf.best.labels()));
        }
    }

    let mut three = (0usize, 0usize);
    let mut seed = 0u64;
    while three.0 < 100 && seed < 2000 {
        let l = 4 + (seed % 3) as usize;
        let m = model(&vec![16; l + 1], seed);
        let layer = CompressionOp::prune_layer(1.0 / l as f64);
        let q = CompressionOp::quant([3u8, 4, 5, 6, 8][(seed % 5) as usize]);
        seed += 1;
        let ev = Evaluator::new(&m, synthetic()).unwrap();
        if !planner::verify_assumption2(&ev, &layer, &q, theory::DEFAULT_ASSUMPTION_RATIO).unwrap().holds {
            continue;
        }
        let ops = [layer, CompressionOp::prune_unstructured(0.1), q];
        let bf = planner::brute_force_order(&m, &synthetic(), &ops).unwrap();
        let plan = planner::progressive_order(&m, &synthetic(), &ops, &QuantCurve::standard(&ev).unwrap()).unwrap();
        let rank = bf.rank_of(planner::pipeline_score(&ev, &plan.steps).unwrap());
        three.0 += 1;
        if rank <= 1 {
            three.1 += 1;
        } else {
            misses.push(format!(
                "3-method seed {}: rank {rank}, plan {:?}, best {:?}",
                seed - 1,
                plan.labels(),
                bf.best.labels()
            ));
        }
    }
    for m in &misses {
        println!("    {m}");
    }
    outcome(
        two.0 == 100 && two.1 == 100 && three.0 == 100 && three.1 * 100 >= three.0 * 90,
        format!("2-method argmax {}/{}, 3-method top-2 {}/{}", two.1, two.0, three.1, three.0),
    )
}

fn multistage_ordering() -> Outcome {
    let p = CompressionOp::prune_unstructured(0.1);
    let q = CompressionOp::quant(8);
    let splits = [(0.05, 0.25), (0.1, 0.2), (0.25, 0.05), (0.2, 0.1), (0.15, 0.15)];
    let (mut runs, mut ok, mut antisym) = (0usize, 0usize, true);
    let mut seed = 0u64;
    while runs < 50 && seed < 500 {
        let m = model(&[32, 32, 32, 32, 32, 32, 32], seed);
        seed += 1;
        let ev = Evaluator::new(&m, synthetic()).unwrap();
        let a2 = planner::verify_assumption2(&ev, &p.with_fraction(0.3), &q, theory::DEFAULT_ASSUMPTION_RATIO).unwrap();
        if a2.error_ratio > theory::DEFAULT_ASSUMPTION_RATIO {
            continue;
        }
        runs += 1;
        let rows = planner::multi_stage(&m, &synthetic(), 0.3, &splits, &p, &q, 1, seed).unwrap();
        antisym &= rows[0].advantage == -rows[2].advantage && rows[1].advantage == -rows[3].advantage;
        antisym &= rows[4].advantage == 0.0;
        let tau = |r: &planner::MultiStageRow| 1e-9 * r.score.abs().max(1.0);
        ok += usize::from(rows[..2].iter().all(|r| r.advantage >= -tau(r)));
    }
    outcome(
        runs == 50 && ok * 100 >= runs * 95 && antisym,
        format!("small-first advantage >= -tau in {ok}/{runs} runs, antisymmetry exact: {antisym}"),
    )
}

fn mpq_ordering() -> Outcome {
    let (mut ok, mut all_disjoint) = (0, true);
    for seed in 0..50u64 {
        let m = model(&[16, 16, 16, 16, 16, 16, 16], seed);
        let coas: Vec<(f64, f64)> = [6.0, 5.0, 4.0, 3.0]
            .iter()
            .map(|&avg| {
                let r = planner::mpq_orderings(&m, &synthetic(), avg, &[8, 6, 4, 3, 2], &CompressionOp::quant(16).per_row())
                    .unwrap();
                all_disjoint &= r.disjoint;
                (r.coa, 1e-9 * r.progressive_score.abs().max(1.0))
            })
            .collect();
        ok += usize::from(coas.windows(2).all(|w| w[1].0 >= w[0].0 - w[0].1));
    }
    outcome(all_disjoint && ok * 100 >= 50 * 90, format!("disjoint in every run: {all_disjoint}, non-decreasing in {ok}/50"))
}

fn rotation_effects() -> Outcome {
    let (mut round_trip, mut stable, mut stable_zero, mut layer_stable, mut rising) = (0.0f64, 0, true, true, 0);
    let seeds = 10u64;
    for seed in 0..seeds {
        let m = model(&[16, 32, 16, 16, 8], seed);
        let rotated = compressors::rotate_model(&m).unwrap();
        round_trip = round_trip.max(rotated.final_output().unwrap().sub(&m.final_output().unwrap()).unwrap().max_abs());
        // rotation mixes rows, so only layer selection is guaranteed to survive it
        for op in [CompressionOp::prune_layer(0.25), CompressionOp::prune_layer(0.5), CompressionOp::prune_row(0.2)] {
            let e = compressors::rotation_pruning_error(&m, &op).unwrap();
            if op.family() == Family::PruneLayer {
                layer_stable &= !e.selection_changed;
            }
            if !e.selection_changed {
                stable += 1;
                stable_zero &= e.element_wise == 0.0;
            }
        }
        let errs: Vec<f64> = [0.05, 0.2, 0.4]
            .iter()
            .map(|&p| compressors::rotation_pruning_error(&m, &CompressionOp::prune_unstructured(p)).unwrap().element_wise)
            .collect();
        rising += usize::from(errs.windows(2).all(|w| w[1] > w[0]));
    }
    outcome(
        round_trip <= 1e-9 && layer_stable && stable_zero && rising == seeds as usize,
        format!(
            "round trip {round_trip:.1e}, element-wise error zero in all {stable} selection-stable structured cases \
             (layer pruning always stable: {layer_stable}), unstructured strictly rising in {rising}/{seeds} models"
        ),
    )
}

fn determinism() -> Outcome {
    let configs = [
        r#"{"kind": "coa_grid", "model": {"dims": [8, 8, 8, 8, 8], "seed": 2},
            "grid": {"families": ["PruneRow", "PruneUnstructured"], "fractions": [0.1, 0.3], "bits": [3, 5, 8],
                     "rounding": "stochastic"}, "trials": 6, "seed": 4}"#,
        r#"{"kind": "theorem2", "model": {"dims": [8, 8, 8, 8, 8, 8, 8], "seed": 1, "energy_spread": 1.05},
            "grid": {"families": ["PruneLayer"], "fractions": [0.34], "bits": [8, 6, 4], "rounding": "stochastic"},
            "trials": 8, "seed": 2}"#,
        r#"{"kind": "multistage", "model": {"dims": [16, 16, 16, 16], "seed": 5},
            "grid": {"families": ["PruneUnstructured"], "bits": [5], "rounding": "stochastic"},
            "multistage": {"total_p": 0.3, "splits": [[0.1, 0.2], [0.2, 0.1]]}, "trials": 4, "seed": 6}"#,
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut same = 0;
    for (k, src) in configs.iter().enumerate() {
        let cfg = ExperimentConfig::parse(src).unwrap();
        let bytes: Vec<Vec<u8>> = [Some(1), Some(4), None]
            .into_iter()
            .enumerate()
            .map(|(r, jobs)| {
                let out = dir.path().join(format!("{k}-{r}"));
                harness::run(&cfg, &harness::RunOptions { jobs, out: Some(out.clone()) }).unwrap();
                std::fs::read(out.join("report.csv")).unwrap()
            })
            .collect();
        same += usize::from(bytes.windows(2).all(|w| w[0] == w[1]));
    }
    outcome(same == configs.len(), format!("{same}/{} configs byte-identical over three runs", configs.len()))
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "theorem 1 exactness", theorem1_exactness),
        (2, "CER self-consistency", cer_self_consistency),
        (3, "disjointness and interference", disjointness_dichotomy),
        (4, "theorem 2 monotonicity", theorem2_monotonicity),
        (5, "COA trend and exponential fit", hypothesis_trend),
        (6, "planner optimality", planner_optimality),
        (7, "multi-stage ordering", multistage_ordering),
        (8, "mixed-precision ordering", mpq_ordering),
        (9, "rotation effects", rotation_effects),
        (10, "determinism", determinism),
    ];
    let mut unexpected = Vec::new();
    for (id, name, check) in criteria {
        let o = check();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = if !o.pass && KNOWN_GAPS.contains(&id) { " (known gap)" } else { "" };
        println!("{tag} [{id:>2}] {name}: {}{known}", o.detail);
        if o.pass == KNOWN_GAPS.contains(&id) {
            unexpected.push(id);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected results for criteria {unexpected:?}");
        std::process::exit(1);
    }
}
