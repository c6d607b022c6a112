//! Order search: exhaustive permutation scoring, the progressive-intensity
//! heuristic, multi-stage pruning schedules and mixed-precision orderings.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::{self, prune_count, CompressionOp, Family, Rounding};
use crate::error::{invalid, Error, Result};
use crate::linalg::frob_norm_sq;
use crate::metrics::{self, Cer, QuantCurve};
use crate::model::{units_at, AbstractType, Evaluator, LayeredModel, Metric};
use crate::report::Table;
use crate::rng;
use crate::theory::mean_se;

/// Largest operator count brute force accepts.
pub const MAX_BRUTE_FORCE_OPS: usize = 6;

/// An ordered compression pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub steps: Vec<CompressionOp>,
    /// CER of each step on the original model, when the plan was ranked by it.
    pub predicted_rank: Option<Vec<Cer>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Plan {
    pub fn new(steps: Vec<CompressionOp>) -> Result<Self> {
        if steps.is_empty() {
            return Err(invalid("a plan needs at least one step"));
        }
        for op in &steps {
            op.validate()?;
        }
        Ok(Plan { steps, predicted_rank: None, warnings: Vec::new() })
    }

    pub fn labels(&self) -> Vec<String> {
        self.steps.iter().map(CompressionOp::label).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Metric of `m` compressed by `steps` in order.
pub fn pipeline_score(ev: &Evaluator, steps: &[CompressionOp]) -> Result<f64> {
    let run = compressors::run_pipeline(ev.original, &ev.calibration, steps)?;
    ev.score(&run.model)
}

/// Realized against nominal compression of a finished pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioAccount {
    pub nominal: f64,
    pub realized: f64,
    pub consistent: bool,
    /// Why the product rule does not apply, when it does not.
    pub exception: Option<String>,
}

/// Compares `dense / compressed` footprint with the product of the steps'
/// ratios, pruning fractions taken at their rounded unit counts.
pub fn ratio_account(original: &LayeredModel, steps: &[CompressionOp], compressed: &LayeredModel) -> Result<RatioAccount> {
    let mut nominal = 1.0;
    for op in steps {
        nominal *= match op.prune_spec() {
            Some(p) => {
                let n = units_at(original, op.granularity())?.len();
                let k = prune_count(p.fraction, n);
                n as f64 / (n - k) as f64
            }
            None => op.ratio(),
        };
    }
    let realized = original.dense_footprint_bits() / compressed.footprint_bits();
    let prunes = steps.iter().filter(|op| op.is_pruning()).count();
    let shares = steps.iter().any(|op| op.family() == Family::Share);
    let partial_quant = steps.iter().any(|op| op.quant_spec().is_some_and(|q| q.layers.is_some()));
    let exception = if prunes > 1 {
        Some("several pruning steps: fractions count against the full unit set, not the survivors".to_string())
    } else if shares && prunes > 0 {
        Some("tied layers and pruning overlap: tied groups keep only entries pruned in every member".to_string())
    } else if partial_quant {
        Some("quantization restricted to a layer subset".to_string())
    } else if steps.iter().filter(|op| op.quant_spec().is_some()).count() > 1 {
        Some("repeated quantization: storage width is set by the last step".to_string())
    } else {
        None
    };
    let consistent = (realized / nominal - 1.0).abs() <= 1e-9;
    Ok(RatioAccount { nominal, realized, consistent, exception })
}

/// One row of the brute-force table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PermutationRow {
    pub order: Vec<usize>,
    pub labels: Vec<String>,
    pub score: f64,
    pub ratio: RatioAccount,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BruteForce {
    pub best: Plan,
    pub best_score: f64,
    /// Every permutation in lexicographic order of step indices.
    pub table: Vec<PermutationRow>,
}

impl BruteForce {
    /// Number of permutations scoring strictly better than `score`
    /// (beyond a relative tolerance of `1e-12`).
    pub fn rank_of(&self, score: f64) -> usize {
        let tol = 1e-12 * score.abs().max(1.0);
        self.table.iter().filter(|r| r.score > score + tol).count()
    }

    /// One row per permutation with its rank among all of them.
    pub fn to_table(&self) -> Table {
        let mut t = Table::new(&["rank", "order", "steps", "score", "nominal_ratio", "realized_ratio", "ratio_exception"]);
        for r in &self.table {
            t.push(vec![
                self.rank_of(r.score).into(),
                r.order.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ").into(),
                r.labels.join(" > ").into(),
                r.score.into(),
                r.ratio.nominal.into(),
                r.ratio.realized.into(),
                r.ratio.exception.clone().into(),
            ]);
        }
        t
    }
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..n).collect();
    loop {
        out.push(cur.clone());
        // next lexicographic permutation
        let Some(i) = (1..n).rev().find(|&i| cur[i - 1] < cur[i]) else { break };
        let j = (i..n).rev().find(|&j| cur[j] > cur[i - 1]).expect("pivot has a successor");
        cur.swap(i - 1, j);
        cur[i..].reverse();
    }
    out
}

/// Scores every ordering of `ops` and returns the best, ties going to the
/// lexicographically smallest index sequence.
pub fn brute_force_order(m: &LayeredModel, metric: &Metric, ops: &[CompressionOp]) -> Result<BruteForce> {
    if ops.is_empty() {
        return Err(invalid("brute force needs at least one operator"));
    }
    if ops.len() > MAX_BRUTE_FORCE_OPS {
        return Err(invalid(format!(
            "{} operators give {} orderings; use progressive_order for more than {MAX_BRUTE_FORCE_OPS}",
            ops.len(),
            (1..=ops.len()).product::<usize>()
        )));
    }
    for op in ops {
        op.validate()?;
    }
    let ev = Evaluator::new(m, *metric)?;
    let table = permutations(ops.len())
        .into_par_iter()
        .map(|order| {
            let steps: Vec<CompressionOp> = order.iter().map(|&k| ops[k].clone()).collect();
            let run = compressors::run_pipeline(m, &ev.calibration, &steps)?;
            Ok(PermutationRow {
                labels: steps.iter().map(CompressionOp::label).collect(),
                score: ev.score(&run.model)?,
                ratio: ratio_account(m, &steps, &run.model)?,
                order,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, row) in table.iter().enumerate() {
        if row.score > table[best].score {
            best = k;
        }
    }
    let steps = table[best].order.iter().map(|&k| ops[k].clone()).collect();
    Ok(BruteForce { best: Plan::new(steps)?, best_score: table[best].score, table })
}

fn family_rank(f: Family) -> u8 {
    match f {
        Family::QuantUniform => 0,
        Family::PruneUnstructured => 1,
        Family::PruneRow => 2,
        Family::PruneLayer => 3,
        Family::Share => 4,
    }
}

/// Orders `ops` weakest first by CER on the original model; ties go to
/// the smaller nominal ratio, then to the family order Q, P_elem, P_row,
/// P_layer, S.
pub fn progressive_order(m: &LayeredModel, metric: &Metric, ops: &[CompressionOp], curve: &QuantCurve) -> Result<Plan> {
    if ops.is_empty() {
        return Err(invalid("progressive ordering needs at least one operator"));
    }
    let ev = Evaluator::new(m, *metric)?;
    let cers = ops
        .iter()
        .map(|op| Ok(curve.invert(metrics::single_score(&ev, op)?)))
        .collect::<Result<Vec<Cer>>>()?;
    let mut idx: Vec<usize> = (0..ops.len()).collect();
    idx.sort_by(|&a, &b| {
        cers[a]
            .value
            .total_cmp(&cers[b].value)
            .then(ops[a].ratio().total_cmp(&ops[b].ratio()))
            .then(family_rank(ops[a].family()).cmp(&family_rank(ops[b].family())))
    });
    let mut plan = Plan::new(idx.iter().map(|&k| ops[k].clone()).collect())?;
    plan.predicted_rank = Some(idx.iter().map(|&k| cers[k]).collect());
    for &k in &idx {
        if cers[k].extrapolated {
            plan.warnings.push(format!("CER of {} extrapolated beyond the curve", ops[k].label()));
        }
        if cers[k].ambiguous {
            plan.warnings.push(format!("CER of {} falls on a flat curve segment", ops[k].label()));
        }
    }
    Ok(plan)
}

/// One split of a two-stage pruning schedule around a quantization step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MultiStageRow {
    pub p1: f64,
    pub p2: f64,
    /// Mean score of `P(p1) -> Q -> P(p2)`.
    pub score: f64,
    /// Mean score of `P(p2) -> Q -> P(p1)`.
    pub reverse_score: f64,
    pub advantage: f64,
    pub advantage_se: f64,
}

/// Evaluates `P(p1) -> Q -> P(p2)` for each split. The second stage picks
/// among units the first left standing, scored on the quantized model.
/// Stochastic quantization is averaged over `trials` draws; nearest
/// rounding uses one.
#[allow(clippy::too_many_arguments)]
pub fn multi_stage(
    m: &LayeredModel,
    metric: &Metric,
    total_p: f64,
    splits: &[(f64, f64)],
    prune: &CompressionOp,
    quant: &CompressionOp,
    trials: usize,
    seed: u64,
) -> Result<Vec<MultiStageRow>> {
    if !prune.is_pruning() {
        return Err(invalid("multi-stage schedules need a pruning operator"));
    }
    let q = quant.quant_spec().ok_or_else(|| invalid("multi-stage schedules need a quantization operator"))?;
    for &(p1, p2) in splits {
        if !(p1 > 0.0 && p2 > 0.0) {
            return Err(invalid(format!("split ({p1}, {p2}) must have both stages positive")));
        }
        if ((p1 + p2) - total_p).abs() > 1e-9 {
            return Err(invalid(format!("split ({p1}, {p2}) does not sum to {total_p}")));
        }
    }
    let trials = if q.rounding == Rounding::Stochastic { trials.max(1) } else { 1 };
    let ev = Evaluator::new(m, *metric)?;
    let score = |a: f64, b: f64, t: usize| -> Result<f64> {
        let qt = quant.reseeded(rng::derive_seed(seed, &[t as u64]));
        pipeline_score(&ev, &[prune.with_fraction(a), qt, prune.with_fraction(b)])
    };
    splits
        .iter()
        .map(|&(p1, p2)| {
            let pairs = (0..trials)
                .into_par_iter()
                .map(|t| Ok((score(p1, p2, t)?, score(p2, p1, t)?)))
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let adv: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
            let (advantage, advantage_se) = mean_se(&adv);
            Ok(MultiStageRow {
                p1,
                p2,
                score: pairs.iter().map(|p| p.0).sum::<f64>() / trials as f64,
                reverse_score: pairs.iter().map(|p| p.1).sum::<f64>() / trials as f64,
                advantage,
                advantage_se,
            })
        })
        .collect()
}

/// Machine check that quantization stays negligible next to pruning.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Assumption2 {
    /// Total quantization error over total pruning error, both standalone.
    pub error_ratio: f64,
    /// Score gap between the last unit pruned and the first one kept.
    pub gap: f64,
    /// Largest change of any unit's pruning score once quantization ran.
    pub perturbation: f64,
    pub holds: bool,
}

/// Checks the error ratio against `max_ratio` and that quantizing first
/// cannot move any unit's score across the selection boundary, i.e.
/// `2 * perturbation < gap`.
pub fn verify_assumption2(
    ev: &Evaluator,
    prune: &CompressionOp,
    quant: &CompressionOp,
    max_ratio: f64,
) -> Result<Assumption2> {
    let spec = prune.prune_spec().ok_or_else(|| invalid("the first operator must prune"))?;
    if quant.quant_spec().is_none() {
        return Err(invalid("the second operator must quantize"));
    }
    let m = ev.original;
    let cal = &ev.calibration;
    let (p, _) = compressors::apply_with(prune, m, cal)?;
    let (q, _) = compressors::apply_with(quant, m, cal)?;
    let error_ratio = cal.total_error(&q)? / cal.total_error(&p)?;
    let before = compressors::pruning_scores(prune, m, cal)?;
    let after = compressors::pruning_scores(prune, &q, cal)?;
    let mut sorted: Vec<f64> = before.iter().map(|s| s.1).collect();
    sorted.sort_by(f64::total_cmp);
    let k = prune_count(spec.fraction, sorted.len());
    let gap = if k == 0 || k >= sorted.len() { 0.0 } else { sorted[k] - sorted[k - 1] };
    let perturbation = if before.len() == after.len() {
        before.iter().zip(&after).map(|(a, b)| (a.1 - b.1).abs()).fold(0.0, f64::max)
    } else {
        f64::INFINITY
    };
    Ok(Assumption2 { error_ratio, gap, perturbation, holds: error_ratio <= max_ratio && 2.0 * perturbation < gap })
}

/// Progressive against regressive application of a mixed-precision plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MpqResult {
    pub avg_bits: f64,
    /// Bit-width per layer.
    pub allocation: Vec<u8>,
    /// Parameter-weighted mean bit-width actually reached.
    pub realized_bits: f64,
    /// High bit-widths applied first.
    pub progressive_score: f64,
    /// Low bit-widths applied first.
    pub regressive_score: f64,
    pub coa: f64,
    /// Every layer received exactly one bit-width in both orders.
    pub disjoint: bool,
}

/// Greedy sensitivity allocation: start every layer at the widest menu
/// entry and repeatedly narrow the layer whose next step down costs the
/// least added error per bit saved, until the parameter-weighted mean
/// reaches `avg_bits`.
pub fn allocate_bits(ev: &Evaluator, avg_bits: f64, menu: &[u8], template: &CompressionOp) -> Result<Vec<u8>> {
    let m = ev.original;
    let mut menu: Vec<u8> = menu.to_vec();
    menu.sort_unstable_by(|a, b| b.cmp(a));
    menu.dedup();
    if menu.is_empty() {
        return Err(invalid("empty bit menu"));
    }
    for &b in &menu {
        template.with_bits(b).validate()?;
    }
    let lo = f64::from(*menu.last().expect("non-empty"));
    if avg_bits < lo - 1e-12 {
        return Err(invalid(format!("average of {avg_bits} bits is below the narrowest menu entry {lo}")));
    }
    let sizes: Vec<f64> = m.layers.iter().map(|l| (l.weight.rows() * l.weight.cols()) as f64).collect();
    let total: f64 = sizes.iter().sum();
    // error[i][k]: squared layer error of layer i at menu[k]
    let mut error = vec![vec![0.0; menu.len()]; m.num_layers()];
    for (k, &b) in menu.iter().enumerate() {
        let (q, _) = compressors::apply_with(&template.with_bits(b), m, &ev.calibration)?;
        for (i, row) in error.iter_mut().enumerate() {
            row[k] = frob_norm_sq(&ev.calibration.layer_error(&q, i)?);
        }
    }
    let mut level = vec![0usize; m.num_layers()];
    let mean = |level: &[usize]| -> f64 {
        level.iter().zip(&sizes).map(|(&k, s)| f64::from(menu[k]) * s).sum::<f64>() / total
    };
    while mean(&level) > avg_bits + 1e-12 {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..level.len() {
            let k = level[i];
            if k + 1 >= menu.len() {
                continue;
            }
            let saved = f64::from(menu[k] - menu[k + 1]) * sizes[i];
            let cost = (error[i][k + 1] - error[i][k]) / saved;
            if best.is_none_or(|(c, _)| cost < c) {
                best = Some((cost, i));
            }
        }
        match best {
            Some((_, i)) => level[i] += 1,
            None => return Err(invalid(format!("cannot reach an average of {avg_bits} bits"))),
        }
    }
    Ok(level.into_iter().map(|k| menu[k]).collect())
}

/// One quantization operator per distinct bit-width of `allocation`,
/// restricted to the layers that received it, widest first.
pub fn bit_groups(allocation: &[u8], template: &CompressionOp) -> Vec<CompressionOp> {
    let mut bits: Vec<u8> = allocation.to_vec();
    bits.sort_unstable_by(|a, b| b.cmp(a));
    bits.dedup();
    bits.into_iter()
        .map(|b| {
            let layers = allocation.iter().enumerate().filter(|(_, &x)| x == b).map(|(i, _)| i).collect();
            template.with_bits(b).on_layers(layers)
        })
        .collect()
}

fn each_layer_once(run: &compressors::PipelineRun) -> Result<bool> {
    let mut hits = vec![0usize; run.model.num_layers()];
    for mask in &run.masks {
        for (i, a) in mask.lift(AbstractType::Layer, &run.model)?.into_iter().enumerate() {
            hits[i] += usize::from(a);
        }
    }
    Ok(hits.iter().all(|&h| h == 1))
}

/// Applies a sensitivity-driven mixed-precision allocation high bits first
/// (progressive) and low bits first (regressive).
pub fn mpq_orderings(
    m: &LayeredModel,
    metric: &Metric,
    avg_bits: f64,
    bit_menu: &[u8],
    template: &CompressionOp,
) -> Result<MpqResult> {
    if template.quant_spec().is_none() {
        return Err(invalid("mixed precision needs a quantization template"));
    }
    let ev = Evaluator::new(m, *metric)?;
    let allocation = allocate_bits(&ev, avg_bits, bit_menu, template)?;
    let prog = bit_groups(&allocation, template);
    let regr: Vec<CompressionOp> = prog.iter().rev().cloned().collect();
    let run_p = compressors::run_pipeline(m, &ev.calibration, &prog)?;
    let run_r = compressors::run_pipeline(m, &ev.calibration, &regr)?;
    let progressive_score = ev.score(&run_p.model)?;
    let regressive_score = ev.score(&run_r.model)?;
    let sizes: Vec<f64> = m.layers.iter().map(|l| (l.weight.rows() * l.weight.cols()) as f64).collect();
    let realized_bits =
        allocation.iter().zip(&sizes).map(|(&b, s)| f64::from(b) * s).sum::<f64>() / sizes.iter().sum::<f64>();
    let disjoint = each_layer_once(&run_p)? && each_layer_once(&run_r)?;
    if !disjoint {
        return Err(Error::NotDisjoint);
    }
    Ok(MpqResult {
        avg_bits,
        allocation,
        realized_bits,
        progressive_score,
        regressive_score,
        coa: progressive_score - regressive_score,
        disjoint,
    })
}

#[cfg(test)]
mod tests;
