//! Checkable oracles for the two ordering theorems and the violation
//! cases, plus builders for models on which pruning selection provably
//! flips with the order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compressors::{self, prune_count, CompressionOp, Rounding};
use crate::error::{invalid, Result};
use crate::linalg::{frob_norm_sq, Matrix};
use crate::metrics::{self, Cer, PairRuns, QuantCurve, UnitPartition};
use crate::model::{units_at, Calibration, Evaluator, LayeredModel, Metric, MetricKind};
use crate::rng;

/// Ratio of total quantization error to total pruning error above which a
/// run is flagged as violating the well-designed-compression assumption.
pub const DEFAULT_ASSUMPTION_RATIO: f64 = 0.5;

/// A pair of operators on a model whose preconditions have been checked:
/// exact metric, and disjoint selectivity under both orders. Pipelines are
/// run once and frozen.
#[derive(Clone, Debug)]
pub struct TheoremInstance {
    pub model: LayeredModel,
    pub metric: Metric,
    pub f1: CompressionOp,
    pub f2: CompressionOp,
    pub partition: UnitPartition,
    runs: PairRuns,
    calibration: Calibration,
}

impl TheoremInstance {
    pub fn new(model: LayeredModel, metric: Metric, f1: CompressionOp, f2: CompressionOp) -> Result<Self> {
        if metric.kind != MetricKind::SyntheticExact {
            return Err(invalid("theorem instances need the SyntheticExact metric"));
        }
        let calibration = Calibration::of(&model)?;
        let runs = PairRuns::new(&calibration, &model, &f1, &f2)?;
        let partition = metrics::partition_from_runs(&runs, metrics::t_lut(&f1, &f2))?;
        Ok(TheoremInstance { model, metric, f1, f2, partition, runs, calibration })
    }

    pub fn beta(&self) -> f64 {
        self.metric.beta
    }

    pub fn runs(&self) -> &PairRuns {
        &self.runs
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem1Check {
    pub description: String,
    /// Order advantage from two full evaluations.
    pub lhs: f64,
    /// `beta * (sum_{g2} g - sum_{g1} g)`.
    pub rhs: f64,
    pub residual: f64,
    pub g1: usize,
    pub g2: usize,
}

impl Theorem1Check {
    pub fn passes(&self, tol: f64) -> bool {
        self.residual < tol
    }
}

pub fn theorem1_check(inst: &TheoremInstance) -> Result<Theorem1Check> {
    let ev = Evaluator { original: &inst.model, calibration: inst.calibration.clone(), metric: inst.metric };
    let lhs = inst.runs.coa(&ev)?;
    let level = inst.partition.level.ok_or_else(|| invalid("partition without level"))?;
    let units = units_at(&inst.model, level)?;
    let e1 = metrics::standalone_unit_errors(&inst.f1, &inst.model, &inst.calibration, level)?;
    let e2 = metrics::standalone_unit_errors(&inst.f2, &inst.model, &inst.calibration, level)?;
    let index = crate::model::unit_index(&units);
    let g = |u| {
        let k = index[u];
        frob_norm_sq(&e1[k]) - frob_norm_sq(&e2[k])
    };
    let s2: f64 = inst.partition.g2.iter().map(g).sum();
    let s1: f64 = inst.partition.g1.iter().map(g).sum();
    let rhs = inst.beta() * (s2 - s1);
    Ok(Theorem1Check {
        description: format!("{} -> {} on {}", inst.f1.label(), inst.f2.label(), inst.model.meta.id),
        lhs,
        rhs,
        residual: (lhs - rhs).abs() / lhs.abs().max(1.0),
        g1: inst.partition.g1.len(),
        g2: inst.partition.g2.len(),
    })
}

/// Per-layer `||Q(W) Q(X)||^2 / ||W X||^2` on the original activations.
/// Invariant under rescaling any layer, so it survives
/// [`rescale_to_energies`].
pub fn quant_energy_ratios(m: &LayeredModel, quant: &CompressionOp) -> Result<Vec<f64>> {
    let cal = Calibration::of(m)?;
    let (q, _) = compressors::apply_with(quant, m, &cal)?;
    (0..m.num_layers())
        .map(|i| {
            let y = q.layers[i].apply(&cal.activations[i])?;
            Ok(frob_norm_sq(&y) / frob_norm_sq(&cal.outputs[i]))
        })
        .collect()
}

/// Rescales layers front to back so that `||W_i X_i||_F^2 = targets[i]`.
pub fn rescale_to_energies(m: &LayeredModel, targets: &[f64]) -> Result<LayeredModel> {
    if targets.len() != m.num_layers() || targets.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
        return Err(invalid("one positive target energy per layer is required"));
    }
    let mut out = m.clone();
    for (i, &target) in targets.iter().enumerate() {
        let x = out.forward_activations()?.swap_remove(i);
        let energy = frob_norm_sq(&out.layers[i].weight.matmul(&x)?);
        if energy == 0.0 {
            return Err(invalid(format!("layer {i} has zero output energy")));
        }
        let w = out.layers[i].weight.scale((target / energy).sqrt());
        out.set_weight(i, w)?;
    }
    Ok(out)
}

/// A model whose layer-pruning selection flips between orders.
#[derive(Clone, Debug)]
pub struct NearTie {
    pub model: LayeredModel,
    /// `(pruned first when pruning runs first, pruned instead after quantization)`.
    pub pairs: Vec<(usize, usize)>,
    pub energies: Vec<f64>,
}

/// Builds `n_pairs` near-tied layer pairs whose layer-pruning order flips
/// once `quant` has been applied.
///
/// Pair `k` gets energies around `3^k`; each pair pairs the layer whose
/// quantization inflates its output energy most with the one it deflates
/// most, and separates them by half the margin the flip allows. Remaining
/// layers sit far above every pair.
pub fn near_tie_model(base: &LayeredModel, quant: &CompressionOp, n_pairs: usize) -> Result<NearTie> {
    let l = base.num_layers();
    if n_pairs == 0 || 2 * n_pairs > l {
        return Err(invalid(format!("cannot place {n_pairs} tied pairs in {l} layers")));
    }
    let r = quant_energy_ratios(base, quant)?;
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    let mut energies = vec![0.0; l];
    let mut pairs = Vec::with_capacity(n_pairs);
    for k in 0..n_pairs {
        let (a, b) = (order[k], order[l - 1 - k]);
        let margin = r[a] / r[b] - 1.0;
        if margin <= 1e-9 {
            return Err(invalid("quantization does not separate the layer energies enough to flip a selection"));
        }
        let level = 3f64.powi(k as i32);
        energies[a] = level;
        energies[b] = level * (1.0 + 0.5 * margin);
        pairs.push((a, b));
    }
    let top = 3f64.powi(n_pairs as i32 + 2);
    let mut next = top;
    for e in energies.iter_mut().filter(|e| **e == 0.0) {
        *e = next;
        next += top;
    }
    Ok(NearTie { model: rescale_to_energies(base, &energies)?, pairs, energies })
}

/// Scales every layer's output energy so that the pruning budget sits
/// among well-separated layers: layer `i` gets `spread^rank(i)` for the
/// rank of its current energy.
pub fn separated_model(base: &LayeredModel, spread: f64) -> Result<LayeredModel> {
    if spread <= 1.0 {
        return Err(invalid("spread must exceed 1"));
    }
    let cal = Calibration::of(base)?;
    let e: Vec<f64> = cal.outputs.iter().map(frob_norm_sq).collect();
    let mut order: Vec<usize> = (0..e.len()).collect();
    order.sort_by(|&a, &b| e[a].total_cmp(&e[b]).then(a.cmp(&b)));
    let mut targets = vec![0.0; e.len()];
    for (rank, &i) in order.iter().enumerate() {
        targets[i] = spread.powi(rank as i32);
    }
    rescale_to_energies(base, &targets)
}

/// One bit-width of a monotonicity experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem2Point {
    pub bits: u8,
    pub c_q: f64,
    pub cer_p: Cer,
    pub cer_diff: f64,
    pub coa_mean: f64,
    pub coa_se: f64,
    /// Mean over trials of the number of order-dependent units.
    pub g1_mean: f64,
    /// Mean total quantization error over total pruning error.
    pub assumption_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// Ordered by increasing CER difference.
    pub points: Vec<Theorem2Point>,
    pub monotone: bool,
    /// Steps `k -> k+1` where the mean dropped by more than its tolerance.
    pub violations: Vec<usize>,
    pub assumption_violating: bool,
    pub trials: usize,
}

/// Order advantage of quantization first, `COA(Q -> P)`, averaged over
/// independent stochastic-rounding draws at each bit-width.
///
/// `quant` supplies rounding, scope and rotation; its bit-width is
/// replaced by each of `bits`. CER of the pruning operator is read from
/// the trial-averaged quantization curve at the same bit-widths.
pub fn theorem2_experiment(
    model: &LayeredModel,
    metric: &Metric,
    prune: &CompressionOp,
    quant: &CompressionOp,
    bits: &[u8],
    trials: usize,
    seed: u64,
) -> Result<Theorem2Report> {
    theorem2_experiment_with(model, metric, prune, quant, bits, trials, seed, DEFAULT_ASSUMPTION_RATIO)
}

#[allow(clippy::too_many_arguments)]
pub fn theorem2_experiment_with(
    model: &LayeredModel,
    metric: &Metric,
    prune: &CompressionOp,
    quant: &CompressionOp,
    bits: &[u8],
    trials: usize,
    seed: u64,
    assumption_ratio: f64,
) -> Result<Theorem2Report> {
    if bits.len() < 2 {
        return Err(invalid("at least two bit-widths are required"));
    }
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    if !prune.is_pruning() {
        return Err(invalid("the first operator must prune"));
    }
    let q = quant.quant_spec().ok_or_else(|| invalid("the second operator must quantize"))?;
    if q.rounding != Rounding::Stochastic {
        return Err(invalid("monotonicity is checked in expectation; use stochastic rounding"));
    }
    if metric.kind != MetricKind::SyntheticExact {
        return Err(invalid("monotonicity is checked under the SyntheticExact metric"));
    }
    let mut distinct: Vec<u8> = Vec::new();
    for &b in bits {
        if !distinct.contains(&b) {
            distinct.push(b);
        }
    }
    let ev = Evaluator::new(model, *metric)?;
    let (pruned, _) = compressors::apply_with(prune, model, &ev.calibration)?;
    let m_p = ev.score(&pruned)?;
    let prune_err = ev.calibration.total_error(&pruned)?;
    let level = metrics::t_lut(prune, quant);

    struct Trial {
        coa: f64,
        m_q: f64,
        q_err: f64,
        g1: usize,
    }
    let mut per_bits = Vec::with_capacity(distinct.len());
    for &b in &distinct {
        let results: Vec<Trial> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let qb = quant.with_bits(b).reseeded(rng::derive_seed(seed, &[u64::from(b), t as u64]));
                let runs = PairRuns::new(&ev.calibration, model, &qb, prune)?;
                let part = metrics::partition_from_runs(&runs, level)?;
                let (qm, _) = compressors::apply_with(&qb, model, &ev.calibration)?;
                Ok(Trial {
                    coa: runs.coa(&ev)?,
                    m_q: ev.score(&qm)?,
                    q_err: ev.calibration.total_error(&qm)?,
                    g1: part.order_dependent(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        per_bits.push((b, results));
    }

    let curve = QuantCurve::from_points(
        per_bits
            .iter()
            .map(|(b, ts)| (16.0 / f64::from(*b), ts.iter().map(|t| t.m_q).sum::<f64>() / trials as f64))
            .collect(),
    )?;
    let cer_p = curve.invert(m_p);
    let mut points: Vec<Theorem2Point> = per_bits
        .iter()
        .map(|(b, ts)| {
            let coas: Vec<f64> = ts.iter().map(|t| t.coa).collect();
            let (mean, se) = mean_se(&coas);
            let c_q = 16.0 / f64::from(*b);
            Theorem2Point {
                bits: *b,
                c_q,
                cer_p,
                cer_diff: cer_p.value - c_q,
                coa_mean: mean,
                coa_se: se,
                g1_mean: ts.iter().map(|t| t.g1 as f64).sum::<f64>() / trials as f64,
                assumption_ratio: ts.iter().map(|t| t.q_err).sum::<f64>() / trials as f64 / prune_err,
            }
        })
        .collect();
    points.sort_by(|a, b| a.cer_diff.total_cmp(&b.cer_diff));
    let violations = monotone_violations(&points.iter().map(|p| (p.coa_mean, p.coa_se)).collect::<Vec<_>>());
    let assumption_violating = points.iter().any(|p| p.assumption_ratio > assumption_ratio);
    Ok(Theorem2Report { monotone: violations.is_empty(), violations, points, assumption_violating, trials })
}

/// Sample mean and standard error of the mean.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Steps where a sequence of `(mean, se)` drops by more than two combined
/// standard errors.
pub fn monotone_violations(points: &[(f64, f64)]) -> Vec<usize> {
    points
        .windows(2)
        .enumerate()
        .filter(|(_, w)| {
            let tau = 2.0 * (w[0].1.powi(2) + w[1].1.powi(2)).sqrt();
            w[1].0 < w[0].0 - tau
        })
        .map(|(k, _)| k)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationCase {
    /// Order-dependent groups shrank.
    Shrink,
    /// Group sizes unchanged.
    Same,
    /// Order-dependent groups grew.
    Grow,
}

impl ViolationCase {
    pub fn number(self) -> u8 {
        match self {
            ViolationCase::Shrink => 1,
            ViolationCase::Same => 2,
            ViolationCase::Grow => 3,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationStep {
    pub p: f64,
    pub pruned_units: usize,
    pub g1: usize,
    /// `COA(Q -> P)` at this fraction.
    pub coa: f64,
    /// Transition from the previous fraction; absent for the first.
    pub case: Option<ViolationCase>,
    /// For case 1 and 2 steps: whether COA did not drop.
    pub monotone: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ViolationReport {
    pub steps: Vec<ViolationStep>,
    /// No case 1 or case 2 step decreased COA beyond the tolerance.
    pub monotone_outside_case3: bool,
    pub case3_steps: usize,
}

/// Walks pruning fractions one unit apart and classifies each step by how
/// the order-dependent groups changed.
pub fn violation_case_explorer(
    model: &LayeredModel,
    metric: &Metric,
    prune: &CompressionOp,
    fractions: &[f64],
    quant: &CompressionOp,
) -> Result<ViolationReport> {
    if !prune.is_pruning() || quant.quant_spec().is_none() {
        return Err(invalid("violation explorer needs a pruning and a quantization operator"));
    }
    let total = units_at(model, prune.granularity())?.len();
    let counts: Vec<usize> = fractions.iter().map(|&p| prune_count(p, total)).collect();
    if let Some(k) = counts.windows(2).position(|w| w[1] != w[0] + 1) {
        return Err(invalid(format!(
            "fractions {} and {} are not one unit apart ({} vs {} of {total} units)",
            fractions[k],
            fractions[k + 1],
            counts[k],
            counts[k + 1]
        )));
    }
    let ev = Evaluator::new(model, *metric)?;
    let level = metrics::t_lut(prune, quant);
    let mut steps: Vec<ViolationStep> = Vec::with_capacity(fractions.len());
    for (&p, &n) in fractions.iter().zip(&counts) {
        let op = prune.with_fraction(p);
        let runs = PairRuns::new(&ev.calibration, model, quant, &op)?;
        let part = metrics::partition_from_runs(&runs, level)?;
        let coa = runs.coa(&ev)?;
        let g1 = part.order_dependent();
        let (case, monotone) = match steps.last() {
            None => (None, None),
            Some(prev) => {
                let case = match g1.cmp(&prev.g1) {
                    std::cmp::Ordering::Less => ViolationCase::Shrink,
                    std::cmp::Ordering::Equal => ViolationCase::Same,
                    std::cmp::Ordering::Greater => ViolationCase::Grow,
                };
                let tol = 1e-9 * prev.coa.abs().max(1.0);
                let mono = (case != ViolationCase::Grow).then_some(coa >= prev.coa - tol);
                (Some(case), mono)
            }
        };
        steps.push(ViolationStep { p, pruned_units: n, g1, coa, case, monotone });
    }
    Ok(ViolationReport {
        monotone_outside_case3: steps.iter().all(|s| s.monotone != Some(false)),
        case3_steps: steps.iter().filter(|s| s.case == Some(ViolationCase::Grow)).count(),
        steps,
    })
}

/// Copy of `m` with the layer weights of `layers` multiplied by `factor`.
pub fn perturb_layers(m: &LayeredModel, layers: &[usize], factor: f64) -> Result<LayeredModel> {
    let mut out = m.clone();
    for &i in layers {
        let w: Matrix = out.layers[i].weight.scale(factor);
        out.set_weight(i, w)?;
    }
    Ok(out)
}
