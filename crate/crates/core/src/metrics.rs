//! Order-sensitivity quantities: performance gap, compression equivalent
//! ratio, order advantage, disjoint selectivity, the four-group unit
//! partition and interference.

use serde::{Deserialize, Serialize};

use crate::compressors::{self, ApplicationMask, CompressionOp, PipelineRun};
use crate::error::{invalid, Error, Result};
use crate::linalg::{frob_norm_sq, Matrix};
use crate::model::{units_at, AbstractType, Calibration, Evaluator, LayeredModel, Metric, Unit};

/// Bit-widths the quantization baseline curve is sampled at.
pub const CURVE_BITS: [u8; 10] = [16, 12, 10, 8, 7, 6, 5, 4, 3, 2];

/// `M(f1(m)) - M(f2(m))`.
pub fn performance_gap(m: &LayeredModel, metric: &Metric, f1: &CompressionOp, f2: &CompressionOp) -> Result<f64> {
    let ev = Evaluator::new(m, *metric)?;
    Ok(single_score(&ev, f1)? - single_score(&ev, f2)?)
}

/// Score of one operator applied to the original model.
pub fn single_score(ev: &Evaluator, op: &CompressionOp) -> Result<f64> {
    let (c, _) = compressors::apply_with(op, ev.original, &ev.calibration)?;
    ev.score(&c)
}

/// Result of inverting the baseline curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cer {
    pub value: f64,
    /// Target lay above the best curve point; value clamped to the smallest ratio.
    pub clamped: bool,
    /// Target lay below the worst curve point; value extrapolated from the last segment.
    pub extrapolated: bool,
    /// Target hit a flat segment; value is the segment midpoint.
    pub ambiguous: bool,
}

impl Cer {
    fn exact(value: f64) -> Self {
        Cer { value, clamped: false, extrapolated: false, ambiguous: false }
    }

    pub fn flagged(&self) -> bool {
        self.clamped || self.extrapolated || self.ambiguous
    }
}

/// Quantization performance as a function of compression ratio.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantCurve {
    /// Measured `(ratio, performance)` pairs, ascending in ratio.
    pub raw: Vec<(f64, f64)>,
    /// Lower monotone envelope of `raw` (running minimum), used for inversion.
    pub points: Vec<(f64, f64)>,
}

impl QuantCurve {
    pub fn from_points(mut raw: Vec<(f64, f64)>) -> Result<Self> {
        if raw.len() < 2 {
            return Err(invalid("a quantization curve needs at least two points"));
        }
        if raw.iter().any(|(c, y)| !c.is_finite() || !y.is_finite()) {
            return Err(Error::NonFinite("quantization curve"));
        }
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        if raw.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("curve ratios must be strictly increasing"));
        }
        let mut points = raw.clone();
        for k in 1..points.len() {
            points[k].1 = points[k].1.min(points[k - 1].1);
        }
        Ok(QuantCurve { raw, points })
    }

    /// Samples `template` (a quantization operator) at each of `bits`.
    pub fn build(ev: &Evaluator, template: &CompressionOp, bits: &[u8]) -> Result<Self> {
        if template.quant_spec().is_none() {
            return Err(invalid("the curve template must be a quantization operator"));
        }
        let raw = bits
            .iter()
            .map(|&b| {
                let op = template.with_bits(b);
                Ok((op.ratio(), single_score(ev, &op)?))
            })
            .collect::<Result<Vec<_>>>()?;
        QuantCurve::from_points(raw)
    }

    /// Standard curve: per-tensor nearest rounding at [`CURVE_BITS`].
    pub fn standard(ev: &Evaluator) -> Result<Self> {
        QuantCurve::build(ev, &CompressionOp::quant(16), &CURVE_BITS)
    }

    pub fn is_monotone(&self) -> bool {
        self.raw.windows(2).all(|w| w[1].1 <= w[0].1)
    }

    /// Piecewise-linear envelope performance at ratio `c` (linear
    /// extrapolation outside the sampled range).
    pub fn performance_at(&self, c: f64) -> f64 {
        let p = &self.points;
        let k = match p.iter().position(|&(x, _)| x >= c) {
            Some(0) => 0,
            Some(k) => k - 1,
            None => p.len() - 2,
        };
        let (x0, y0) = p[k];
        let (x1, y1) = p[k + 1];
        y0 + (c - x0) * (y1 - y0) / (x1 - x0)
    }

    /// Ratio at which the envelope reaches `target`.
    pub fn invert(&self, target: f64) -> Cer {
        let p = &self.points;
        if target > p[0].1 {
            return Cer { clamped: true, ..Cer::exact(p[0].0) };
        }
        let level: Vec<f64> = p.iter().filter(|&&(_, y)| y == target).map(|&(x, _)| x).collect();
        if level.len() > 1 {
            return Cer { ambiguous: true, ..Cer::exact(0.5 * (level[0] + level[level.len() - 1])) };
        }
        for w in p.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if target <= y0 && target >= y1 {
                if target == y0 {
                    return Cer::exact(x0);
                }
                if target == y1 {
                    return Cer::exact(x1);
                }
                return Cer::exact(x0 + (y0 - target) / (y0 - y1) * (x1 - x0));
            }
        }
        // below the worst point: extend the last sloped segment
        for w in p.windows(2).rev() {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if y0 != y1 {
                let (xl, yl) = *p.last().expect("non-empty");
                let slope = (y1 - y0) / (x1 - x0);
                return Cer { extrapolated: true, ..Cer::exact(xl + (target - yl) / slope) };
            }
        }
        let last = p.last().expect("non-empty").0;
        Cer { extrapolated: true, ambiguous: true, ..Cer::exact(last) }
    }
}

/// Compression equivalent ratio of `f` against `curve`.
pub fn cer(m: &LayeredModel, metric: &Metric, f: &CompressionOp, curve: &QuantCurve) -> Result<Cer> {
    let ev = Evaluator::new(m, *metric)?;
    Ok(curve.invert(single_score(&ev, f)?))
}

/// Both pipelines of an operator pair on one original model.
#[derive(Clone, Debug)]
pub struct PairRuns {
    /// `f1` then `f2`.
    pub forward: PipelineRun,
    /// `f2` then `f1`.
    pub backward: PipelineRun,
}

impl PairRuns {
    pub fn new(cal: &Calibration, original: &LayeredModel, f1: &CompressionOp, f2: &CompressionOp) -> Result<Self> {
        Ok(PairRuns {
            forward: compressors::run_pipeline(original, cal, &[f1.clone(), f2.clone()])?,
            backward: compressors::run_pipeline(original, cal, &[f2.clone(), f1.clone()])?,
        })
    }

    /// `(mask of f1, mask of f2)` in the forward pipeline.
    pub fn forward_masks(&self) -> (&ApplicationMask, &ApplicationMask) {
        (&self.forward.masks[0], &self.forward.masks[1])
    }

    /// `(mask of f1, mask of f2)` in the backward pipeline.
    pub fn backward_masks(&self) -> (&ApplicationMask, &ApplicationMask) {
        (&self.backward.masks[1], &self.backward.masks[0])
    }

    pub fn coa(&self, ev: &Evaluator) -> Result<f64> {
        Ok(ev.score(&self.forward.model)? - ev.score(&self.backward.model)?)
    }
}

/// Order advantage of running `f1` first: `M(f2(f1(m))) - M(f1(f2(m)))`.
pub fn coa(m: &LayeredModel, metric: &Metric, f1: &CompressionOp, f2: &CompressionOp) -> Result<f64> {
    let ev = Evaluator::new(m, *metric)?;
    PairRuns::new(&ev.calibration, m, f1, f2)?.coa(&ev)
}

/// Least upper granularity of an operator pair.
pub fn t_lut(f1: &CompressionOp, f2: &CompressionOp) -> AbstractType {
    f1.granularity().least_upper(f2.granularity())
}

/// Disjoint selectivity within one pipeline: at the coarser of the two mask
/// levels, every unit is modified by exactly one operator.
pub fn check_disjoint(mask_f1: &ApplicationMask, mask_f2: &ApplicationMask, final_model: &LayeredModel) -> Result<bool> {
    let level = mask_f1.level.least_upper(mask_f2.level);
    let a = mask_f1.lift(level, final_model)?;
    let b = mask_f2.lift(level, final_model)?;
    Ok(a.iter().zip(&b).all(|(&x, &y)| x != y))
}

/// Disjoint selectivity under both orders.
pub fn disjoint_both_orders(runs: &PairRuns) -> Result<bool> {
    let (a, b) = runs.forward_masks();
    let (c, d) = runs.backward_masks();
    Ok(check_disjoint(a, b, &runs.forward.model)? && check_disjoint(c, d, &runs.backward.model)?)
}

/// The four groups of units at the pair's least upper granularity.
///
/// `g1`: modified by `f1` only when `f1` runs first; `g2`: only when `f1`
/// runs second; `g3`: never; `g4`: in both orders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UnitPartition {
    pub level: Option<AbstractType>,
    pub g1: Vec<Unit>,
    pub g2: Vec<Unit>,
    pub g3: Vec<Unit>,
    pub g4: Vec<Unit>,
}

impl UnitPartition {
    pub fn sizes(&self) -> [usize; 4] {
        [self.g1.len(), self.g2.len(), self.g3.len(), self.g4.len()]
    }

    pub fn order_dependent(&self) -> usize {
        self.g1.len()
    }
}

pub fn partition_from_runs(runs: &PairRuns, level: AbstractType) -> Result<UnitPartition> {
    if !disjoint_both_orders(runs)? {
        return Err(Error::NotDisjoint);
    }
    let fwd = runs.forward_masks().0.lift(level, &runs.forward.model)?;
    let bwd = runs.backward_masks().0.lift(level, &runs.backward.model)?;
    let units = units_at(&runs.forward.model, level)?;
    let mut part = UnitPartition { level: Some(level), ..Default::default() };
    for ((u, &a), &b) in units.into_iter().zip(&fwd).zip(&bwd) {
        match (a, b) {
            (true, false) => part.g1.push(u),
            (false, true) => part.g2.push(u),
            (false, false) => part.g3.push(u),
            (true, true) => part.g4.push(u),
        }
    }
    Ok(part)
}

pub fn partition_units(m: &LayeredModel, f1: &CompressionOp, f2: &CompressionOp) -> Result<UnitPartition> {
    let cal = Calibration::of(m)?;
    partition_from_runs(&PairRuns::new(&cal, m, f1, f2)?, t_lut(f1, f2))
}

/// Error each unit of `original` takes when `op` alone acts on it.
///
/// Pruning errors are `-W_u X_u` for every unit whether or not the
/// operator's budget would select it; other operators are applied once and
/// their per-unit errors read off.
pub fn standalone_unit_errors(
    op: &CompressionOp,
    original: &LayeredModel,
    cal: &Calibration,
    level: AbstractType,
) -> Result<Vec<Matrix>> {
    if op.is_pruning() {
        let mut zeroed = original.clone();
        for layer in &mut zeroed.layers {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
            layer.pruned.iter_mut().for_each(|p| *p = true);
        }
        return Ok(cal.unit_errors(original, &zeroed, level)?.into_iter().map(|(_, e)| e).collect());
    }
    let (c, _) = compressors::apply_with(op, original, cal)?;
    Ok(cal.unit_errors(original, &c, level)?.into_iter().map(|(_, e)| e).collect())
}

/// Extra error the second operator incurs because the first ran before it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Interference {
    /// `sum_u ||eps_{f2.f1}(u) - eps_{f2}(u)||_F^2` over units `f2` modified.
    pub sum_of_norms: f64,
    /// `||sum_u (eps_{f2.f1}(u) - eps_{f2}(u))||_F^2` when all unit errors share a shape.
    pub norm_of_sum: Option<f64>,
    pub units: usize,
}

/// Interference of `f1 -> f2` from an existing `f1`-then-`f2` pipeline.
pub fn interference_from_run(
    original: &LayeredModel,
    cal: &Calibration,
    run: &PipelineRun,
    f2: &CompressionOp,
) -> Result<Interference> {
    let mask = run.masks.last().ok_or_else(|| invalid("empty pipeline"))?;
    let level = mask.level;
    let piped = cal.unit_errors(original, &run.model, level)?;
    let alone = standalone_unit_errors(f2, original, cal, level)?;
    let mut out = Interference::default();
    let mut acc: Option<Matrix> = None;
    let mut same_shape = true;
    for (k, &applied) in mask.applied.iter().enumerate() {
        if !applied {
            continue;
        }
        let d = piped[k].1.sub(&alone[k])?;
        out.sum_of_norms += frob_norm_sq(&d);
        out.units += 1;
        acc = match acc {
            None => Some(d),
            Some(a) if a.shape() == d.shape() => Some(a.add(&d)?),
            Some(a) => {
                same_shape = false;
                Some(a)
            }
        };
    }
    out.norm_of_sum = match (same_shape, acc) {
        (true, Some(a)) => Some(frob_norm_sq(&a)),
        (true, None) => Some(0.0),
        _ => None,
    };
    Ok(out)
}

/// Interference of running `f1` before `f2`.
pub fn interference(m: &LayeredModel, f1: &CompressionOp, f2: &CompressionOp) -> Result<Interference> {
    let cal = Calibration::of(m)?;
    let run = compressors::run_pipeline(m, &cal, &[f1.clone(), f2.clone()])?;
    interference_from_run(m, &cal, &run, f2)
}

/// Every scalar of one pairwise comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OrderReport {
    pub f1: CompressionOp,
    pub f2: CompressionOp,
    pub ratio_f1: f64,
    pub ratio_f2: f64,
    /// `M(f1(m))` and `M(f2(m))`.
    pub m_f1: f64,
    pub m_f2: f64,
    /// `M(f2(f1(m)))`: `f1` applied first.
    pub m_f1_first: f64,
    /// `M(f1(f2(m)))`: `f2` applied first.
    pub m_f2_first: f64,
    pub pg: f64,
    pub coa: f64,
    pub cer_f1: Option<Cer>,
    pub cer_f2: Option<Cer>,
    pub interference_forward: Interference,
    pub interference_backward: Interference,
    pub disjoint: bool,
    pub partition: Option<UnitPartition>,
}

impl OrderReport {
    pub fn compute(ev: &Evaluator, f1: &CompressionOp, f2: &CompressionOp, curve: Option<&QuantCurve>) -> Result<Self> {
        let m = ev.original;
        let cal = &ev.calibration;
        let runs = PairRuns::new(cal, m, f1, f2)?;
        let m_f1 = single_score(ev, f1)?;
        let m_f2 = single_score(ev, f2)?;
        let m_f1_first = ev.score(&runs.forward.model)?;
        let m_f2_first = ev.score(&runs.backward.model)?;
        let disjoint = disjoint_both_orders(&runs)?;
        let partition = if disjoint { Some(partition_from_runs(&runs, t_lut(f1, f2))?) } else { None };
        Ok(OrderReport {
            f1: f1.clone(),
            f2: f2.clone(),
            ratio_f1: f1.ratio(),
            ratio_f2: f2.ratio(),
            m_f1,
            m_f2,
            m_f1_first,
            m_f2_first,
            pg: m_f1 - m_f2,
            coa: m_f1_first - m_f2_first,
            cer_f1: curve.map(|c| c.invert(m_f1)),
            cer_f2: curve.map(|c| c.invert(m_f2)),
            interference_forward: interference_from_run(m, cal, &runs.forward, f2)?,
            interference_backward: interference_from_run(m, cal, &runs.backward, f1)?,
            disjoint,
            partition,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests;
