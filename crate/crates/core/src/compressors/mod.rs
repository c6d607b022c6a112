//! Compression operators: pruning at three granularities, uniform
//! quantization (optionally Hadamard-rotated), and weight tying.
//!
//! Every operator is a pure function from a model to a new model plus an
//! [`ApplicationMask`] recording which units it modified. Pruning selects
//! greedily by the smallest per-unit output error on the *current* model,
//! ties broken by the lower unit index. Quantization with stochastic
//! rounding draws from streams keyed by `(seed, layer, row)`, so a unit's
//! quantized value depends only on its own content and the seed, never on
//! the order in which other operators ran.

pub mod grid;
pub mod rotation;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{frob_norm_sq, Matrix};
use crate::model::{units_at, AbstractType, ActQuant, Calibration, LayeredModel, Unit};
use crate::rng;

pub use grid::{Rounding, B_ORIG};

const ACT_STREAM: u64 = 0xac7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Family {
    PruneUnstructured,
    PruneRow,
    PruneLayer,
    QuantUniform,
    Share,
}

impl Family {
    pub fn is_pruning(self) -> bool {
        matches!(self, Family::PruneUnstructured | Family::PruneRow | Family::PruneLayer)
    }
}

/// How pruning ranks candidate units.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScoring {
    /// `||W_u X_u||_F^2` of the current model on the calibration batch.
    #[default]
    OutputError,
    /// `||W_u||_F^2`.
    Magnitude,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleScope {
    PerRow,
    #[default]
    PerTensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSpec {
    /// Fraction `p` of units (at the operator's granularity) to remove.
    pub fraction: f64,
    #[serde(default)]
    pub scoring: PruneScoring,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default)]
    pub scope: ScaleScope,
    #[serde(default)]
    pub rotate: bool,
    /// Restricts the operator to these layers (mixed precision); all
    /// layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShareSpec {
    /// Number of consecutive layers tied together.
    pub group: usize,
}

/// One compression method `f(.; C)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family")]
pub enum CompressionOp {
    PruneUnstructured(PruneSpec),
    PruneRow(PruneSpec),
    PruneLayer(PruneSpec),
    QuantUniform(QuantSpec),
    Share(ShareSpec),
}

impl CompressionOp {
    pub fn prune_unstructured(fraction: f64) -> Self {
        CompressionOp::PruneUnstructured(PruneSpec { fraction, scoring: PruneScoring::OutputError })
    }

    pub fn prune_row(fraction: f64) -> Self {
        CompressionOp::PruneRow(PruneSpec { fraction, scoring: PruneScoring::OutputError })
    }

    pub fn prune_layer(fraction: f64) -> Self {
        CompressionOp::PruneLayer(PruneSpec { fraction, scoring: PruneScoring::OutputError })
    }

    /// Per-tensor, nearest-rounding quantization to `bits`.
    pub fn quant(bits: u8) -> Self {
        CompressionOp::QuantUniform(QuantSpec {
            bits,
            rounding: Rounding::Nearest,
            scope: ScaleScope::PerTensor,
            rotate: false,
            layers: None,
            seed: 0,
        })
    }

    pub fn share(group: usize) -> Self {
        CompressionOp::Share(ShareSpec { group })
    }

    pub fn per_row(mut self) -> Self {
        if let CompressionOp::QuantUniform(q) = &mut self {
            q.scope = ScaleScope::PerRow;
        }
        self
    }

    pub fn stochastic(mut self, seed: u64) -> Self {
        if let CompressionOp::QuantUniform(q) = &mut self {
            q.rounding = Rounding::Stochastic;
            q.seed = seed;
        }
        self
    }

    pub fn rotated(mut self) -> Self {
        if let CompressionOp::QuantUniform(q) = &mut self {
            q.rotate = true;
        }
        self
    }

    pub fn on_layers(mut self, layers: Vec<usize>) -> Self {
        if let CompressionOp::QuantUniform(q) = &mut self {
            q.layers = Some(layers);
        }
        self
    }

    pub fn with_scoring(mut self, scoring: PruneScoring) -> Self {
        if let Some(p) = self.prune_spec_mut() {
            p.scoring = scoring;
        }
        self
    }

    /// Same operator with a different rounding seed (no-op for other families).
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut op = self.clone();
        if let CompressionOp::QuantUniform(q) = &mut op {
            q.seed = seed;
        }
        op
    }

    /// Same pruning operator at a different fraction.
    pub fn with_fraction(&self, fraction: f64) -> Self {
        let mut op = self.clone();
        if let Some(p) = op.prune_spec_mut() {
            p.fraction = fraction;
        }
        op
    }

    /// Same quantization operator at a different bit-width.
    pub fn with_bits(&self, bits: u8) -> Self {
        let mut op = self.clone();
        if let CompressionOp::QuantUniform(q) = &mut op {
            q.bits = bits;
        }
        op
    }

    pub fn family(&self) -> Family {
        match self {
            CompressionOp::PruneUnstructured(_) => Family::PruneUnstructured,
            CompressionOp::PruneRow(_) => Family::PruneRow,
            CompressionOp::PruneLayer(_) => Family::PruneLayer,
            CompressionOp::QuantUniform(_) => Family::QuantUniform,
            CompressionOp::Share(_) => Family::Share,
        }
    }

    pub fn is_pruning(&self) -> bool {
        self.family().is_pruning()
    }

    pub fn prune_spec(&self) -> Option<&PruneSpec> {
        match self {
            CompressionOp::PruneUnstructured(p) | CompressionOp::PruneRow(p) | CompressionOp::PruneLayer(p) => Some(p),
            _ => None,
        }
    }

    fn prune_spec_mut(&mut self) -> Option<&mut PruneSpec> {
        match self {
            CompressionOp::PruneUnstructured(p) | CompressionOp::PruneRow(p) | CompressionOp::PruneLayer(p) => Some(p),
            _ => None,
        }
    }

    pub fn quant_spec(&self) -> Option<&QuantSpec> {
        match self {
            CompressionOp::QuantUniform(q) => Some(q),
            _ => None,
        }
    }

    /// Nominal compression ratio `C`.
    pub fn ratio(&self) -> f64 {
        match self {
            CompressionOp::PruneUnstructured(p) | CompressionOp::PruneRow(p) | CompressionOp::PruneLayer(p) => {
                1.0 / (1.0 - p.fraction)
            }
            CompressionOp::QuantUniform(q) => f64::from(B_ORIG) / f64::from(q.bits),
            CompressionOp::Share(s) => s.group as f64,
        }
    }

    /// Atomic unit the operator acts on.
    pub fn granularity(&self) -> AbstractType {
        match self {
            CompressionOp::PruneUnstructured(_) => AbstractType::Element,
            CompressionOp::PruneRow(_) => AbstractType::Row,
            CompressionOp::PruneLayer(_) | CompressionOp::Share(_) => AbstractType::Layer,
            CompressionOp::QuantUniform(q) => match q.scope {
                ScaleScope::PerRow => AbstractType::Row,
                ScaleScope::PerTensor => AbstractType::Layer,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CompressionOp::PruneUnstructured(p) | CompressionOp::PruneRow(p) | CompressionOp::PruneLayer(p) => {
                if !(p.fraction > 0.0 && p.fraction < 1.0) {
                    return Err(Error::InvalidOp(format!("pruning fraction must lie in (0, 1), got {}", p.fraction)));
                }
            }
            CompressionOp::QuantUniform(q) => {
                if !(grid::MIN_BITS..=B_ORIG).contains(&q.bits) {
                    return Err(Error::InvalidOp(format!("bit-width must lie in [2, 16], got {}", q.bits)));
                }
            }
            CompressionOp::Share(s) => {
                if s.group < 2 {
                    return Err(Error::InvalidOp(format!("share group must be >= 2, got {}", s.group)));
                }
            }
        }
        Ok(())
    }

    /// Short human-readable tag, e.g. `P_layer(p=0.25)` or `Q(B=4,row)`.
    pub fn label(&self) -> String {
        match self {
            CompressionOp::PruneUnstructured(p) => format!("P_elem(p={})", p.fraction),
            CompressionOp::PruneRow(p) => format!("P_row(p={})", p.fraction),
            CompressionOp::PruneLayer(p) => format!("P_layer(p={})", p.fraction),
            CompressionOp::QuantUniform(q) => {
                let scope = match q.scope {
                    ScaleScope::PerRow => "row",
                    ScaleScope::PerTensor => "tensor",
                };
                let mut s = format!("Q(B={},{scope}", q.bits);
                if q.rounding == Rounding::Stochastic {
                    s.push_str(",sr");
                }
                if q.rotate {
                    s.push_str(",rot");
                }
                if let Some(ls) = &q.layers {
                    s.push_str(&format!(",L{ls:?}"));
                }
                s.push(')');
                s
            }
            CompressionOp::Share(s) => format!("S(k={})", s.group),
        }
    }
}

/// Per-unit indicator of which units an operator modified.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApplicationMask {
    pub family: Family,
    pub level: AbstractType,
    pub units: Vec<Unit>,
    pub applied: Vec<bool>,
}

impl ApplicationMask {
    pub fn count(&self) -> usize {
        self.applied.iter().filter(|&&a| a).count()
    }

    pub fn applied_units(&self) -> impl Iterator<Item = &Unit> {
        self.units.iter().zip(&self.applied).filter(|(_, &a)| a).map(|(u, _)| u)
    }

    pub fn is_applied(&self, unit: &Unit) -> Option<bool> {
        self.units.iter().position(|u| u == unit).map(|k| self.applied[k])
    }

    /// Indicators at another level over `units_at(final_model, level)`.
    ///
    /// A unit counts as modified iff any overlapping unit of this mask was
    /// modified. Non-pruning operators are absorbed by pruning: their
    /// indicator is cleared on units that are fully pruned in
    /// `final_model`.
    pub fn lift(&self, level: AbstractType, final_model: &LayeredModel) -> Result<Vec<bool>> {
        let target = units_at(final_model, level)?;
        let mut out = if self.level <= level {
            let hit: HashSet<Unit> = self.applied_units().map(|u| u.coarsen(level)).collect();
            target.iter().map(|u| hit.contains(u)).collect::<Vec<_>>()
        } else {
            let hit: HashSet<Unit> = self.applied_units().copied().collect();
            target.iter().map(|u| hit.contains(&u.coarsen(self.level))).collect()
        };
        if !self.family.is_pruning() {
            for (flag, u) in out.iter_mut().zip(&target) {
                if *flag && final_model.layers[u.layer].unit_fully_pruned(u) {
                    *flag = false;
                }
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Applies `op` to `m`; `original` supplies the calibration activations
/// that pruning scores are computed on.
pub fn apply(op: &CompressionOp, m: &LayeredModel, original: &LayeredModel) -> Result<(LayeredModel, ApplicationMask)> {
    m.check_compatible(original)?;
    let cal = Calibration::of(original)?;
    apply_with(op, m, &cal)
}

/// [`apply`] with precomputed calibration.
pub fn apply_with(op: &CompressionOp, m: &LayeredModel, cal: &Calibration) -> Result<(LayeredModel, ApplicationMask)> {
    op.validate()?;
    match op {
        CompressionOp::PruneUnstructured(p) => prune(p, AbstractType::Element, Family::PruneUnstructured, m, cal),
        CompressionOp::PruneRow(p) => prune(p, AbstractType::Row, Family::PruneRow, m, cal),
        CompressionOp::PruneLayer(p) => prune(p, AbstractType::Layer, Family::PruneLayer, m, cal),
        CompressionOp::QuantUniform(q) => quantize(q, op.granularity(), m),
        CompressionOp::Share(s) => share(s, m),
    }
}

/// Number of units a pruning fraction selects out of `total`.
pub fn prune_count(fraction: f64, total: usize) -> usize {
    (fraction * total as f64).round() as usize
}

/// Selection scores of the units `op` could still prune in `m`, in unit
/// order. Fully pruned units are omitted.
pub fn pruning_scores(op: &CompressionOp, m: &LayeredModel, cal: &Calibration) -> Result<Vec<(Unit, f64)>> {
    let spec = op.prune_spec().ok_or_else(|| invalid(format!("{} does not prune", op.label())))?;
    let level = op.granularity();
    let cand: Vec<Unit> =
        units_at(m, level)?.into_iter().filter(|u| !m.layers[u.layer].unit_fully_pruned(u)).collect();
    let scores = unit_scores(spec, level, m, cal, &cand)?;
    Ok(cand.into_iter().zip(scores).collect())
}

fn unit_scores(
    spec: &PruneSpec,
    level: AbstractType,
    m: &LayeredModel,
    cal: &Calibration,
    candidates: &[Unit],
) -> Result<Vec<f64>> {
    // per-layer transformed inputs, computed lazily
    let mut inputs: Vec<Option<Matrix>> = vec![None; m.num_layers()];
    let mut col_energy: Vec<Option<Vec<f64>>> = vec![None; m.num_layers()];
    let mut scores = Vec::with_capacity(candidates.len());
    for u in candidates {
        let layer = &m.layers[u.layer];
        let w = &layer.weight;
        let score = match spec.scoring {
            PruneScoring::Magnitude => u.entries(w.shape()).map(|k| w.data()[k].powi(2)).sum(),
            PruneScoring::OutputError => {
                if inputs[u.layer].is_none() {
                    inputs[u.layer] = Some(layer.transform_input(&cal.activations[u.layer])?);
                }
                let xt = inputs[u.layer].as_ref().expect("filled above");
                match level {
                    AbstractType::Layer => frob_norm_sq(&w.matmul(xt)?),
                    AbstractType::Row => {
                        let r = u.row.expect("row unit");
                        frob_norm_sq(&w.row_matrix(r).matmul(xt)?)
                    }
                    AbstractType::Element => {
                        if col_energy[u.layer].is_none() {
                            col_energy[u.layer] =
                                Some((0..xt.rows()).map(|c| xt.row(c).iter().map(|v| v * v).sum()).collect());
                        }
                        let (r, c) = (u.row.expect("row"), u.element.expect("element"));
                        w.get(r, c).powi(2) * col_energy[u.layer].as_ref().expect("filled above")[c]
                    }
                    AbstractType::Model => unreachable!("pruning never runs at Model level"),
                }
            }
        };
        scores.push(score);
    }
    Ok(scores)
}

fn prune(
    spec: &PruneSpec,
    level: AbstractType,
    family: Family,
    m: &LayeredModel,
    cal: &Calibration,
) -> Result<(LayeredModel, ApplicationMask)> {
    let units = units_at(m, level)?;
    let total = units.len();
    let k = prune_count(spec.fraction, total);
    if k == 0 {
        return Err(Error::InvalidOp(format!(
            "pruning fraction {} selects no unit out of {total}",
            spec.fraction
        )));
    }
    if k >= total {
        return Err(Error::InvalidOp(format!(
            "pruning fraction {} selects all {total} units",
            spec.fraction
        )));
    }
    let candidates: Vec<usize> = (0..total).filter(|&j| !m.layers[units[j].layer].unit_fully_pruned(&units[j])).collect();
    if k > candidates.len() {
        return Err(Error::InvalidOp(format!(
            "pruning needs {k} units but only {} survive",
            candidates.len()
        )));
    }
    let cand_units: Vec<Unit> = candidates.iter().map(|&j| units[j]).collect();
    let scores = unit_scores(spec, level, m, cal, &cand_units)?;
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    // stable: equal scores keep the lower unit index first
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut out = m.clone();
    let mut applied = vec![false; total];
    for &o in order.iter().take(k) {
        let j = candidates[o];
        applied[j] = true;
        let u = units[j];
        let layer = &mut out.layers[u.layer];
        let shape = layer.weight.shape();
        for e in u.entries(shape) {
            layer.weight.data_mut()[e] = 0.0;
            layer.pruned[e] = true;
        }
    }
    Ok((out, ApplicationMask { family, level, units, applied }))
}

fn quantize(spec: &QuantSpec, level: AbstractType, m: &LayeredModel) -> Result<(LayeredModel, ApplicationMask)> {
    let scope: Vec<usize> = match &spec.layers {
        Some(ls) => {
            if let Some(bad) = ls.iter().find(|&&i| i >= m.num_layers()) {
                return Err(Error::InvalidOp(format!("layer {bad} out of range")));
            }
            ls.clone()
        }
        None => (0..m.num_layers()).collect(),
    };
    let mut out = m.clone();
    for &i in &scope {
        let layer = &mut out.layers[i];
        if layer.is_fully_pruned() {
            continue;
        }
        if spec.rotate && !layer.rotated {
            layer.weight = rotation::rotate_weight(&layer.weight)?;
            layer.pruned.iter_mut().for_each(|p| *p = false);
            layer.rotated = true;
        }
        if spec.bits >= B_ORIG {
            continue;
        }
        let (rows, _) = layer.weight.shape();
        let tensor_max = layer.weight.max_abs();
        for r in 0..rows {
            let row = layer.weight.row_mut(r);
            let max_abs = match spec.scope {
                ScaleScope::PerRow => row.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
                ScaleScope::PerTensor => tensor_max,
            };
            let s = grid::spacing(max_abs, spec.bits);
            let mut stream = rng::stream_for(spec.seed, &[i as u64, r as u64]);
            grid::quantize_with_spacing(row, s, spec.bits, spec.rounding, &mut stream);
        }
        layer.weight_bits = spec.bits;
        layer.act_quant.push(ActQuant {
            bits: spec.bits,
            rounding: spec.rounding,
            seed: rng::derive_seed(spec.seed, &[i as u64, ACT_STREAM]),
        });
    }
    let units = units_at(m, level)?;
    let in_scope: HashSet<usize> = scope.into_iter().collect();
    let applied = units
        .iter()
        .map(|u| in_scope.contains(&u.layer) && !m.layers[u.layer].unit_fully_pruned(u))
        .collect();
    Ok((out, ApplicationMask { family: Family::QuantUniform, level, units, applied }))
}

fn share(spec: &ShareSpec, m: &LayeredModel) -> Result<(LayeredModel, ApplicationMask)> {
    let n = m.num_layers();
    if spec.group > n {
        return Err(Error::InvalidOp(format!("share group {} exceeds {n} layers", spec.group)));
    }
    let mut out = m.clone();
    let units = units_at(m, AbstractType::Layer)?;
    let mut applied = vec![false; n];
    for (g, start) in (0..n - n % spec.group).step_by(spec.group).enumerate() {
        let members: Vec<usize> = (start..start + spec.group).collect();
        let first = &m.layers[start];
        for &i in &members[1..] {
            let l = &m.layers[i];
            if l.weight.shape() != first.weight.shape() || l.rotated != first.rotated {
                return Err(Error::InvalidOp(format!(
                    "cannot tie layer {i} {:?} with layer {start} {:?}",
                    l.weight.shape(),
                    first.weight.shape()
                )));
            }
        }
        let mut mean = Matrix::zeros(first.weight.rows(), first.weight.cols());
        for &i in &members {
            mean = mean.add(&m.layers[i].weight)?;
        }
        let mean = mean.scale(1.0 / spec.group as f64);
        let pruned: Vec<bool> = (0..first.pruned.len()).map(|e| members.iter().all(|&i| m.layers[i].pruned[e])).collect();
        let bits = members.iter().map(|&i| m.layers[i].weight_bits).max().unwrap_or(B_ORIG);
        for &i in &members {
            let l = &mut out.layers[i];
            l.weight = mean.clone();
            l.pruned = pruned.clone();
            l.weight_bits = bits;
            l.shared_group = Some(g);
            applied[i] = true;
        }
    }
    Ok((out, ApplicationMask { family: Family::Share, level: AbstractType::Layer, units, applied }))
}

/// Result of applying a sequence of operators.
#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub ops: Vec<CompressionOp>,
    pub model: LayeredModel,
    /// One mask per operator, in application order.
    pub masks: Vec<ApplicationMask>,
}

/// Applies `ops` left to right starting from the original model.
pub fn run_pipeline(original: &LayeredModel, cal: &Calibration, ops: &[CompressionOp]) -> Result<PipelineRun> {
    let mut model = original.clone();
    let mut masks = Vec::with_capacity(ops.len());
    for op in ops {
        let (next, mask) = apply_with(op, &model, cal)?;
        model = next;
        masks.push(mask);
    }
    Ok(PipelineRun { ops: ops.to_vec(), model, masks })
}

/// Every layer rotated by the Hadamard pair, no quantization.
pub fn rotate_model(m: &LayeredModel) -> Result<LayeredModel> {
    let mut out = m.clone();
    for layer in &mut out.layers {
        if !layer.rotated {
            layer.weight = rotation::rotate_weight(&layer.weight)?;
            layer.rotated = true;
            if !layer.is_fully_pruned() {
                layer.pruned.iter_mut().for_each(|p| *p = false);
            }
        }
    }
    Ok(out)
}

/// Empirical statistics of `Q(W)Q(X) - WX` under stochastic rounding.
#[derive(Clone, Debug, Serialize)]
pub struct QuantErrorStats {
    /// Per-layer entrywise mean error.
    pub means: Vec<Matrix>,
    /// Per-layer entrywise sample variance.
    pub variances: Vec<Matrix>,
    /// Sample variance pooled over every entry of every layer.
    pub pooled_variance: f64,
    pub trials: usize,
}

pub fn quant_error_stats(op: &CompressionOp, m: &LayeredModel, trials: usize, seed: u64) -> Result<QuantErrorStats> {
    let q = op.quant_spec().ok_or_else(|| invalid("quant_error_stats needs a QuantUniform operator"))?;
    if q.rounding != Rounding::Stochastic {
        return Err(invalid("error statistics need stochastic rounding"));
    }
    if trials == 0 {
        return Err(invalid("trials must be >= 1"));
    }
    let cal = Calibration::of(m)?;
    let mut sums: Vec<Matrix> = cal.outputs.iter().map(|o| Matrix::zeros(o.rows(), o.cols())).collect();
    let mut sq = sums.clone();
    for t in 0..trials {
        let trial_op = op.reseeded(rng::derive_seed(seed, &[t as u64]));
        let (qm, _) = apply_with(&trial_op, m, &cal)?;
        for (i, e) in cal.layer_errors(&qm)?.into_iter().enumerate() {
            for ((s, s2), v) in sums[i].data_mut().iter_mut().zip(sq[i].data_mut()).zip(e.data()) {
                *s += v;
                *s2 += v * v;
            }
        }
    }
    let n = trials as f64;
    let mut means = Vec::new();
    let mut variances = Vec::new();
    let (mut pooled, mut count) = (0.0, 0usize);
    for (s, s2) in sums.iter().zip(&sq) {
        let mean = s.scale(1.0 / n);
        let var = Matrix::from_fn(s.rows(), s.cols(), |r, c| {
            if trials < 2 {
                0.0
            } else {
                let mu = mean.get(r, c);
                ((s2.get(r, c) - n * mu * mu) / (n - 1.0)).max(0.0)
            }
        });
        pooled += var.data().iter().sum::<f64>();
        count += var.data().len();
        means.push(mean);
        variances.push(var);
    }
    Ok(QuantErrorStats { means, variances, pooled_variance: pooled / count as f64, trials })
}

/// Two error components of pruning a rotated model.
#[derive(Clone, Debug, Serialize)]
pub struct RotationPruningError {
    /// Extra error from pruning the rotated weights at the positions chosen
    /// on the unrotated model.
    pub matrix_wise: f64,
    /// Further error from re-running selection on the rotated weights.
    pub element_wise: f64,
    /// Whether re-running selection on the rotated weights changed it.
    pub selection_changed: bool,
}

/// Builds the unrotated-pruned, rotated-with-same-selection and
/// rotated-with-reselection variants and differences their layer errors.
pub fn rotation_pruning_error(m: &LayeredModel, prune_op: &CompressionOp) -> Result<RotationPruningError> {
    if !prune_op.is_pruning() {
        return Err(invalid("rotation_pruning_error needs a pruning operator"));
    }
    let cal = Calibration::of(m)?;
    let (plain, plain_mask) = apply_with(prune_op, m, &cal)?;
    let rotated = rotate_model(m)?;

    let mut same_sel = rotated.clone();
    for u in plain_mask.applied_units() {
        let layer = &mut same_sel.layers[u.layer];
        let shape = layer.weight.shape();
        for e in u.entries(shape) {
            layer.weight.data_mut()[e] = 0.0;
            layer.pruned[e] = true;
        }
    }
    let (reselected, re_mask) = apply_with(prune_op, &rotated, &cal)?;

    let ea = cal.layer_errors(&plain)?;
    let eb = cal.layer_errors(&same_sel)?;
    let ec = cal.layer_errors(&reselected)?;
    let mut matrix_wise = 0.0;
    let mut element_wise = 0.0;
    for i in 0..ea.len() {
        matrix_wise += frob_norm_sq(&eb[i].sub(&ea[i])?);
        element_wise += frob_norm_sq(&ec[i].sub(&eb[i])?);
    }
    Ok(RotationPruningError { matrix_wise, element_wise, selection_changed: re_mask.applied != plain_mask.applied })
}
