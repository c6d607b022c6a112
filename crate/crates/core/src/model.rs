//! Layered models, the granularity chain, unit enumeration and the
//! performance metric.
//!
//! A [`LayeredModel`] is an ordered stack of linear layers with relu in
//! between, plus a calibration batch. Compression operators never mutate a
//! model in place; they return a new one that remembers what was done to
//! each layer (pruned entries, storage bit-width, activation quantization,
//! rotation, weight tying).
//!
//! Layer errors are always measured against the *original* model's
//! calibration activations `X_i`, so the total error decomposes exactly
//! into per-layer (and per-row) terms.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compressors::grid::{self, Rounding};
use crate::compressors::rotation;
use crate::error::{invalid, Error, Result};
use crate::linalg::{frob_norm_sq, matmul, Matrix};
use crate::rng;

pub const DEFAULT_CALIB_SAMPLES: usize = 32;

/// Structural granularity levels, totally ordered from finest to coarsest.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AbstractType {
    Element,
    Row,
    Layer,
    Model,
}

impl AbstractType {
    /// Least upper type on the chain: the coarser of the two.
    pub fn least_upper(self, other: AbstractType) -> AbstractType {
        self.max(other)
    }
}

/// One structural unit of a model. Indices are present exactly down to the
/// unit's level: a layer unit has neither row nor element, a row unit has a
/// row, an element unit has both (`element` is the column index).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Unit {
    pub layer: usize,
    pub row: Option<usize>,
    pub element: Option<usize>,
}

impl Unit {
    pub fn layer(layer: usize) -> Self {
        Unit { layer, row: None, element: None }
    }

    pub fn row(layer: usize, row: usize) -> Self {
        Unit { layer, row: Some(row), element: None }
    }

    pub fn element(layer: usize, row: usize, col: usize) -> Self {
        Unit { layer, row: Some(row), element: Some(col) }
    }

    pub fn level(&self) -> AbstractType {
        match (self.row, self.element) {
            (None, _) => AbstractType::Layer,
            (Some(_), None) => AbstractType::Row,
            (Some(_), Some(_)) => AbstractType::Element,
        }
    }

    /// The unit containing `self` at a coarser (or equal) level.
    pub fn coarsen(&self, level: AbstractType) -> Unit {
        match level {
            AbstractType::Element => *self,
            AbstractType::Row => Unit { layer: self.layer, row: self.row, element: None },
            AbstractType::Layer | AbstractType::Model => Unit::layer(self.layer),
        }
    }

    /// Iterator over stored-weight entry indices covered by this unit.
    pub(crate) fn entries(&self, shape: (usize, usize)) -> Box<dyn Iterator<Item = usize>> {
        let (rows, cols) = shape;
        match (self.row, self.element) {
            (None, _) => Box::new(0..rows * cols),
            (Some(r), None) => Box::new(r * cols..(r + 1) * cols),
            (Some(r), Some(c)) => Box::new(std::iter::once(r * cols + c)),
        }
    }
}

/// One activation-quantization stage applied to a layer's input at
/// evaluation time (per-tensor scale).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActQuant {
    pub bits: u8,
    pub rounding: Rounding,
    pub seed: u64,
}

/// A linear layer together with its compression state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Stored weights (`out x in`); in the rotated basis when `rotated`.
    pub weight: Matrix,
    /// Per-entry pruning flags over the stored weights.
    pub pruned: Vec<bool>,
    /// Storage bit-width; 16 is the original precision.
    pub weight_bits: u8,
    pub act_quant: Vec<ActQuant>,
    pub rotated: bool,
    pub shared_group: Option<usize>,
}

impl Layer {
    pub fn dense(weight: Matrix) -> Self {
        let n = weight.rows() * weight.cols();
        Layer {
            weight,
            pruned: vec![false; n],
            weight_bits: grid::B_ORIG,
            act_quant: Vec::new(),
            rotated: false,
            shared_group: None,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn is_fully_pruned(&self) -> bool {
        self.pruned.iter().all(|&p| p)
    }

    pub fn unit_fully_pruned(&self, unit: &Unit) -> bool {
        unit.entries(self.weight.shape()).all(|k| self.pruned[k])
    }

    /// Input transform seen by the stored weights: rotation into the
    /// layer's basis followed by any activation-quantization stages.
    pub fn transform_input(&self, x: &Matrix) -> Result<Matrix> {
        let mut xt = if self.rotated { rotation::rotate_input(x)? } else { x.clone() };
        for stage in &self.act_quant {
            grid::quantize_tensor(xt.data_mut(), stage.bits, stage.rounding, stage.seed);
        }
        Ok(xt)
    }

    /// Output of the layer (before relu) for input `x`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let xt = self.transform_input(x)?;
        self.apply_transformed(&xt)
    }

    /// Output for an input already passed through [`Layer::transform_input`].
    pub fn apply_transformed(&self, xt: &Matrix) -> Result<Matrix> {
        let y = matmul(&self.weight, xt)?;
        if self.rotated {
            rotation::unrotate_output(&y)
        } else {
            Ok(y)
        }
    }

    /// Weights in the original (unrotated) basis.
    pub fn effective_weight(&self) -> Result<Matrix> {
        if self.rotated {
            rotation::unrotate_weight(&self.weight)
        } else {
            Ok(self.weight.clone())
        }
    }
}

/// Identification carried with a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub id: String,
    pub seed: u64,
    pub dims: Vec<usize>,
}

/// Ordered stack of linear layers with relu in between, plus a calibration
/// batch (`features x samples`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayeredModel {
    pub schema: String,
    pub meta: ModelMeta,
    pub layers: Vec<Layer>,
    pub calib_input: Matrix,
    pub label_targets: Option<Vec<usize>>,
}

pub const MODEL_SCHEMA: &str = "ordlab.model/v1";

impl LayeredModel {
    /// Assembles a model from dense weights; checks the chaining invariants.
    pub fn from_weights(weights: Vec<Matrix>, calib_input: Matrix, meta: ModelMeta) -> Result<Self> {
        if weights.is_empty() {
            return Err(invalid("a model needs at least one layer"));
        }
        for (i, pair) in weights.windows(2).enumerate() {
            if pair[0].rows() != pair[1].cols() {
                return Err(invalid(format!(
                    "layer {i} output dim {} does not match layer {} input dim {}",
                    pair[0].rows(),
                    i + 1,
                    pair[1].cols()
                )));
            }
        }
        if calib_input.rows() != weights[0].cols() {
            return Err(invalid(format!(
                "calibration features {} do not match input dim {}",
                calib_input.rows(),
                weights[0].cols()
            )));
        }
        Ok(LayeredModel {
            schema: MODEL_SCHEMA.to_string(),
            meta,
            layers: weights.into_iter().map(Layer::dense).collect(),
            calib_input,
            label_targets: None,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn samples(&self) -> usize {
        self.calib_input.cols()
    }

    pub fn layer(&self, i: usize) -> &Layer {
        &self.layers[i]
    }

    pub fn weights(&self) -> impl Iterator<Item = &Matrix> {
        self.layers.iter().map(|l| &l.weight)
    }

    /// Replaces the weights of layer `i` (same shape), resetting its
    /// compression state. Used to engineer test models.
    pub fn set_weight(&mut self, i: usize, w: Matrix) -> Result<()> {
        if w.shape() != self.layers[i].weight.shape() {
            return Err(Error::Shape { op: "set_weight", left: self.layers[i].weight.shape(), right: w.shape() });
        }
        self.layers[i] = Layer::dense(w);
        Ok(())
    }

    /// Attaches labels generated by the model's own argmax on the
    /// calibration batch.
    pub fn with_self_labels(mut self) -> Result<Self> {
        let out = self.final_output()?;
        self.label_targets = Some(argmax_columns(&out));
        Ok(self)
    }

    /// Inputs seen by each layer: `X_1 = calib_input`,
    /// `X_{i+1} = relu(layer_i(X_i))`.
    pub fn forward_activations(&self) -> Result<Vec<Matrix>> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut x = self.calib_input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let next = if i + 1 < self.layers.len() { Some(layer.apply(&x)?.relu()) } else { None };
            acts.push(x);
            match next {
                Some(n) => x = n,
                None => break,
            }
        }
        Ok(acts)
    }

    /// Output of the last layer on the calibration batch (no final relu).
    pub fn final_output(&self) -> Result<Matrix> {
        let acts = self.forward_activations()?;
        let last = self.layers.len() - 1;
        self.layers[last].apply(&acts[last])
    }

    pub fn check_compatible(&self, other: &LayeredModel) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::Incompatible(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (i, (a, b)) in self.layers.iter().zip(&other.layers).enumerate() {
            if a.weight.shape() != b.weight.shape() {
                return Err(Error::Incompatible(format!(
                    "layer {i}: {:?} vs {:?}",
                    a.weight.shape(),
                    b.weight.shape()
                )));
            }
        }
        if self.calib_input != other.calib_input {
            return Err(Error::Incompatible("calibration inputs differ".into()));
        }
        Ok(())
    }

    /// Memory footprint in bits: surviving entries times storage width,
    /// counting each tied group once.
    pub fn footprint_bits(&self) -> f64 {
        let mut seen_groups = Vec::new();
        let mut total = 0.0;
        for layer in &self.layers {
            if let Some(g) = layer.shared_group {
                if seen_groups.contains(&g) {
                    continue;
                }
                seen_groups.push(g);
            }
            let alive = layer.pruned.iter().filter(|&&p| !p).count();
            total += alive as f64 * f64::from(layer.weight_bits);
        }
        total
    }

    /// Footprint of the uncompressed model.
    pub fn dense_footprint_bits(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| (l.weight.rows() * l.weight.cols()) as f64 * f64::from(grid::B_ORIG))
            .sum()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: LayeredModel = serde_json::from_str(s)?;
        if m.schema != MODEL_SCHEMA {
            return Err(invalid(format!("unknown model schema {:?}", m.schema)));
        }
        let weights: Vec<Matrix> = m.layers.iter().map(|l| l.weight.clone()).collect();
        LayeredModel::from_weights(weights, m.calib_input.clone(), m.meta.clone())?;
        for (i, l) in m.layers.iter().enumerate() {
            if l.pruned.len() != l.weight.rows() * l.weight.cols() {
                return Err(invalid(format!("layer {i} pruning mask has {} entries", l.pruned.len())));
            }
            if !(2..=grid::B_ORIG).contains(&l.weight_bits) {
                return Err(invalid(format!("layer {i} stores {} bits", l.weight_bits)));
            }
        }
        if m.label_targets.as_ref().is_some_and(|t| t.len() != m.samples()) {
            return Err(invalid("one label per calibration sample is required"));
        }
        Ok(m)
    }
}

fn argmax_columns(out: &Matrix) -> Vec<usize> {
    (0..out.cols())
        .map(|c| {
            let mut best = 0;
            for r in 1..out.rows() {
                if out.get(r, c) > out.get(best, c) {
                    best = r;
                }
            }
            best
        })
        .collect()
}

/// Builds a seeded random model. `dims = [d_0, d_1, ..., d_L]` gives `L`
/// layers with `W_i` of shape `d_{i+1} x d_{i}`.
pub fn build_synthetic_model(dims: &[usize], seed: u64) -> Result<LayeredModel> {
    build_synthetic_model_with_samples(dims, DEFAULT_CALIB_SAMPLES, seed)
}

pub fn build_synthetic_model_with_samples(dims: &[usize], samples: usize, seed: u64) -> Result<LayeredModel> {
    if dims.len() < 2 {
        return Err(invalid("layer spec needs at least an input and an output dimension"));
    }
    if dims.contains(&0) || samples == 0 {
        return Err(invalid("dimensions and sample count must be positive"));
    }
    let mut r = rng::stream_for(seed, &[0x006d_6f64_656c]);
    let weights: Vec<Matrix> = dims
        .windows(2)
        .map(|w| Matrix::gaussian(w[1], w[0], 1.0 / (w[0] as f64).sqrt(), &mut r))
        .collect();
    let calib = Matrix::gaussian(dims[0], samples, 1.0, &mut r);
    // keep the draw order stable even if more fields get sampled later
    let _: u64 = r.random();
    LayeredModel::from_weights(
        weights,
        calib,
        ModelMeta { id: format!("synthetic-{}", dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")), seed, dims: dims.to_vec() },
    )
}

/// Cached activations and outputs of the original model, the reference
/// every error is measured against.
#[derive(Clone, Debug)]
pub struct Calibration {
    pub activations: Vec<Matrix>,
    pub outputs: Vec<Matrix>,
}

impl Calibration {
    pub fn of(original: &LayeredModel) -> Result<Self> {
        let activations = original.forward_activations()?;
        let outputs = original
            .layers
            .iter()
            .zip(&activations)
            .map(|(l, x)| l.apply(x))
            .collect::<Result<Vec<_>>>()?;
        Ok(Calibration { activations, outputs })
    }

    /// `f(W_i) f(X_i) - W_i X_i` for layer `i` of `compressed`.
    pub fn layer_error(&self, compressed: &LayeredModel, i: usize) -> Result<Matrix> {
        let y = compressed.layers[i].apply(&self.activations[i])?;
        y.sub(&self.outputs[i])
    }

    pub fn layer_errors(&self, compressed: &LayeredModel) -> Result<Vec<Matrix>> {
        (0..compressed.num_layers()).map(|i| self.layer_error(compressed, i)).collect()
    }

    pub fn total_error(&self, compressed: &LayeredModel) -> Result<f64> {
        Ok(self.layer_errors(compressed)?.iter().map(frob_norm_sq).sum())
    }

    /// Error matrices of every unit at `level`, in `units_at` order.
    ///
    /// Row units are rows of the layer error. Element units are the
    /// per-entry contribution `w'_rc x'_c - w_rc x_c` (unrotated layers only).
    pub fn unit_errors(
        &self,
        original: &LayeredModel,
        compressed: &LayeredModel,
        level: AbstractType,
    ) -> Result<Vec<(Unit, Matrix)>> {
        let mut out = Vec::new();
        for i in 0..compressed.num_layers() {
            match level {
                AbstractType::Layer => out.push((Unit::layer(i), self.layer_error(compressed, i)?)),
                AbstractType::Row => {
                    let e = self.layer_error(compressed, i)?;
                    for r in 0..e.rows() {
                        out.push((Unit::row(i, r), e.row_matrix(r)));
                    }
                }
                AbstractType::Element => {
                    let (lc, lo) = (&compressed.layers[i], &original.layers[i]);
                    if lc.rotated || lo.rotated {
                        return Err(invalid("element-level errors are undefined for rotated layers"));
                    }
                    let x = &self.activations[i];
                    let xc = lc.transform_input(x)?;
                    let xo = lo.transform_input(x)?;
                    for r in 0..lc.out_dim() {
                        for c in 0..lc.in_dim() {
                            let (wc, wo) = (lc.weight.get(r, c), lo.weight.get(r, c));
                            let e = Matrix::from_fn(1, x.cols(), |_, s| wc * xc.get(c, s) - wo * xo.get(c, s));
                            out.push((Unit::element(i, r, c), e));
                        }
                    }
                }
                AbstractType::Model => return Err(invalid("unit errors at Model level are not defined")),
            }
        }
        Ok(out)
    }
}

/// All units of `m` at level `t`, layer-major then row then element.
pub fn units_at(m: &LayeredModel, t: AbstractType) -> Result<Vec<Unit>> {
    let mut units = Vec::new();
    for (i, layer) in m.layers.iter().enumerate() {
        match t {
            AbstractType::Layer => units.push(Unit::layer(i)),
            AbstractType::Row => units.extend((0..layer.out_dim()).map(|r| Unit::row(i, r))),
            AbstractType::Element => {
                for r in 0..layer.out_dim() {
                    units.extend((0..layer.in_dim()).map(|c| Unit::element(i, r, c)));
                }
            }
            AbstractType::Model => return Err(invalid("partitioning at whole-model level is degenerate")),
        }
    }
    Ok(units)
}

/// Positions of units in `units_at` order, for O(1) lookup.
pub(crate) fn unit_index(units: &[Unit]) -> HashMap<Unit, usize> {
    units.iter().enumerate().map(|(k, u)| (*u, k)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetricKind {
    /// `base_value - beta * total squared reconstruction error`.
    SyntheticExact,
    /// Fraction of calibration samples whose argmax matches the labels.
    TaskAccuracy,
}

/// Performance metric; higher is better.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub kind: MetricKind,
    pub beta: f64,
    pub base_value: f64,
}

impl Metric {
    pub fn synthetic(beta: f64, base_value: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be positive, got {beta}")));
        }
        Ok(Metric { kind: MetricKind::SyntheticExact, beta, base_value })
    }

    pub fn accuracy() -> Self {
        Metric { kind: MetricKind::TaskAccuracy, beta: 1.0, base_value: 1.0 }
    }
}

impl Default for Metric {
    fn default() -> Self {
        Metric { kind: MetricKind::SyntheticExact, beta: 1.0, base_value: 0.0 }
    }
}

/// Scores compressed variants of one original model.
#[derive(Clone, Debug)]
pub struct Evaluator<'a> {
    pub original: &'a LayeredModel,
    pub calibration: Calibration,
    pub metric: Metric,
}

impl<'a> Evaluator<'a> {
    pub fn new(original: &'a LayeredModel, metric: Metric) -> Result<Self> {
        if metric.kind == MetricKind::TaskAccuracy && original.label_targets.is_none() {
            return Err(invalid("TaskAccuracy needs label targets on the original model"));
        }
        Ok(Evaluator { original, calibration: Calibration::of(original)?, metric })
    }

    pub fn score(&self, compressed: &LayeredModel) -> Result<f64> {
        compressed.check_compatible(self.original)?;
        match self.metric.kind {
            MetricKind::SyntheticExact => {
                Ok(self.metric.base_value - self.metric.beta * self.calibration.total_error(compressed)?)
            }
            MetricKind::TaskAccuracy => {
                let labels = self
                    .original
                    .label_targets
                    .as_ref()
                    .ok_or_else(|| invalid("TaskAccuracy needs label targets"))?;
                let pred = argmax_columns(&compressed.final_output()?);
                let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
                Ok(hits as f64 / labels.len() as f64)
            }
        }
    }
}

/// `f(W_i) f(X_i) - W_i X_i`, activations taken from the original model.
pub fn layer_error(original: &LayeredModel, compressed: &LayeredModel, i: usize) -> Result<Matrix> {
    compressed.check_compatible(original)?;
    if i >= original.num_layers() {
        return Err(invalid(format!("layer index {i} out of range")));
    }
    Calibration::of(original)?.layer_error(compressed, i)
}

pub fn forward_activations(m: &LayeredModel) -> Result<Vec<Matrix>> {
    m.forward_activations()
}

pub fn evaluate(compressed: &LayeredModel, original: &LayeredModel, metric: &Metric) -> Result<f64> {
    Evaluator::new(original, *metric)?.score(compressed)
}
