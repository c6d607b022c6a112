//! Experiment configuration: JSON ingestion, validation with line-anchored
//! messages, and the published schema.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::compressors::{CompressionOp, Family, PruneScoring, Rounding, ScaleScope};
use crate::error::{Error, Result};
use crate::model::Metric;

pub const CONFIG_SCHEMA: &str = "ordlab.config/v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    CoaGrid,
    CerCurve,
    Theorem1,
    Theorem2,
    Violation,
    Multistage,
    Mpq,
    RotationPrune,
    Plan,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::CoaGrid => "coa_grid",
            ExperimentKind::CerCurve => "cer_curve",
            ExperimentKind::Theorem1 => "theorem1",
            ExperimentKind::Theorem2 => "theorem2",
            ExperimentKind::Violation => "violation",
            ExperimentKind::Multistage => "multistage",
            ExperimentKind::Mpq => "mpq",
            ExperimentKind::RotationPrune => "rotation_prune",
            ExperimentKind::Plan => "plan",
        }
    }

    /// Kinds whose result is checked against a theorem oracle.
    pub fn is_oracle(self) -> bool {
        matches!(self, ExperimentKind::Theorem1 | ExperimentKind::Theorem2)
    }
}

fn default_samples() -> usize {
    crate::model::DEFAULT_CALIB_SAMPLES
}

fn default_one() -> usize {
    1
}

fn default_beta() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NearTieSpec {
    /// Bit-width whose nearest-rounding energy shifts set the tie margins.
    pub bits: u8,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Rescale layer output energies to `spread^rank`.
    #[serde(default)]
    pub energy_spread: Option<f64>,
    #[serde(default)]
    pub near_tie: Option<NearTieSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    SyntheticExact {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default)]
        base: f64,
    },
    TaskAccuracy,
}

impl Default for MetricSpec {
    fn default() -> Self {
        MetricSpec::SyntheticExact { beta: 1.0, base: 0.0 }
    }
}

impl MetricSpec {
    pub fn to_metric(&self) -> Result<Metric> {
        match *self {
            MetricSpec::SyntheticExact { beta, base } => Metric::synthetic(beta, base),
            MetricSpec::TaskAccuracy => Ok(Metric::accuracy()),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub bits: Vec<u8>,
    /// Pruning families.
    #[serde(default)]
    pub families: Vec<Family>,
    #[serde(default)]
    pub rounding: Rounding,
    #[serde(default)]
    pub scope: ScaleScope,
    #[serde(default)]
    pub rotate: bool,
    #[serde(default)]
    pub scoring: PruneScoring,
}

impl GridSpec {
    /// Quantization operator at `bits` with the grid's rounding, scope and rotation.
    pub fn quant(&self, bits: u8, seed: u64) -> CompressionOp {
        let mut op = CompressionOp::quant(bits);
        if self.scope == ScaleScope::PerRow {
            op = op.per_row();
        }
        if self.rounding == Rounding::Stochastic {
            op = op.stochastic(seed);
        }
        if self.rotate {
            op = op.rotated();
        }
        op
    }

    pub fn prune(&self, family: Family, fraction: f64) -> Result<CompressionOp> {
        let op = match family {
            Family::PruneUnstructured => CompressionOp::prune_unstructured(fraction),
            Family::PruneRow => CompressionOp::prune_row(fraction),
            Family::PruneLayer => CompressionOp::prune_layer(fraction),
            other => return Err(Error::Config(format!("{other:?} is not a pruning family"))),
        };
        Ok(op.with_scoring(self.scoring))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultistageSpec {
    pub total_p: f64,
    pub splits: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpqSpec {
    pub avg_bits: Vec<f64>,
    pub menu: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSpec {
    pub ops: Vec<CompressionOp>,
    /// Score every permutation as well (at most six operators).
    #[serde(default = "default_true")]
    pub brute_force: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default = "default_one")]
    pub trials: usize,
    /// Seed for stochastic rounding and per-trial model draws.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub multistage: Option<MultistageSpec>,
    #[serde(default)]
    pub mpq: Option<MpqSpec>,
    #[serde(default)]
    pub plan: Option<PlanSpec>,
}

/// Line of the last key of `path` in `src`, found by walking the keys in
/// order; falls back to the deepest key found, then to line 1.
pub fn locate(src: &str, path: &[&str]) -> usize {
    let mut pos = 0;
    for key in path {
        let needle = format!("\"{key}\"");
        let mut from = pos;
        let hit = loop {
            match src[from..].find(&needle) {
                None => break None,
                Some(k) => {
                    let at = from + k;
                    let rest = src[at + needle.len()..].trim_start();
                    if rest.starts_with(':') {
                        break Some(at);
                    }
                    from = at + needle.len();
                }
            }
        };
        match hit {
            Some(at) => pos = at,
            None => break,
        }
    }
    src[..pos].matches('\n').count() + 1
}

struct Checker<'a> {
    src: &'a str,
}

impl Checker<'_> {
    fn fail(&self, path: &[&str], msg: impl std::fmt::Display) -> Error {
        Error::Config(format!("line {}: {}: {msg}", locate(self.src, path), path.join(".")))
    }
}

impl ExperimentConfig {
    /// Parses and validates `src`.
    pub fn parse(src: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(src).map_err(|e| {
            Error::Config(format!("line {}, column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate(src)?;
        Ok(cfg)
    }

    /// Semantic checks; `src` anchors messages to lines.
    pub fn validate(&self, src: &str) -> Result<()> {
        let c = Checker { src };
        let m = &self.model;
        if m.dims.len() < 2 {
            return Err(c.fail(&["model", "dims"], "at least an input and one output width are required"));
        }
        if m.dims.contains(&0) {
            return Err(c.fail(&["model", "dims"], "widths must be positive"));
        }
        if m.samples == 0 {
            return Err(c.fail(&["model", "samples"], "must be positive"));
        }
        if let Some(s) = m.energy_spread {
            if !(s > 1.0 && s.is_finite()) {
                return Err(c.fail(&["model", "energy_spread"], "must exceed 1"));
            }
        }
        if let Some(t) = &m.near_tie {
            if m.energy_spread.is_some() {
                return Err(c.fail(&["model", "near_tie"], "cannot be combined with energy_spread"));
            }
            let layers = m.dims.len() - 1;
            if t.pairs == 0 || 2 * t.pairs > layers {
                return Err(c.fail(&["model", "near_tie", "pairs"], format!("{layers} layers hold 1..={} pairs", layers / 2)));
            }
            if !(2..=16).contains(&t.bits) {
                return Err(c.fail(&["model", "near_tie", "bits"], "must lie in 2..=16"));
            }
        }
        if let MetricSpec::SyntheticExact { beta, base } = self.metric {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(c.fail(&["metric", "beta"], "must be positive"));
            }
            if !base.is_finite() {
                return Err(c.fail(&["metric", "base"], "must be finite"));
            }
        }
        if self.trials == 0 || self.trials > 100_000 {
            return Err(c.fail(&["trials"], "must lie in 1..=100000"));
        }
        let g = &self.grid;
        if let Some(p) = g.fractions.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
            return Err(c.fail(&["grid", "fractions"], format!("{p} is outside (0, 1)")));
        }
        if let Some(b) = g.bits.iter().find(|b| !(2..=16).contains(*b)) {
            return Err(c.fail(&["grid", "bits"], format!("{b} is outside 2..=16")));
        }
        if let Some(f) = g.families.iter().find(|f| !f.is_pruning()) {
            return Err(c.fail(&["grid", "families"], format!("{f:?} is not a pruning family")));
        }

        let need = |ok: bool, path: &[&str], what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(c.fail(path, format!("{what} for kind {}", self.kind.name())))
            }
        };
        let synthetic = matches!(self.metric, MetricSpec::SyntheticExact { .. });
        use ExperimentKind as K;
        match self.kind {
            K::CoaGrid => {
                need(!g.families.is_empty(), &["grid", "families"], "at least one family is required")?;
                need(!g.fractions.is_empty(), &["grid", "fractions"], "at least one fraction is required")?;
                need(g.bits.len() >= 2, &["grid", "bits"], "at least two bit-widths are required")?;
            }
            K::CerCurve => {
                need(g.bits.is_empty() || g.bits.len() >= 2, &["grid", "bits"], "at least two bit-widths are required")?;
            }
            K::Theorem1 => {
                need(synthetic, &["metric"], "the synthetic_exact metric is required")?;
                need(!g.families.is_empty(), &["grid", "families"], "at least one family is required")?;
                need(!g.fractions.is_empty(), &["grid", "fractions"], "at least one fraction is required")?;
                need(!g.bits.is_empty(), &["grid", "bits"], "at least one bit-width is required")?;
            }
            K::Theorem2 => {
                need(synthetic, &["metric"], "the synthetic_exact metric is required")?;
                need(g.rounding == Rounding::Stochastic, &["grid", "rounding"], "stochastic rounding is required")?;
                need(!g.families.is_empty(), &["grid", "families"], "at least one family is required")?;
                need(!g.fractions.is_empty(), &["grid", "fractions"], "at least one fraction is required")?;
                need(g.bits.len() >= 2, &["grid", "bits"], "at least two bit-widths are required")?;
            }
            K::Violation => {
                need(g.families.len() == 1, &["grid", "families"], "exactly one family is required")?;
                need(g.fractions.len() >= 2, &["grid", "fractions"], "at least two fractions are required")?;
                need(g.bits.len() == 1, &["grid", "bits"], "exactly one bit-width is required")?;
            }
            K::Multistage => {
                let Some(ms) = &self.multistage else {
                    return Err(c.fail(&["kind"], "kind multistage needs a multistage section"));
                };
                need(!g.families.is_empty(), &["grid", "families"], "at least one family is required")?;
                need(g.bits.len() == 1, &["grid", "bits"], "exactly one bit-width is required")?;
                if !(ms.total_p > 0.0 && ms.total_p < 1.0) {
                    return Err(c.fail(&["multistage", "total_p"], "must lie in (0, 1)"));
                }
                if ms.splits.is_empty() {
                    return Err(c.fail(&["multistage", "splits"], "at least one split is required"));
                }
                for &(p1, p2) in &ms.splits {
                    if !(p1 > 0.0 && p2 > 0.0) || ((p1 + p2) - ms.total_p).abs() > 1e-9 {
                        return Err(c.fail(
                            &["multistage", "splits"],
                            format!("split [{p1}, {p2}] must be positive and sum to {}", ms.total_p),
                        ));
                    }
                }
            }
            K::Mpq => {
                let Some(mpq) = &self.mpq else {
                    return Err(c.fail(&["kind"], "kind mpq needs an mpq section"));
                };
                if mpq.menu.is_empty() || mpq.menu.iter().any(|b| !(2..=16).contains(b)) {
                    return Err(c.fail(&["mpq", "menu"], "needs bit-widths in 2..=16"));
                }
                if mpq.avg_bits.is_empty() || mpq.avg_bits.iter().any(|a| !a.is_finite()) {
                    return Err(c.fail(&["mpq", "avg_bits"], "needs at least one finite average"));
                }
            }
            K::RotationPrune => {
                need(!g.families.is_empty(), &["grid", "families"], "at least one family is required")?;
                need(!g.fractions.is_empty(), &["grid", "fractions"], "at least one fraction is required")?;
                if !m.dims.iter().all(|d| d.is_power_of_two()) {
                    return Err(c.fail(&["model", "dims"], "rotation needs power-of-two widths"));
                }
            }
            K::Plan => {
                let Some(plan) = &self.plan else {
                    return Err(c.fail(&["kind"], "kind plan needs a plan section"));
                };
                if plan.ops.is_empty() {
                    return Err(c.fail(&["plan", "ops"], "at least one operator is required"));
                }
                for op in &plan.ops {
                    op.validate().map_err(|e| c.fail(&["plan", "ops"], e))?;
                }
                if plan.brute_force && plan.ops.len() > crate::planner::MAX_BRUTE_FORCE_OPS {
                    return Err(c.fail(
                        &["plan", "brute_force"],
                        format!("at most {} operators can be searched exhaustively", crate::planner::MAX_BRUTE_FORCE_OPS),
                    ));
                }
            }
        }
        if g.rotate && !m.dims.iter().all(|d| d.is_power_of_two()) {
            return Err(c.fail(&["grid", "rotate"], "rotation needs power-of-two widths"));
        }
        Ok(())
    }
}

/// JSON Schema of [`ExperimentConfig`].
pub fn schema() -> Value {
    let family = json!({ "enum": ["PruneUnstructured", "PruneRow", "PruneLayer"] });
    let bits = json!({ "type": "integer", "minimum": 2, "maximum": 16 });
    let fraction = json!({ "type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1 });
    let prune_op = |name: &str| {
        json!({
            "type": "object",
            "required": ["family", "fraction"],
            "properties": {
                "family": { "const": name },
                "fraction": fraction,
                "scoring": { "enum": ["output_error", "magnitude"] }
            },
            "additionalProperties": false
        })
    };
    let op = json!({
        "oneOf": [
            prune_op("PruneUnstructured"),
            prune_op("PruneRow"),
            prune_op("PruneLayer"),
            {
                "type": "object",
                "required": ["family", "bits"],
                "properties": {
                    "family": { "const": "QuantUniform" },
                    "bits": bits,
                    "rounding": { "enum": ["nearest", "stochastic"] },
                    "scope": { "enum": ["per_row", "per_tensor"] },
                    "rotate": { "type": "boolean" },
                    "layers": { "type": ["array", "null"], "items": { "type": "integer", "minimum": 0 } },
                    "seed": { "type": "integer", "minimum": 0 }
                },
                "additionalProperties": false
            },
            {
                "type": "object",
                "required": ["family", "group"],
                "properties": {
                    "family": { "const": "Share" },
                    "group": { "type": "integer", "minimum": 2 }
                },
                "additionalProperties": false
            }
        ]
    });
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "$id": CONFIG_SCHEMA,
        "title": "ordlab experiment configuration",
        "type": "object",
        "required": ["kind", "model"],
        "additionalProperties": false,
        "properties": {
            "kind": { "enum": ["coa_grid", "cer_curve", "theorem1", "theorem2", "violation", "multistage", "mpq", "rotation_prune", "plan"] },
            "model": {
                "type": "object",
                "required": ["dims", "seed"],
                "additionalProperties": false,
                "properties": {
                    "dims": { "type": "array", "minItems": 2, "items": { "type": "integer", "minimum": 1 } },
                    "seed": { "type": "integer", "minimum": 0 },
                    "samples": { "type": "integer", "minimum": 1, "default": crate::model::DEFAULT_CALIB_SAMPLES },
                    "energy_spread": { "type": ["number", "null"], "exclusiveMinimum": 1 },
                    "near_tie": {
                        "type": ["object", "null"],
                        "required": ["bits", "pairs"],
                        "additionalProperties": false,
                        "properties": { "bits": bits, "pairs": { "type": "integer", "minimum": 1 } }
                    }
                }
            },
            "metric": {
                "oneOf": [
                    {
                        "type": "object",
                        "required": ["kind"],
                        "additionalProperties": false,
                        "properties": {
                            "kind": { "const": "synthetic_exact" },
                            "beta": { "type": "number", "exclusiveMinimum": 0, "default": 1.0 },
                            "base": { "type": "number", "default": 0.0 }
                        }
                    },
                    {
                        "type": "object",
                        "required": ["kind"],
                        "additionalProperties": false,
                        "properties": { "kind": { "const": "task_accuracy" } }
                    }
                ]
            },
            "grid": {
                "type": "object",
                "additionalProperties": false,
                "properties": {
                    "fractions": { "type": "array", "items": fraction },
                    "bits": { "type": "array", "items": bits },
                    "families": { "type": "array", "items": family },
                    "rounding": { "enum": ["nearest", "stochastic"], "default": "nearest" },
                    "scope": { "enum": ["per_row", "per_tensor"], "default": "per_tensor" },
                    "rotate": { "type": "boolean", "default": false },
                    "scoring": { "enum": ["output_error", "magnitude"], "default": "output_error" }
                }
            },
            "trials": { "type": "integer", "minimum": 1, "maximum": 100000, "default": 1 },
            "seed": { "type": "integer", "minimum": 0, "default": 0 },
            "out": { "type": ["string", "null"] },
            "multistage": {
                "type": ["object", "null"],
                "required": ["total_p", "splits"],
                "additionalProperties": false,
                "properties": {
                    "total_p": fraction,
                    "splits": {
                        "type": "array",
                        "minItems": 1,
                        "items": { "type": "array", "prefixItems": [fraction, fraction], "minItems": 2, "maxItems": 2 }
                    }
                }
            },
            "mpq": {
                "type": ["object", "null"],
                "required": ["avg_bits", "menu"],
                "additionalProperties": false,
                "properties": {
                    "avg_bits": { "type": "array", "minItems": 1, "items": { "type": "number" } },
                    "menu": { "type": "array", "minItems": 1, "items": bits }
                }
            },
            "plan": {
                "type": ["object", "null"],
                "required": ["ops"],
                "additionalProperties": false,
                "properties": {
                    "ops": { "type": "array", "minItems": 1, "items": op },
                    "brute_force": { "type": "boolean", "default": true }
                }
            }
        }
    })
}
