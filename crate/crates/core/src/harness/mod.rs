//! Config-driven experiment runner: builds the model, sweeps the operator
//! grid for one experiment kind, and writes `report.csv`, `report.json`,
//! `manifest.json` and, for trend sweeps, `fit.json`.

pub mod config;
pub mod fit;

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub use config::{ExperimentConfig, ExperimentKind, GridSpec, MetricSpec, ModelSpec};
pub use fit::{fit_exponential, TrendFit};

use crate::compressors::{self, CompressionOp, Family, Rounding};
use crate::error::{Error, Result};
use crate::metrics::{self, PairRuns, QuantCurve, CURVE_BITS};
use crate::model::{build_synthetic_model_with_samples, Evaluator, LayeredModel, Metric, MODEL_SCHEMA};
use crate::report::{write_atomic, Cell, Table};
use crate::theory::{self, mean_se, monotone_violations, TheoremInstance};
use crate::{planner, rng};

pub const REPORT_SCHEMA: &str = "ordlab.report/v1";
pub const MANIFEST_SCHEMA: &str = "ordlab.manifest/v1";
/// Relative residual below which a Theorem 1 check passes.
pub const THEOREM1_TOL: f64 = 1e-8;
pub const DEFAULT_OUT_DIR: &str = "ordlab-out";

/// Everything one run produced, before it is written out.
#[derive(Clone, Debug)]
pub struct Report {
    pub kind: ExperimentKind,
    pub table: Table,
    pub summary: Value,
    pub fit: Option<Value>,
    /// False when a theorem oracle disagreed with direct evaluation.
    pub oracle_ok: bool,
}

impl Report {
    fn new(kind: ExperimentKind, table: Table) -> Self {
        Report { kind, table, summary: json!({}), fit: None, oracle_ok: true }
    }

    pub fn to_json(&self) -> Value {
        json!({
            "schema": REPORT_SCHEMA,
            "kind": self.kind.name(),
            "oracle_ok": self.oracle_ok,
            "summary": self.summary,
            "rows": self.table.to_json_rows(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Worker threads; the rayon default when absent.
    pub jobs: Option<usize>,
    /// Overrides the config's output directory.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub out_dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Builds the model a spec describes, drawing weights from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<LayeredModel> {
    let base = build_synthetic_model_with_samples(&spec.dims, spec.samples, seed)?;
    if let Some(spread) = spec.energy_spread {
        return theory::separated_model(&base, spread);
    }
    if let Some(t) = &spec.near_tie {
        return Ok(theory::near_tie_model(&base, &CompressionOp::quant(t.bits), t.pairs)?.model);
    }
    Ok(base)
}

fn model_for(cfg: &ExperimentConfig, metric: &Metric) -> Result<LayeredModel> {
    let m = build_model(&cfg.model, cfg.model.seed)?;
    match metric.kind {
        crate::model::MetricKind::TaskAccuracy => m.with_self_labels(),
        crate::model::MetricKind::SyntheticExact => Ok(m),
    }
}

/// SHA-256 of the config's canonical JSON serialization.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let canonical = serde_json::to_vec(cfg)?;
    Ok(Sha256::digest(&canonical).iter().map(|b| format!("{b:02x}")).collect())
}

fn trials_for(grid: &GridSpec, trials: usize) -> usize {
    if grid.rounding == Rounding::Stochastic {
        trials
    } else {
        1
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::PruneUnstructured => "PruneUnstructured",
        Family::PruneRow => "PruneRow",
        Family::PruneLayer => "PruneLayer",
        Family::QuantUniform => "QuantUniform",
        Family::Share => "Share",
    }
}

/// Quantization curve of the grid's template, averaged over stochastic draws.
pub fn averaged_curve(ev: &Evaluator, grid: &GridSpec, bits: &[u8], trials: usize, seed: u64) -> Result<QuantCurve> {
    let raw = bits
        .iter()
        .map(|&b| {
            let scores = (0..trials)
                .into_par_iter()
                .map(|t| metrics::single_score(ev, &grid.quant(b, rng::derive_seed(seed, &[u64::from(b), t as u64]))))
                .collect::<Result<Vec<f64>>>()?;
            Ok((16.0 / f64::from(b), scores.iter().sum::<f64>() / trials as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    QuantCurve::from_points(raw)
}

fn curve_bits(extra: &[u8]) -> Vec<u8> {
    let mut bits: Vec<u8> = CURVE_BITS.iter().chain(extra).copied().collect();
    bits.sort_unstable_by(|a, b| b.cmp(a));
    bits.dedup();
    bits
}

fn coa_grid(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let ev = Evaluator::new(m, *metric)?;
    let trials = trials_for(g, cfg.trials);
    let curve = averaged_curve(&ev, g, &curve_bits(&g.bits), trials, cfg.seed)?;
    let mut table = Table::new(&[
        "family", "p", "bits", "c_q", "cer_p", "cer_flagged", "cer_diff", "coa_mean", "coa_se", "trials",
    ]);
    let mut series = Vec::new();
    let mut fits = Vec::new();
    for &family in &g.families {
        for &p in &g.fractions {
            let prune = g.prune(family, p)?;
            let cer_p = curve.invert(metrics::single_score(&ev, &prune)?);
            let mut points = Vec::with_capacity(g.bits.len());
            for &b in &g.bits {
                let coas = (0..trials)
                    .into_par_iter()
                    .map(|t| {
                        let q = g.quant(b, rng::derive_seed(cfg.seed, &[u64::from(b), t as u64]));
                        PairRuns::new(&ev.calibration, m, &q, &prune)?.coa(&ev)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                let (mean, se) = mean_se(&coas);
                let c_q = 16.0 / f64::from(b);
                table.push(vec![
                    family_name(family).into(),
                    p.into(),
                    b.into(),
                    c_q.into(),
                    cer_p.value.into(),
                    cer_p.flagged().into(),
                    (cer_p.value - c_q).into(),
                    mean.into(),
                    se.into(),
                    trials.into(),
                ]);
                points.push((cer_p.value - c_q, mean, se));
            }
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            let violations = monotone_violations(&points.iter().map(|p| (p.1, p.2)).collect::<Vec<_>>());
            let fit = fit_exponential(&points.iter().map(|p| (p.0, p.1)).collect::<Vec<_>>());
            let fit_json = match &fit {
                Ok(f) => serde_json::to_value(f)?,
                Err(e) => json!({ "error": e.to_string() }),
            };
            series.push(json!({
                "family": family_name(family),
                "p": p,
                "cer_p": cer_p,
                "monotone": violations.is_empty(),
                "violations": violations,
            }));
            fits.push(json!({ "family": family_name(family), "p": p, "fit": fit_json }));
        }
    }
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "series": series, "curve": curve, "trials": trials });
    r.fit = Some(json!({ "model": "coa = a * exp(b * cer_diff) + c", "fits": fits }));
    Ok(r)
}

fn cer_curve(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let ev = Evaluator::new(m, *metric)?;
    let trials = trials_for(g, cfg.trials);
    let bits = if g.bits.is_empty() { CURVE_BITS.to_vec() } else { curve_bits_only(&g.bits) };
    let curve = averaged_curve(&ev, g, &bits, trials, cfg.seed)?;
    let mut table = Table::new(&[
        "row", "label", "bits", "ratio", "performance", "envelope", "cer", "clamped", "extrapolated", "ambiguous",
    ]);
    let mut worst: f64 = 0.0;
    for (&(ratio, perf), &(_, env)) in curve.raw.iter().zip(&curve.points) {
        let b = (16.0 / ratio).round() as u8;
        let c = curve.invert(perf);
        if curve.is_monotone() {
            worst = worst.max((c.value - ratio).abs());
        }
        table.push(vec![
            "curve".into(),
            g.quant(b, 0).label().into(),
            b.into(),
            ratio.into(),
            perf.into(),
            env.into(),
            c.value.into(),
            c.clamped.into(),
            c.extrapolated.into(),
            c.ambiguous.into(),
        ]);
    }
    for &family in &g.families {
        for &p in &g.fractions {
            let op = g.prune(family, p)?;
            let perf = metrics::single_score(&ev, &op)?;
            let c = curve.invert(perf);
            table.push(vec![
                "op".into(),
                op.label().into(),
                Cell::Empty,
                Cell::Empty,
                perf.into(),
                Cell::Empty,
                c.value.into(),
                c.clamped.into(),
                c.extrapolated.into(),
                c.ambiguous.into(),
            ]);
        }
    }
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "monotone": curve.is_monotone(), "max_self_inversion_error": worst, "trials": trials });
    Ok(r)
}

fn curve_bits_only(bits: &[u8]) -> Vec<u8> {
    let mut b = bits.to_vec();
    b.sort_unstable_by(|x, y| y.cmp(x));
    b.dedup();
    b
}

fn theorem1(cfg: &ExperimentConfig, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let mut cases = Vec::new();
    for t in 0..cfg.trials {
        for &family in &g.families {
            for &p in &g.fractions {
                for &b in &g.bits {
                    cases.push((t, family, p, b));
                }
            }
        }
    }
    let rows = cases
        .into_par_iter()
        .map(|(t, family, p, b)| {
            let seed = if cfg.trials == 1 { cfg.model.seed } else { rng::derive_seed(cfg.model.seed, &[t as u64]) };
            let m = build_model(&cfg.model, seed)?;
            let prune = g.prune(family, p)?;
            let quant = g.quant(b, rng::derive_seed(cfg.seed, &[t as u64, u64::from(b)]));
            match TheoremInstance::new(m, *metric, prune, quant) {
                Ok(inst) => Ok((t, family, p, b, Some(theory::theorem1_check(&inst)?))),
                Err(Error::NotDisjoint) => Ok((t, family, p, b, None)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut table = Table::new(&[
        "trial", "family", "p", "bits", "status", "g1", "g2", "coa", "predicted", "residual",
    ]);
    let (mut checked, mut failed, mut max_res) = (0usize, 0usize, 0.0f64);
    for (t, family, p, b, check) in rows {
        let mut row: Vec<Cell> = vec![t.into(), family_name(family).into(), p.into(), b.into()];
        match check {
            Some(c) => {
                checked += 1;
                max_res = max_res.max(c.residual);
                let ok = c.passes(THEOREM1_TOL);
                failed += usize::from(!ok);
                row.extend([
                    if ok { "pass" } else { "fail" }.into(),
                    c.g1.into(),
                    c.g2.into(),
                    c.lhs.into(),
                    c.rhs.into(),
                    c.residual.into(),
                ]);
            }
            None => row.extend(["not_disjoint".into(), Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty, Cell::Empty]),
        }
        table.push(row);
    }
    let mut r = Report::new(cfg.kind, table);
    r.oracle_ok = failed == 0;
    r.summary = json!({
        "checked": checked,
        "failed": failed,
        "skipped_not_disjoint": r.table.rows.len() - checked,
        "max_residual": max_res,
        "tolerance": THEOREM1_TOL,
    });
    Ok(r)
}

fn theorem2(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let mut table = Table::new(&[
        "family", "p", "bits", "c_q", "cer_p", "cer_diff", "coa_mean", "coa_se", "g1_mean", "assumption_ratio",
    ]);
    let mut series = Vec::new();
    let mut ok = true;
    for &family in &g.families {
        for &p in &g.fractions {
            let prune = g.prune(family, p)?;
            let rep = theory::theorem2_experiment(m, metric, &prune, &g.quant(16, cfg.seed), &g.bits, cfg.trials, cfg.seed)?;
            for pt in &rep.points {
                table.push(vec![
                    family_name(family).into(),
                    p.into(),
                    pt.bits.into(),
                    pt.c_q.into(),
                    pt.cer_p.value.into(),
                    pt.cer_diff.into(),
                    pt.coa_mean.into(),
                    pt.coa_se.into(),
                    pt.g1_mean.into(),
                    pt.assumption_ratio.into(),
                ]);
            }
            // the oracle only binds where the assumption holds
            ok &= rep.monotone || rep.assumption_violating;
            series.push(json!({
                "family": family_name(family),
                "p": p,
                "monotone": rep.monotone,
                "violations": rep.violations,
                "assumption_violating": rep.assumption_violating,
            }));
        }
    }
    let mut r = Report::new(cfg.kind, table);
    r.oracle_ok = ok;
    r.summary = json!({ "series": series, "trials": cfg.trials, "assumption_ratio_threshold": theory::DEFAULT_ASSUMPTION_RATIO });
    Ok(r)
}

fn violation(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let prune = g.prune(g.families[0], g.fractions[0])?;
    let quant = g.quant(g.bits[0], cfg.seed);
    let rep = theory::violation_case_explorer(m, metric, &prune, &g.fractions, &quant)?;
    let mut table = Table::new(&["p", "pruned_units", "g1", "coa", "case", "monotone"]);
    for s in &rep.steps {
        table.push(vec![
            s.p.into(),
            s.pruned_units.into(),
            s.g1.into(),
            s.coa.into(),
            s.case.map(|c| c.number() as usize).into(),
            s.monotone.into(),
        ]);
    }
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "monotone_outside_case3": rep.monotone_outside_case3, "case3_steps": rep.case3_steps });
    Ok(r)
}

fn multistage(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let g = &cfg.grid;
    let ms = cfg.multistage.as_ref().ok_or_else(|| Error::Config("missing multistage section".into()))?;
    let quant = g.quant(g.bits[0], cfg.seed);
    let ev = Evaluator::new(m, *metric)?;
    let mut table = Table::new(&["family", "p1", "p2", "score", "reverse_score", "advantage", "advantage_se"]);
    let mut checks = Vec::new();
    for &family in &g.families {
        let prune = g.prune(family, ms.splits[0].0)?;
        let rows = planner::multi_stage(m, metric, ms.total_p, &ms.splits, &prune, &quant, cfg.trials, cfg.seed)?;
        for row in &rows {
            table.push(vec![
                family_name(family).into(),
                row.p1.into(),
                row.p2.into(),
                row.score.into(),
                row.reverse_score.into(),
                row.advantage.into(),
                row.advantage_se.into(),
            ]);
        }
        let a2 = planner::verify_assumption2(&ev, &prune.with_fraction(ms.total_p), &quant, theory::DEFAULT_ASSUMPTION_RATIO)?;
        checks.push(json!({ "family": family_name(family), "assumption": a2 }));
    }
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "total_p": ms.total_p, "assumption": checks });
    Ok(r)
}

fn mpq(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let spec = cfg.mpq.as_ref().ok_or_else(|| Error::Config("missing mpq section".into()))?;
    let template = cfg.grid.quant(16, cfg.seed);
    let mut table = Table::new(&[
        "avg_bits", "realized_bits", "allocation", "progressive", "regressive", "coa", "disjoint",
    ]);
    let mut results = Vec::new();
    for &avg in &spec.avg_bits {
        let res = planner::mpq_orderings(m, metric, avg, &spec.menu, &template)?;
        table.push(vec![
            avg.into(),
            res.realized_bits.into(),
            res.allocation.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(" ").into(),
            res.progressive_score.into(),
            res.regressive_score.into(),
            res.coa.into(),
            res.disjoint.into(),
        ]);
        results.push(res);
    }
    results.sort_by(|a, b| b.avg_bits.total_cmp(&a.avg_bits));
    let non_decreasing = results.windows(2).all(|w| w[1].coa >= w[0].coa - 1e-9 * w[0].progressive_score.abs().max(1.0));
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({
        "all_disjoint": results.iter().all(|x| x.disjoint),
        "coa_non_decreasing_as_bits_fall": non_decreasing,
    });
    Ok(r)
}

fn rotation_prune(cfg: &ExperimentConfig, m: &LayeredModel) -> Result<Report> {
    let g = &cfg.grid;
    let mut table = Table::new(&["family", "p", "matrix_wise", "element_wise", "selection_changed"]);
    for &family in &g.families {
        for &p in &g.fractions {
            let e = compressors::rotation_pruning_error(m, &g.prune(family, p)?)?;
            table.push(vec![
                family_name(family).into(),
                p.into(),
                e.matrix_wise.into(),
                e.element_wise.into(),
                e.selection_changed.into(),
            ]);
        }
    }
    let rotated = compressors::rotate_model(m)?;
    let round_trip = rotated.final_output()?.sub(&m.final_output()?)?.max_abs();
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "round_trip_max_abs": round_trip });
    Ok(r)
}

fn plan(cfg: &ExperimentConfig, m: &LayeredModel, metric: &Metric) -> Result<Report> {
    let spec = cfg.plan.as_ref().ok_or_else(|| Error::Config("missing plan section".into()))?;
    let ev = Evaluator::new(m, *metric)?;
    let curve = QuantCurve::standard(&ev)?;
    let prog = planner::progressive_order(m, metric, &spec.ops, &curve)?;
    let prog_score = planner::pipeline_score(&ev, &prog.steps)?;
    let (table, extra) = if spec.brute_force {
        let bf = planner::brute_force_order(m, metric, &spec.ops)?;
        let extra = json!({
            "best": bf.best,
            "best_score": bf.best_score,
            "progressive_rank": bf.rank_of(prog_score),
        });
        (bf.to_table(), extra)
    } else {
        let mut t = Table::new(&["step", "op", "cer", "cer_flagged"]);
        for (k, (op, c)) in prog.steps.iter().zip(prog.predicted_rank.iter().flatten()).enumerate() {
            t.push(vec![k.into(), op.label().into(), c.value.into(), c.flagged().into()]);
        }
        (t, json!({}))
    };
    let mut r = Report::new(cfg.kind, table);
    r.summary = json!({ "progressive": prog, "progressive_score": prog_score, "search": extra });
    Ok(r)
}

/// Runs the experiment a config describes without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<Report> {
    let metric = cfg.metric.to_metric()?;
    if cfg.kind == ExperimentKind::Theorem1 {
        return theorem1(cfg, &metric);
    }
    let m = model_for(cfg, &metric)?;
    match cfg.kind {
        ExperimentKind::CoaGrid => coa_grid(cfg, &m, &metric),
        ExperimentKind::CerCurve => cer_curve(cfg, &m, &metric),
        ExperimentKind::Theorem1 => unreachable!("handled above"),
        ExperimentKind::Theorem2 => theorem2(cfg, &m, &metric),
        ExperimentKind::Violation => violation(cfg, &m, &metric),
        ExperimentKind::Multistage => multistage(cfg, &m, &metric),
        ExperimentKind::Mpq => mpq(cfg, &m, &metric),
        ExperimentKind::RotationPrune => rotation_prune(cfg, &m),
        ExperimentKind::Plan => plan(cfg, &m, &metric),
    }
}

fn pretty(v: &Value) -> Result<Vec<u8>> {
    let mut s = serde_json::to_vec_pretty(v)?;
    s.push(b'\n');
    Ok(s)
}

/// Writes a finished report into `dir`.
pub fn write_report(cfg: &ExperimentConfig, report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let put = |files: &mut Vec<PathBuf>, name: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(name);
        write_atomic(&p, &bytes)?;
        files.push(p);
        Ok(())
    };
    put(&mut files, "report.csv", report.table.to_csv()?.into_bytes())?;
    put(&mut files, "report.json", pretty(&report.to_json())?)?;
    if let Some(fit) = &report.fit {
        put(&mut files, "fit.json", pretty(fit)?)?;
    }
    let names: Vec<String> =
        files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
    let manifest = json!({
        "schema": MANIFEST_SCHEMA,
        "kind": cfg.kind.name(),
        "config_sha256": config_hash(cfg)?,
        "seed": cfg.seed,
        "model_seed": cfg.model.seed,
        "trials": cfg.trials,
        "oracle_ok": report.oracle_ok,
        "versions": {
            "ordlab": env!("CARGO_PKG_VERSION"),
            "config_schema": config::CONFIG_SCHEMA,
            "model_schema": MODEL_SCHEMA,
            "report_schema": REPORT_SCHEMA,
        },
        "files": names,
    });
    put(&mut files, "manifest.json", pretty(&manifest)?)?;
    Ok(files)
}

/// Executes `cfg` on a pool of `opts.jobs` threads and writes its outputs.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunOutcome> {
    let report = match opts.jobs {
        Some(0) => return Err(Error::Config("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Io(std::io::Error::other(e)))?
            .install(|| execute(cfg))?,
        None => execute(cfg)?,
    };
    let out_dir = opts.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let files = write_report(cfg, &report, &out_dir)?;
    Ok(RunOutcome { report, out_dir, files })
}
