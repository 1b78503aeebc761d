//! The ten-variant ablation grid.
//!
//! Each variant is a small delta on the base config and trains from the same
//! init seeds. The appendix table numbers the same variants differently; both
//! ids are kept so results can be matched against either listing.

use std::fmt::Write as _;
use std::path::Path;

use echo_lora::backbone::Projection;
use echo_lora::data::Task;

use crate::config::RunConfig;
use crate::error::{io_err, HarnessError, Result};
use crate::runner::train;

#[derive(Debug, Clone, Copy)]
pub struct Variant {
    pub id: &'static str,
    /// Id of the same variant in the per-task appendix listing.
    pub appendix_id: &'static str,
    pub name: &'static str,
    apply: fn(&mut RunConfig),
}

impl Variant {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.echo.enabled = true;
        (self.apply)(&mut cfg);
        cfg
    }

    pub fn by_id(id: &str) -> Result<&'static Variant> {
        VARIANTS.iter().find(|v| v.id.eq_ignore_ascii_case(id)).ok_or_else(|| HarnessError::Config {
            origin: "--variant".into(),
            line: 0,
            message: format!("unknown variant {id:?}, expected A-0 to A-9"),
        })
    }
}

fn baseline(c: &mut RunConfig) {
    c.echo.enabled = false;
}

fn always_routed(c: &mut RunConfig) {
    c.routing.p_start = 1.0;
    c.routing.p_end = 1.0;
}

fn deep_to_deep(c: &mut RunConfig) {
    c.echo.source_layers = vec![-2, -1];
    c.echo.target_layers = vec![-4, -3];
}

fn shallow_to_shallow(c: &mut RunConfig) {
    c.echo.source_layers = vec![4, 5];
    c.echo.target_layers = vec![2, 3];
}

fn unmasked(c: &mut RunConfig) {
    c.echo.answer_only_mask = false;
}

fn v_only(c: &mut RunConfig) {
    c.echo.target_projections = vec![Projection::V];
}

fn unmasked_all_projections(c: &mut RunConfig) {
    unmasked(c);
    all_projections(c);
}

fn q_only(c: &mut RunConfig) {
    c.echo.target_projections = vec![Projection::Q];
}

fn all_projections(c: &mut RunConfig) {
    c.echo.target_projections = Projection::ALL.to_vec();
}

fn full(_: &mut RunConfig) {}

pub const VARIANTS: [Variant; 10] = [
    Variant { id: "A-0", appendix_id: "A-0", name: "Reproduced LoRA baseline", apply: baseline },
    Variant { id: "A-1", appendix_id: "A-3", name: "w/o Stochastic Routing", apply: always_routed },
    Variant { id: "A-2", appendix_id: "A-4", name: "Deep->Deep", apply: deep_to_deep },
    Variant { id: "A-3", appendix_id: "A-5", name: "Shallow->Shallow", apply: shallow_to_shallow },
    Variant { id: "A-4", appendix_id: "A-2", name: "w/o Answer-Only Masking", apply: unmasked },
    Variant { id: "A-5", appendix_id: "A-7", name: "v_proj only", apply: v_only },
    Variant {
        id: "A-6",
        appendix_id: "A-9",
        name: "w/o Masking + all attention projections",
        apply: unmasked_all_projections,
    },
    Variant { id: "A-7", appendix_id: "A-6", name: "q_proj only", apply: q_only },
    Variant { id: "A-8", appendix_id: "A-8", name: "All attention projections", apply: all_projections },
    Variant { id: "A-9", appendix_id: "A-1", name: "Full Echo-LoRA", apply: full },
];

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub id: String,
    pub appendix_id: String,
    pub name: String,
    /// Exact-match percentages rounded to one decimal, in task order.
    pub scores: Vec<(Task, f64)>,
    /// Mean of the rounded scores, itself rounded to one decimal.
    pub average: f64,
}

pub fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl AblationRow {
    /// Builds a row from raw accuracies in `[0, 1]`.
    pub fn new(variant: &Variant, accuracies: &[(Task, f64)]) -> Self {
        let scores: Vec<(Task, f64)> = accuracies.iter().map(|&(t, a)| (t, round1(a * 100.0))).collect();
        let average = if scores.is_empty() {
            0.0
        } else {
            round1(scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64)
        };
        AblationRow {
            id: variant.id.into(),
            appendix_id: variant.appendix_id.into(),
            name: variant.name.into(),
            scores,
            average,
        }
    }
}

/// Trains and evaluates each variant from a fresh init.
pub fn run_ablation(base: &RunConfig, variants: &[&Variant], out_dir: Option<&Path>) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        log::info!("ablation {} ({})", v.id, v.name);
        let cfg = v.apply(base);
        let dir = out_dir.map(|d| d.join(v.id));
        let outcome = train(&cfg, dir.as_deref())?;
        let accuracies: Vec<(Task, f64)> =
            cfg.data.tasks.iter().map(|t| (*t, outcome.summary.eval_accuracy.get(t).copied().unwrap_or(0.0))).collect();
        rows.push(AblationRow::new(v, &accuracies));
    }
    Ok(rows)
}

pub fn table_header(tasks: &[Task]) -> Vec<String> {
    let mut h = vec!["id".to_string(), "appendix_id".into(), "variant".into()];
    h.extend(tasks.iter().map(|t| t.to_string()));
    h.push("avg".into());
    h
}

pub fn write_table_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let tasks: Vec<Task> = rows.first().map(|r| r.scores.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path).map_err(|e| HarnessError::Metrics(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| HarnessError::Metrics(e.to_string());
    w.write_record(table_header(&tasks)).map_err(err)?;
    for r in rows {
        let mut rec = vec![r.id.clone(), r.appendix_id.clone(), r.name.clone()];
        rec.extend(r.scores.iter().map(|(_, s)| format!("{s:.1}")));
        rec.push(format!("{:.1}", r.average));
        w.write_record(&rec).map_err(err)?;
    }
    w.flush().map_err(io_err(path))
}

/// Fixed-width text rendering for the terminal.
pub fn render_table(rows: &[AblationRow]) -> String {
    let tasks: Vec<Task> = rows.first().map(|r| r.scores.iter().map(|(t, _)| *t).collect()).unwrap_or_default();
    let header = table_header(&tasks);
    let widths: Vec<usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| match i {
            2 => rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(h.len()),
            _ => h.len().max(5),
        })
        .collect();
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 2 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&header, &mut out);
    for r in rows {
        let mut cells = vec![r.id.clone(), r.appendix_id.clone(), r.name.clone()];
        cells.extend(r.scores.iter().map(|(_, s)| format!("{s:.1}")));
        cells.push(format!("{:.1}", r.average));
        line(&cells, &mut out);
    }
    out
}
