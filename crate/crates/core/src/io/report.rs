//! CSV outputs. Rows are ordered by fold, then class.

use std::path::Path;

use crate::error::Result;
use crate::io::write_atomic;
use crate::phantom::class_name;
use crate::training::eval::AblationRow;
use crate::training::{EvalReport, LossPoint};

pub const LOSS_HEADER: [&str; 3] = ["iteration", "loss", "lr"];
pub const EVAL_HEADER: [&str; 4] = ["fold", "class", "dice", "setting"];
pub const ABLATE_HEADER: [&str; 4] = ["n_blocks", "mode", "class", "dice"];

fn to_csv(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub fn loss_csv(curve: &[LossPoint]) -> Result<Vec<u8>> {
    to_csv(
        &LOSS_HEADER,
        curve
            .iter()
            .map(|p| vec![p.iteration.to_string(), format!("{:.8}", p.loss), format!("{:.8}", p.lr)]),
    )
}

/// Per-fold rows, then one `mean` fold row per class and an overall
/// `mean`/`mean` row.
pub fn eval_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let tag = report.setting.tag();
    let row = |fold: String, class: &str, d: f64| vec![fold, class.to_string(), format!("{d:.4}"), tag.to_string()];
    let mut rows = Vec::new();
    for f in &report.folds {
        for &(c, d) in &f.class_dice {
            rows.push(row(f.fold.to_string(), class_name(c), d));
        }
    }
    for &(c, d) in &report.per_class {
        rows.push(row("mean".into(), class_name(c), d));
    }
    rows.push(row("mean".into(), "mean", report.mean));
    to_csv(&EVAL_HEADER, rows)
}

pub fn ablate_csv(rows: &[AblationRow]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for r in rows {
        for &(c, d) in &r.per_class {
            out.push(vec![r.n_blocks.to_string(), r.mode.clone(), class_name(c).to_string(), format!("{d:.4}")]);
        }
        out.push(vec![r.n_blocks.to_string(), r.mode.clone(), "mean".into(), format!("{:.4}", r.mean)]);
    }
    to_csv(&ABLATE_HEADER, out)
}

/// Fixed-width table, one line per `(n_blocks, mode)`.
pub fn ablate_table(rows: &[AblationRow]) -> String {
    let classes: Vec<u8> = rows.first().map(|r| r.per_class.iter().map(|(c, _)| *c).collect()).unwrap_or_default();
    let mut s = format!("{:>8}  {:<13}", "n_blocks", "mode");
    for &c in &classes {
        s.push_str(&format!("  {:>7}", class_name(c)));
    }
    s.push_str(&format!("  {:>7}\n", "mean"));
    for r in rows {
        s.push_str(&format!("{:>8}  {:<13}", r.n_blocks, r.mode));
        for (_, d) in &r.per_class {
            s.push_str(&format!("  {d:>7.2}"));
        }
        s.push_str(&format!("  {:>7.2}\n", r.mean));
    }
    s
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}
