//! CSV renderings of training and evaluation diagnostics. Numbers use the
//! shortest round-trip decimal form, so identical runs give identical bytes.

use crate::error::{Result, SereError};
use crate::trainer::{EpochRecord, EvalReport, TrainOutcome};

pub const IRF_BINS: usize = 20;

fn write_rows(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| SereError::Format(e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| SereError::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("utf-8 fields"))
}

pub fn losses_csv(records: &[EpochRecord]) -> Result<String> {
    write_rows(
        &["epoch", "L_proto", "L_dual", "L_total"],
        records.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.loss.proto.to_string(),
                r.loss.dual.to_string(),
                r.loss.total.to_string(),
            ]
        }),
    )
}

/// One row per epoch and unlabeled target sample.
pub fn pseudo_labels_csv(outcome: &TrainOutcome, target_ids: &[String], classes: &[String]) -> Result<String> {
    let mut rows = Vec::new();
    for r in &outcome.epochs {
        for p in &r.pseudo {
            rows.push(vec![
                r.epoch.to_string(),
                target_ids[p.target].clone(),
                outcome.references[p.anchor].utterance.id.clone(),
                classes[p.label].clone(),
                p.irf.to_string(),
            ]);
        }
    }
    write_rows(&["epoch", "id", "anchor", "label", "irf"], rows)
}

/// Bin index of an IRF value over [-1, 1]; the top edge joins the last bin.
pub fn irf_bin(value: f64) -> usize {
    let pos = ((value + 1.0) / 2.0 * IRF_BINS as f64).floor();
    (pos.max(0.0) as usize).min(IRF_BINS - 1)
}

/// Per-epoch histogram of the IRF scores behind every pseudo-anchor and dual reference.
pub fn irf_histogram_csv(records: &[EpochRecord]) -> Result<String> {
    let mut rows = Vec::new();
    for r in records {
        let mut counts = [0usize; IRF_BINS];
        for &v in &r.irf_values {
            counts[irf_bin(v)] += 1;
        }
        for (b, n) in counts.iter().enumerate() {
            let lo = -1.0 + 2.0 * b as f64 / IRF_BINS as f64;
            let hi = -1.0 + 2.0 * (b + 1) as f64 / IRF_BINS as f64;
            rows.push(vec![r.epoch.to_string(), lo.to_string(), hi.to_string(), n.to_string()]);
        }
    }
    write_rows(&["epoch", "bin_lo", "bin_hi", "count"], rows)
}

/// One row per fold and class with a true sample, then a `mean` row.
pub fn eval_csv(reports: &[EvalReport], classes: &[String]) -> Result<String> {
    let mut rows = Vec::new();
    for r in reports {
        for (c, recall) in r.recall.iter().enumerate() {
            if let Some(recall) = recall {
                rows.push(vec![r.fold.to_string(), classes[c].clone(), recall.to_string(), r.uar.to_string()]);
            }
        }
    }
    if !reports.is_empty() {
        let mean = reports.iter().map(|r| r.uar).sum::<f64>() / reports.len() as f64;
        rows.push(vec!["mean".into(), String::new(), String::new(), mean.to_string()]);
    }
    write_rows(&["fold", "class", "recall", "uar"], rows)
}
