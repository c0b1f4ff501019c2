//! CSV and JSON exports: greedy-prune traces and schema-versioned JSON
//! documents. CSV goes through the `csv` crate, so quoting is RFC-compliant
//! and the header row is always present.

use super::io_err;
use crate::error::{Error, Result};
use crate::pruner::ImportanceTrace;
use serde::Serialize;
use std::path::Path;

/// One row per greedy iteration, every trace field included. The score
/// vector rides in one cell as `index:value` pairs joined by `;`.
pub fn write_trace_csv(trace: &ImportanceTrace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record([
        "layer_id",
        "n_original",
        "index",
        "eval_split",
        "eval_size",
        "seed",
        "iteration",
        "pruned_filter",
        "n_iter",
        "r_iter",
        "accuracy_after_prune",
        "accuracy_after_fine_tune",
        "scores",
    ])
    .map_err(|e| csv_err(path, e))?;
    for rec in &trace.records {
        let scores = rec
            .scores
            .iter()
            .map(|s| format!("{}:{}", s.filter.index, s.value))
            .collect::<Vec<_>>()
            .join(";");
        w.write_record([
            trace.layer_id.as_str(),
            &trace.n_original.to_string(),
            trace.index.as_str(),
            &trace.eval_split.to_string(),
            &trace.eval_size.to_string(),
            &trace.seed.to_string(),
            &rec.iteration.to_string(),
            &rec.pruned.index.to_string(),
            &rec.n_iter.to_string(),
            &rec.r_iter.to_string(),
            &rec.accuracy_after_prune.to_string(),
            &rec.accuracy_after_fine_tune.map(|a| a.to_string()).unwrap_or_default(),
            &scores,
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_trace_json(trace: &ImportanceTrace, path: impl AsRef<Path>) -> Result<()> {
    write_json(trace, path)
}

/// Pretty-printed JSON plus trailing newline; output depends only on the
/// value, so identical runs produce identical bytes.
pub fn write_json<V: Serialize>(value: &V, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(format!("json serialization: {e}")))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path, io),
        other => Error::format_at(path, format!("csv: {other:?}")),
    }
}
