//! Analysis artifacts: accuracy-vs-ratio curves, random-pruning baselines,
//! top-activating patches, and per-class accuracy comparisons. Everything
//! here is derived from persisted inputs (models, traces, datasets, seeds)
//! so a report can be regenerated byte-for-byte.

use crate::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::importance::{FilterRef, IndexKind};
use crate::io::compressed::Manifest;
use crate::io::io_err;
use crate::network::{evaluate_accuracy, per_class_accuracy, LayerOp, Network};
use crate::pruner::{greedy_prune, FineTuneMode, ImportanceTrace, PruneConfig, StructuralRatio};
use crate::scalar::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const REPORT_SCHEMA: &str = "prunekit-report-v1";
pub const PATCHES_SCHEMA: &str = "prunekit-patches-v1";

// ---------------------------------------------------------------------------
// Accuracy-vs-ratio curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub ratio: f64,
    pub n_kept: usize,
    pub accuracy: f64,
    pub index: IndexKind,
    pub fine_tuned: bool,
    pub seed: u64,
}

/// One point per greedy iteration, straight from the trace. Fine-tuned
/// accuracy wins when the iteration had one.
pub fn build_curve(trace: &ImportanceTrace) -> Result<Vec<CurvePoint>> {
    trace.check()?;
    Ok(trace
        .records
        .iter()
        .map(|rec| CurvePoint {
            ratio: rec.r_iter,
            n_kept: rec.n_iter,
            accuracy: rec.accuracy_after_fine_tune.unwrap_or(rec.accuracy_after_prune),
            index: trace.index,
            fine_tuned: rec.accuracy_after_fine_tune.is_some(),
            seed: trace.seed,
        })
        .collect())
}

pub fn write_curve_csv(points: &[CurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Random-pruning baseline
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineStat {
    pub ratio: f64,
    pub n_kept: usize,
    pub mean: f64,
    /// Sample standard deviation (n−1 denominator); 0 when degenerate.
    pub std: f64,
    /// True when repeats < 2, making the spread meaningless.
    pub degenerate: bool,
    pub accuracies: Vec<f64>,
}

/// Repeatedly prune `layer_id` with the uniform-random index at each target
/// ratio and report accuracy spread.
pub fn random_baseline<T: Scalar>(
    net: &Network<T>,
    layer_id: &str,
    ratios: &[f64],
    repeats: usize,
    eval: &Dataset<T>,
    seed: u64,
) -> Result<Vec<BaselineStat>> {
    if repeats == 0 {
        return Err(Error::invalid("random_baseline", "repeats must be >= 1"));
    }
    let mut out = Vec::with_capacity(ratios.len());
    for &ratio in ratios {
        let mut accuracies = Vec::with_capacity(repeats);
        let mut n_kept = 0;
        for rep in 0..repeats {
            let cfg = PruneConfig {
                layer_id: layer_id.to_string(),
                target_ratio: ratio,
                index: IndexKind::Random,
                fine_tune: FineTuneMode::Off,
                sgd: None,
                seed: seed.wrapping_mul(2654435761).wrapping_add(rep as u64),
                eval_split: eval.split,
            };
            let (pruned, _trace) = greedy_prune(net, &cfg, eval, None)?;
            n_kept = crate::pruner::conv_filter_count(&pruned, layer_id)?;
            accuracies.push(evaluate_accuracy(&pruned, eval)?);
        }
        // a constant sample (e.g. ratio 1, where pruning is a no-op) gets the
        // exact value rather than a sum/divide round trip
        let constant = accuracies.windows(2).all(|w| w[0] == w[1]);
        let mean = if constant {
            accuracies[0]
        } else {
            accuracies.iter().sum::<f64>() / repeats as f64
        };
        let std = if repeats < 2 || constant {
            0.0
        } else {
            let var =
                accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
            var.sqrt()
        };
        out.push(BaselineStat {
            ratio,
            n_kept,
            mean,
            std,
            degenerate: repeats < 2,
            accuracies,
        });
    }
    Ok(out)
}

pub fn write_baseline_csv(stats: &[BaselineStat], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    w.write_record(["ratio", "n_kept", "mean", "std", "degenerate", "accuracies"])
        .map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    for s in stats {
        let accs = s.accuracies.iter().map(f64::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            &s.ratio.to_string(),
            &s.n_kept.to_string(),
            &s.mean.to_string(),
            &s.std.to_string(),
            &s.degenerate.to_string(),
            &accs,
        ])
        .map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Top-activating patches
// ---------------------------------------------------------------------------

/// Geometry of one unit's view of the input plane: unit (r, c) sees the
/// square starting at (r·jump + start, c·jump + start) with side `size`
/// (edges may poke past the image when the path was padded).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub size: usize,
    pub jump: usize,
    pub start: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchEntry {
    pub example: usize,
    pub row: usize,
    pub col: usize,
    pub activation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub filter: FilterRef,
    pub receptive_field: ReceptiveField,
    /// Descending by activation; ties resolved toward the lower example
    /// index, then the lower row-major location.
    pub entries: Vec<PatchEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchReport {
    pub schema: String,
    pub layer_id: String,
    pub k: usize,
    pub eval_split: SplitTag,
    pub eval_size: usize,
    pub records: Vec<PatchRecord>,
}

/// Receptive-field geometry of a conv layer's output units, walked from the
/// input through that layer (branch2 members included at their position).
pub fn receptive_field<T: Scalar>(net: &Network<T>, layer_id: &str) -> Result<ReceptiveField> {
    let mut rf = ReceptiveField { size: 1, jump: 1, start: 0 };
    fn absorb(rf: &mut ReceptiveField, kernel: usize, stride: usize, padding: usize) {
        rf.size += (kernel - 1) * rf.jump;
        rf.start -= (padding * rf.jump) as i64;
        rf.jump *= stride;
    }
    for layer in &net.layers {
        match &layer.op {
            LayerOp::Conv { weights, params, .. } => {
                absorb(&mut rf, weights.shape()[2], params.stride, params.padding);
                if layer.id == layer_id {
                    return Ok(rf);
                }
            }
            LayerOp::MaxPool { window, stride } => absorb(&mut rf, *window, *stride, 0),
            LayerOp::Residual { branch2 } => {
                // the add forces identical spatial geometry on both paths, so
                // walking the branch keeps jump consistent and grows size
                let mut inner_rf = rf;
                let mut hit = false;
                for inner in branch2 {
                    if let LayerOp::Conv { weights, params, .. } = &inner.op {
                        absorb(&mut inner_rf, weights.shape()[2], params.stride, params.padding);
                        if inner.id == layer_id {
                            hit = true;
                            break;
                        }
                    }
                }
                if hit {
                    return Ok(inner_rf);
                }
                rf = inner_rf;
            }
            LayerOp::Flatten | LayerOp::Affine { .. } | LayerOp::Relu => {}
        }
        if layer.id == layer_id {
            return Err(Error::invalid(
                "top_patches",
                format!("layer '{layer_id}' is not a conv layer"),
            ));
        }
    }
    Err(Error::LayerNotFound(layer_id.to_string()))
}

fn better(a: &PatchEntry, b: &PatchEntry) -> std::cmp::Ordering {
    a.activation
        .total_cmp(&b.activation)
        .reverse()
        .then(a.example.cmp(&b.example))
        .then(a.row.cmp(&b.row))
        .then(a.col.cmp(&b.col))
}

/// For each filter of `layer_id`, the k highest post-relu activations over
/// every example and spatial location of `data`.
pub fn top_patches<T: Scalar>(
    net: &Network<T>,
    layer_id: &str,
    data: &Dataset<T>,
    k: usize,
) -> Result<Vec<PatchRecord>> {
    if k == 0 {
        return Err(Error::invalid("top_patches", "k must be >= 1"));
    }
    if data.is_empty() {
        return Err(Error::EmptyDataset { op: "top_patches" });
    }
    let rf = receptive_field(net, layer_id)?;
    let n_filters = crate::pruner::conv_filter_count(net, layer_id)?;

    // per-example candidate lists, computed in parallel, merged in order
    let per_example: Vec<Vec<Vec<PatchEntry>>> = (0..data.len())
        .into_par_iter()
        .map(|i| -> Result<Vec<Vec<PatchEntry>>> {
            let outputs = net.forward_trace(data.image(i))?;
            let act = outputs
                .iter()
                .find(|(id, _)| id == layer_id)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::LayerNotFound(layer_id.to_string()))?;
            let (h, w) = (act.shape()[1], act.shape()[2]);
            let mut tops: Vec<Vec<PatchEntry>> = vec![Vec::new(); n_filters];
            for f in 0..n_filters {
                let top = &mut tops[f];
                for r in 0..h {
                    for c in 0..w {
                        let v = act.at(&[f, r, c]).to_acc().max(0.0);
                        let entry = PatchEntry { example: i, row: r, col: c, activation: v };
                        if top.len() < k {
                            top.push(entry);
                            top.sort_by(better);
                        } else if better(&entry, top.last().unwrap()).is_lt() {
                            *top.last_mut().unwrap() = entry;
                            top.sort_by(better);
                        }
                    }
                }
            }
            Ok(tops)
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(n_filters);
    for f in 0..n_filters {
        let mut all: Vec<PatchEntry> =
            per_example.iter().flat_map(|tops| tops[f].iter().cloned()).collect();
        all.sort_by(better);
        all.truncate(k);
        records.push(PatchRecord {
            filter: FilterRef::new(layer_id, f),
            receptive_field: rf,
            entries: all,
        });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Per-class comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub accuracy_a: f64,
    pub accuracy_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassComparison {
    pub rows: Vec<ClassRow>,
    /// Fraction of (present) classes where b is within 3 points of a.
    pub fraction_within_3pt: f64,
    pub absent_classes: Vec<usize>,
}

pub fn per_class_compare<T: Scalar>(
    net_a: &Network<T>,
    net_b: &Network<T>,
    test: &Dataset<T>,
) -> Result<PerClassComparison> {
    let a = per_class_accuracy(net_a, test)?;
    let b = per_class_accuracy(net_b, test)?;
    let mut rows = Vec::new();
    let mut within = 0usize;
    for class in 0..test.class_count {
        match (a.accuracy_of(class), b.accuracy_of(class)) {
            (Some(acc_a), Some(acc_b)) => {
                if acc_b >= acc_a - 0.03 {
                    within += 1;
                }
                rows.push(ClassRow { class, accuracy_a: acc_a, accuracy_b: acc_b });
            }
            _ => {}
        }
    }
    let fraction = if rows.is_empty() { 1.0 } else { within as f64 / rows.len() as f64 };
    Ok(PerClassComparison {
        rows,
        fraction_within_3pt: fraction,
        absent_classes: a.absent.clone(),
    })
}

pub fn write_per_class_csv(cmp: &PerClassComparison, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    for row in &cmp.rows {
        w.serialize(row).map_err(|e| Error::format_at(path, format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Run report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub n_original: usize,
    pub n_kept: usize,
    pub exact: f64,
    pub rendered: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl From<StructuralRatio> for RatioReport {
    fn from(r: StructuralRatio) -> Self {
        RatioReport {
            n_original: r.n_original,
            n_kept: r.n_kept,
            exact: r.exact(),
            rendered: r.render(),
            note: r.rounding_note(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer_id: String,
    pub filters_before: usize,
    pub filters_after: usize,
    pub structural_ratio: RatioReport,
}

/// The one JSON document a run leaves behind: enough to rebuild every curve,
/// scatter, and table from files alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub seed: u64,
    pub eval_split: SplitTag,
    pub eval_size: usize,
    pub baseline_accuracy: f64,
    pub final_accuracy: f64,
    pub layers: Vec<LayerReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub byte_accounting: Option<Manifest>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<PerClassComparison>,
    pub artifacts: Vec<String>,
}

/// Compare conv layer filter counts between an original and a processed
/// network; layers the processed network no longer has (pruned branches)
/// are skipped.
pub fn layer_reports<T: Scalar>(original: &Network<T>, current: &Network<T>) -> Result<Vec<LayerReport>> {
    let after: std::collections::BTreeMap<String, usize> =
        current.conv_filter_counts().into_iter().collect();
    let mut out = Vec::new();
    for (id, n_before) in original.conv_filter_counts() {
        if let Some(&n_after) = after.get(&id) {
            let ratio = crate::pruner::structural_ratio(n_before, n_after)?;
            out.push(LayerReport {
                layer_id: id,
                filters_before: n_before,
                filters_after: n_after,
                structural_ratio: ratio.into(),
            });
        }
    }
    Ok(out)
}
