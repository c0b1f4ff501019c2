//! One function per subcommand. Each loads inputs, runs the core pipeline,
//! writes artifacts plus a provenance record, and prints a single summary
//! line on stdout.

use crate::config::RunConfig;
use crate::data;
use crate::run::{write_provenance, OutDir};
use prunekit_core::arch::ArchConfig;
use prunekit_core::compress::{
    combined_ratio, dense_storage_bytes, kmeans_quantize, magnitude_prune, render_multiple,
    storage_bytes, CompressedLayerStore,
};
use prunekit_core::io::compressed::{save_compressed, Manifest, ManifestEntry};
use prunekit_core::io::model::{load_model, save_model};
use prunekit_core::io::text::{write_json, write_trace_csv, write_trace_json};
use prunekit_core::network::{evaluate_accuracy, LayerOp, Network};
use prunekit_core::pruner::{greedy_prune, FineTuneMode, PruneConfig};
use prunekit_core::report::{
    build_curve, layer_reports, per_class_compare, random_baseline, top_patches, write_baseline_csv,
    write_curve_csv, write_per_class_csv, PatchReport, Report, PATCHES_SCHEMA, REPORT_SCHEMA,
};
use prunekit_core::train::{train_sgd, train_sgd_masked, WeightMasks};
use prunekit_core::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

fn load_arch(name_or_path: &str) -> Result<ArchConfig> {
    match ArchConfig::preset(name_or_path) {
        Ok(arch) => Ok(arch),
        Err(preset_err) => {
            let path = Path::new(name_or_path);
            if path.exists() {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
                ArchConfig::parse(&text)
            } else {
                Err(preset_err)
            }
        }
    }
}

fn out_dir(cfg: &RunConfig) -> Result<OutDir> {
    let path = cfg
        .out
        .as_ref()
        .ok_or_else(|| Error::config("this command needs 'out' (or --out DIR)"))?;
    OutDir::acquire(path)
}

fn read_json_file<V: serde::de::DeserializeOwned>(path: &Path) -> Result<V> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text)
        .map_err(|e| Error::format_at(path, format!("json: {e}")))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let section = RunConfig::require(&cfg.train, "train")?;
    let out = out_dir(cfg)?;
    let splits = data::resolve_config(cfg)?;
    let train = splits.train()?;

    let arch = load_arch(&section.arch)?;
    let net = Network::<f32>::from_arch(&arch, cfg.seed)?;
    let (trained, log) = train_sgd(&net, train, &section.sgd(cfg.seed))?;

    save_model(&trained, out.file("model.pkm"))?;
    write_json(&log, out.file("train_log.json"))?;
    write_provenance(&out, "train", cfg, &["model.pkm", "train_log.json"])?;

    let final_loss = log.epoch_loss.last().copied().unwrap_or(f64::NAN);
    let mut line = format!(
        "model={} epochs={} final_loss={final_loss:.6}",
        out.file("model.pkm").display(),
        section.epochs
    );
    if let Ok(eval) = splits.eval(cfg.eval_split) {
        let acc = evaluate_accuracy(&trained, eval)?;
        line.push_str(&format!(" accuracy={acc:.4} split={}", cfg.eval_split));
    }
    println!("{line}");
    Ok(())
}

pub fn cmd_prune(cfg: &RunConfig) -> Result<()> {
    let section = RunConfig::require(&cfg.prune, "prune")?;
    let out = out_dir(cfg)?;
    let splits = data::resolve_config(cfg)?;
    let eval = splits.eval(cfg.eval_split)?;
    let net = load_model::<f32>(&section.model)?;

    let sgd = match (section.fine_tune, &cfg.train) {
        (FineTuneMode::Off, _) => None,
        (_, Some(t)) => Some(t.sgd(cfg.seed)),
        (_, None) => unreachable!("validated in RunConfig::validate"),
    };
    let prune_cfg = PruneConfig {
        layer_id: section.layer_id.clone(),
        target_ratio: section.target_ratio,
        index: section.index,
        fine_tune: section.fine_tune,
        sgd,
        seed: cfg.seed,
        eval_split: cfg.eval_split,
    };
    let train = if section.fine_tune == FineTuneMode::Off {
        None
    } else {
        Some(splits.train()?)
    };
    let (pruned, trace) = greedy_prune(&net, &prune_cfg, eval, train)?;

    save_model(&pruned, out.file("pruned.pkm"))?;
    write_trace_csv(&trace, out.file("trace.csv"))?;
    write_trace_json(&trace, out.file("trace.json"))?;
    write_provenance(&out, "prune", cfg, &["pruned.pkm", "trace.csv", "trace.json"])?;

    let kept = prunekit_core::pruner::conv_filter_count(&pruned, &section.layer_id)?;
    let ratio = prunekit_core::pruner::structural_ratio(trace.n_original, kept)?;
    println!(
        "pruned={} layer={} kept={kept} ratio={}",
        out.file("pruned.pkm").display(),
        section.layer_id,
        ratio.render()
    );
    Ok(())
}

/// Layers that own a weight tensor, in network order.
fn weight_layer_ids(net: &Network<f32>) -> Vec<String> {
    let mut ids = Vec::new();
    for layer in &net.layers {
        match &layer.op {
            LayerOp::Conv { .. } | LayerOp::Affine { .. } => ids.push(layer.id.clone()),
            LayerOp::Residual { branch2 } => {
                for inner in branch2 {
                    if matches!(inner.op, LayerOp::Conv { .. } | LayerOp::Affine { .. }) {
                        ids.push(inner.id.clone());
                    }
                }
            }
            _ => {}
        }
    }
    ids
}

fn weights_of<'n>(net: &'n Network<f32>, id: &str) -> Result<&'n prunekit_core::tensor::Tensor<f32>> {
    fn walk<'n>(layers: &'n [prunekit_core::network::Layer<f32>], id: &str) -> Option<&'n prunekit_core::tensor::Tensor<f32>> {
        for layer in layers {
            match &layer.op {
                LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. }
                    if layer.id == id =>
                {
                    return Some(weights)
                }
                LayerOp::Residual { branch2 } => {
                    if let Some(w) = walk(branch2, id) {
                        return Some(w);
                    }
                }
                _ => {}
            }
        }
        None
    }
    walk(&net.layers, id).ok_or_else(|| Error::LayerNotFound(id.to_string()))
}

fn set_weights(net: &mut Network<f32>, id: &str, new: prunekit_core::tensor::Tensor<f32>) -> Result<()> {
    fn walk(layers: &mut [prunekit_core::network::Layer<f32>], id: &str, new: &mut Option<prunekit_core::tensor::Tensor<f32>>) {
        for layer in layers {
            match &mut layer.op {
                LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. }
                    if layer.id == id =>
                {
                    if let Some(t) = new.take() {
                        *weights = t;
                    }
                    return;
                }
                LayerOp::Residual { branch2 } => walk(branch2, id, new),
                _ => {}
            }
        }
    }
    let mut slot = Some(new);
    walk(&mut net.layers, id, &mut slot);
    if slot.is_some() {
        return Err(Error::LayerNotFound(id.to_string()));
    }
    net.validate()
}

pub fn cmd_compress(cfg: &RunConfig) -> Result<()> {
    let section = RunConfig::require(&cfg.compress, "compress")?;
    let out = out_dir(cfg)?;
    let original = load_model::<f32>(&section.model)?;

    let layer_ids = match &section.layers {
        Some(ids) => ids.clone(),
        None => weight_layer_ids(&original),
    };
    if layer_ids.is_empty() {
        return Err(Error::config("[compress] no layers with weight tensors selected"));
    }

    // stage 1: magnitude pruning
    let mut working = original.clone();
    for id in &layer_ids {
        let pruned = magnitude_prune(weights_of(&working, id)?, section.sparsity)?;
        set_weights(&mut working, id, pruned)?;
    }

    // optional masked retraining so survivors recover while zeros stay zero
    if section.retrain {
        let train_section = RunConfig::require(&cfg.train, "train")?;
        let splits = data::resolve_config(cfg)?;
        let ids: Vec<&str> = layer_ids.iter().map(String::as_str).collect();
        let masks = WeightMasks::from_zeros(&working, &ids)?;
        let (retrained, _) =
            train_sgd_masked(&working, splits.train()?, &train_section.sgd(cfg.seed), &masks)?;
        working = retrained;
    }

    // stage 2: codebook quantization + exact byte accounting
    let mut stores: BTreeMap<String, CompressedLayerStore> = BTreeMap::new();
    let mut entries = Vec::new();
    for id in &layer_ids {
        let weights = weights_of(&working, id)?;
        let store = kmeans_quantize(weights, id, section.code_bits, section.idx_bits)?;
        let stored = storage_bytes(&store);
        entries.push(ManifestEntry {
            layer_id: id.clone(),
            original_dense_bytes: dense_storage_bytes(weights.len()),
            stored_bytes: stored,
            combined_ratio: combined_ratio(&original, id, stored)?,
        });
        stores.insert(id.clone(), store);
    }
    let manifest = Manifest::from_entries(entries);

    save_compressed(&working, &stores, &manifest, out.file("model.pkc"))?;
    write_json(&manifest, out.file("manifest.json"))?;
    write_provenance(&out, "compress", cfg, &["model.pkc", "manifest.json"])?;

    println!(
        "compressed={} layers={} total_ratio={}",
        out.file("model.pkc").display(),
        layer_ids.len(),
        render_multiple(manifest.total_ratio)
    );
    Ok(())
}

pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    let section = RunConfig::require(&cfg.report, "report")?;
    let out = out_dir(cfg)?;
    let splits = data::resolve_config(cfg)?;
    let eval = splits.eval(cfg.eval_split)?;

    let net_a = load_model::<f32>(&section.model_a)?;
    let net_b = match &section.model_b {
        Some(path) => load_model::<f32>(path)?,
        None => net_a.clone(),
    };

    let mut artifacts: Vec<String> = Vec::new();

    if let Some(trace_path) = &section.trace {
        let trace: prunekit_core::pruner::ImportanceTrace = read_json_file(trace_path)?;
        let curve = build_curve(&trace)?;
        write_curve_csv(&curve, out.file("curve.csv"))?;
        artifacts.push("curve.csv".into());
    }

    if let (Some(ratios), Some(layer)) = (&section.baseline_ratios, &section.baseline_layer) {
        let stats =
            random_baseline(&net_a, layer, ratios, section.baseline_repeats, eval, cfg.seed)?;
        write_baseline_csv(&stats, out.file("baseline.csv"))?;
        artifacts.push("baseline.csv".into());
    }

    if let Some(layer) = &section.patches_layer {
        let records = top_patches(&net_b, layer, eval, section.patches_k)?;
        let report = PatchReport {
            schema: PATCHES_SCHEMA.to_string(),
            layer_id: layer.clone(),
            k: section.patches_k,
            eval_split: eval.split,
            eval_size: eval.len(),
            records,
        };
        write_json(&report, out.file("patches.json"))?;
        artifacts.push("patches.json".into());
    }

    let per_class = per_class_compare(&net_a, &net_b, eval)?;
    write_per_class_csv(&per_class, out.file("per_class.csv"))?;
    artifacts.push("per_class.csv".into());

    let byte_accounting: Option<Manifest> = match &section.manifest {
        Some(path) => Some(read_json_file(path)?),
        None => None,
    };

    let report = Report {
        schema: REPORT_SCHEMA.to_string(),
        seed: cfg.seed,
        eval_split: cfg.eval_split,
        eval_size: eval.len(),
        baseline_accuracy: evaluate_accuracy(&net_a, eval)?,
        final_accuracy: evaluate_accuracy(&net_b, eval)?,
        layers: layer_reports(&net_a, &net_b)?,
        byte_accounting,
        per_class: Some(per_class),
        artifacts: artifacts.clone(),
    };
    write_json(&report, out.file("report.json"))?;
    artifacts.push("report.json".into());

    let names: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    write_provenance(&out, "report", cfg, &names)?;
    println!("report={}", out.file("report.json").display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let section = RunConfig::require(&cfg.eval, "eval")?;
    let splits = data::resolve_config(cfg)?;
    let eval = splits.eval(cfg.eval_split)?;
    let net = load_model::<f32>(&section.model)?;
    let accuracy = evaluate_accuracy(&net, eval)?;
    println!(
        "accuracy={accuracy:.6} split={} n={} model={}",
        cfg.eval_split,
        eval.len(),
        section.model.display()
    );
    if cfg.out.is_some() {
        let out = out_dir(cfg)?;
        write_provenance(&out, "eval", cfg, &[])?;
    }
    Ok(())
}
