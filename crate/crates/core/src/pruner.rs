//! Filter surgery and the greedy pruning loop.
//!
//! Surgery removes output slice `i` of a conv layer plus whatever reads it:
//! a conv successor loses input-channel slice `i`; an affine successor after
//! a flatten loses the columns covering channel `i`'s spatial positions.
//! Relu/pool between them are channelwise and need no change.

use crate::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::importance::{score_layer, FilterRef, ImportanceScore, IndexKind};
use crate::network::{evaluate_accuracy, Layer, LayerOp, Network};
use crate::scalar::Scalar;
use crate::train::{train_sgd, SgdConfig};
use serde::{Deserialize, Serialize};

// ---------------------------------------------------------------------------
// Layer location and successor resolution
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Loc {
    Top(usize),
    Inner { block: usize, pos: usize },
}

fn locate<T: Scalar>(net: &Network<T>, id: &str) -> Result<Loc> {
    for (i, layer) in net.layers.iter().enumerate() {
        if layer.id == id {
            return Ok(Loc::Top(i));
        }
        if let LayerOp::Residual { branch2 } = &layer.op {
            for (j, inner) in branch2.iter().enumerate() {
                if inner.id == id {
                    return Ok(Loc::Inner { block: i, pos: j });
                }
            }
        }
    }
    Err(Error::LayerNotFound(id.to_string()))
}

fn layer_at<'n, T: Scalar>(net: &'n Network<T>, loc: Loc) -> &'n Layer<T> {
    match loc {
        Loc::Top(i) => &net.layers[i],
        Loc::Inner { block, pos } => match &net.layers[block].op {
            LayerOp::Residual { branch2 } => &branch2[pos],
            _ => unreachable!("Loc::Inner always points into a residual block"),
        },
    }
}

fn layer_at_mut<'n, T: Scalar>(net: &'n mut Network<T>, loc: Loc) -> &'n mut Layer<T> {
    match loc {
        Loc::Top(i) => &mut net.layers[i],
        Loc::Inner { block, pos } => match &mut net.layers[block].op {
            LayerOp::Residual { branch2 } => &mut branch2[pos],
            _ => unreachable!("Loc::Inner always points into a residual block"),
        },
    }
}

pub(crate) fn conv_layer_mut<'n, T: Scalar>(
    net: &'n mut Network<T>,
    id: &str,
) -> Result<&'n mut Layer<T>> {
    let loc = locate(net, id)?;
    let layer = layer_at_mut(net, loc);
    match layer.op {
        LayerOp::Conv { .. } => Ok(layer),
        _ => Err(Error::invalid("pruner", format!("layer '{id}' is not a conv layer"))),
    }
}

/// Current filter count of a conv layer (top level or inside a block).
pub fn conv_filter_count<T: Scalar>(net: &Network<T>, id: &str) -> Result<usize> {
    let loc = locate(net, id)?;
    match &layer_at(net, loc).op {
        LayerOp::Conv { bias, .. } => Ok(bias.len()),
        _ => Err(Error::invalid("pruner", format!("layer '{id}' is not a conv layer"))),
    }
}

pub(crate) fn check_filter_ref<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<()> {
    let n = conv_filter_count(net, &f.layer_id)?;
    if f.index >= n {
        return Err(Error::invalid(
            "pruner",
            format!("filter {} out of range for layer '{}' ({n} filters)", f.index, f.layer_id),
        ));
    }
    Ok(())
}

/// What reads the target conv's output channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Successor {
    Conv(Loc),
    /// Affine reached through a flatten; `spatial` is the HxW extent of one
    /// channel at the flatten, i.e. channel i owns columns
    /// [i*spatial, (i+1)*spatial).
    Affine { layer: usize, spatial: usize },
}

fn find_successor<T: Scalar>(net: &Network<T>, loc: Loc) -> Result<Successor> {
    match loc {
        Loc::Inner { block, pos } => {
            let branch2 = match &net.layers[block].op {
                LayerOp::Residual { branch2 } => branch2,
                _ => unreachable!(),
            };
            for (q, inner) in branch2.iter().enumerate().skip(pos + 1) {
                match &inner.op {
                    LayerOp::Conv { .. } => return Ok(Successor::Conv(Loc::Inner { block, pos: q })),
                    LayerOp::Relu => {}
                    other => {
                        return Err(Error::invalid(
                            "prune_surgery",
                            format!("unexpected {:?} inside a residual branch", std::mem::discriminant(other)),
                        ))
                    }
                }
            }
            Err(Error::invalid(
                "prune_surgery",
                format!(
                    "layer '{}' is the last conv of a residual branch; its output shape is \
                     pinned by the identity add (prune the whole branch instead)",
                    branch2[pos].id
                ),
            ))
        }
        Loc::Top(li) => {
            // spatial extent of one channel right before a flatten
            let mut shapes = vec![net.input_shape.clone()];
            shapes.extend(net.layer_output_shapes()?);
            for (j, layer) in net.layers.iter().enumerate().skip(li + 1) {
                match &layer.op {
                    LayerOp::Conv { .. } => return Ok(Successor::Conv(Loc::Top(j))),
                    LayerOp::Relu | LayerOp::MaxPool { .. } | LayerOp::Flatten => {}
                    LayerOp::Affine { .. } => {
                        // shape entering the flatten that precedes this affine
                        let flat_at = net.layers[li + 1..j]
                            .iter()
                            .position(|l| matches!(l.op, LayerOp::Flatten))
                            .map(|p| p + li + 1)
                            .ok_or_else(|| {
                                Error::invalid(
                                    "prune_surgery",
                                    format!(
                                        "affine '{}' follows conv '{}' without a flatten",
                                        layer.id, net.layers[li].id
                                    ),
                                )
                            })?;
                        let before_flatten = &shapes[flat_at];
                        let spatial = before_flatten[1] * before_flatten[2];
                        return Ok(Successor::Affine { layer: j, spatial });
                    }
                    LayerOp::Residual { .. } => {
                        return Err(Error::invalid(
                            "prune_surgery",
                            format!(
                                "layer '{}' feeds residual block '{}'; removing a channel would \
                                 change the block's identity-path shape",
                                net.layers[li].id, layer.id
                            ),
                        ))
                    }
                }
            }
            Err(Error::invalid(
                "prune_surgery",
                format!("layer '{}' has no parameterized successor", net.layers[li].id),
            ))
        }
    }
}

/// Whether full structural removal is possible for this filter. False for
/// single-filter layers and shape-constrained positions; scoring falls back
/// to zero-masking there.
pub fn surgery_supported<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<bool> {
    check_filter_ref(net, f)?;
    if conv_filter_count(net, &f.layer_id)? < 2 {
        return Ok(false);
    }
    let loc = locate(net, &f.layer_id)?;
    Ok(find_successor(net, loc).is_ok())
}

// ---------------------------------------------------------------------------
// Weight views shared with the importance indices
// ---------------------------------------------------------------------------

/// Copy of filter f's own kernel entries.
pub(crate) fn incoming_weights<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<Vec<T>> {
    let loc = locate(net, &f.layer_id)?;
    match &layer_at(net, loc).op {
        LayerOp::Conv { weights, .. } => {
            let inner: usize = weights.shape()[1..].iter().product();
            Ok(weights.data()[f.index * inner..(f.index + 1) * inner].to_vec())
        }
        _ => Err(Error::invalid("pruner", format!("layer '{}' is not a conv layer", f.layer_id))),
    }
}

/// Copy of the successor weights that read channel f.index.
pub(crate) fn outgoing_weights<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<Vec<T>> {
    let loc = locate(net, &f.layer_id)?;
    let successor = find_successor(net, loc).map_err(|e| e.in_context("outgoing index"))?;
    match successor {
        Successor::Conv(sloc) => match &layer_at(net, sloc).op {
            LayerOp::Conv { weights, .. } => {
                let [f2, c, kh, kw] = [
                    weights.shape()[0],
                    weights.shape()[1],
                    weights.shape()[2],
                    weights.shape()[3],
                ];
                let mut out = Vec::with_capacity(f2 * kh * kw);
                for o in 0..f2 {
                    let start = (o * c + f.index) * kh * kw;
                    out.extend_from_slice(&weights.data()[start..start + kh * kw]);
                }
                Ok(out)
            }
            _ => unreachable!("successor resolution returns conv locations"),
        },
        Successor::Affine { layer, spatial } => match &net.layers[layer].op {
            LayerOp::Affine { weights, .. } => {
                let cols = weights.shape()[1];
                let (c0, c1) = (f.index * spatial, (f.index + 1) * spatial);
                let mut out = Vec::with_capacity(weights.shape()[0] * spatial);
                for u in 0..weights.shape()[0] {
                    out.extend_from_slice(&weights.data()[u * cols + c0..u * cols + c1]);
                }
                Ok(out)
            }
            _ => unreachable!("successor resolution returns affine locations"),
        },
    }
}

// ---------------------------------------------------------------------------
// Surgery
// ---------------------------------------------------------------------------

/// Remove filter `f` and its connections to the next parameterized layer,
/// returning a new, structurally smaller network.
pub fn prune_surgery<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<Network<T>> {
    check_filter_ref(net, f)?;
    let n = conv_filter_count(net, &f.layer_id)?;
    if n < 2 {
        return Err(Error::invalid(
            "prune_surgery",
            format!("layer '{}' has a single filter; removal would empty it", f.layer_id),
        ));
    }
    let loc = locate(net, &f.layer_id)?;
    let successor = find_successor(net, loc)?;

    let mut out = net.clone();
    {
        let target = layer_at_mut(&mut out, loc);
        match &mut target.op {
            LayerOp::Conv { weights, bias, .. } => {
                *weights = weights.remove_indices(0, &[f.index])?;
                *bias = bias.remove_indices(0, &[f.index])?;
            }
            _ => unreachable!("checked as conv above"),
        }
    }
    match successor {
        Successor::Conv(sloc) => {
            let succ = layer_at_mut(&mut out, sloc);
            match &mut succ.op {
                LayerOp::Conv { weights, .. } => {
                    *weights = weights.remove_indices(1, &[f.index])?;
                }
                _ => unreachable!(),
            }
        }
        Successor::Affine { layer, spatial } => {
            match &mut out.layers[layer].op {
                LayerOp::Affine { weights, .. } => {
                    let cols: Vec<usize> = (f.index * spatial..(f.index + 1) * spatial).collect();
                    *weights = weights.remove_indices(1, &cols)?;
                }
                _ => unreachable!(),
            }
        }
    }
    out.validate()?;
    Ok(out)
}

/// Replace a residual block with a relu passthrough — exactly what the block
/// computes once branch2 contributes nothing.
pub fn prune_branch<T: Scalar>(net: &Network<T>, block_id: &str) -> Result<Network<T>> {
    let idx = net.layer_index(block_id)?;
    if !matches!(net.layers[idx].op, LayerOp::Residual { .. }) {
        return Err(Error::invalid(
            "prune_branch",
            format!("layer '{block_id}' is not a residual block"),
        ));
    }
    let mut out = net.clone();
    out.layers[idx].op = LayerOp::Relu;
    out.validate()?;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Greedy loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FineTuneMode {
    EachIter,
    Final,
    Off,
}

impl Default for FineTuneMode {
    fn default() -> Self {
        FineTuneMode::Off
    }
}

impl std::str::FromStr for FineTuneMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "each-iter" => Ok(FineTuneMode::EachIter),
            "final" => Ok(FineTuneMode::Final),
            "off" => Ok(FineTuneMode::Off),
            other => Err(Error::invalid(
                "fine-tune mode",
                format!("unknown mode '{other}' (expected each-iter, final, or off)"),
            )),
        }
    }
}

fn default_eval_split() -> SplitTag {
    SplitTag::Validation
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneConfig {
    pub layer_id: String,
    /// Target ratio n_original / n_kept; 1 means "do nothing".
    pub target_ratio: f64,
    pub index: IndexKind,
    #[serde(default)]
    pub fine_tune: FineTuneMode,
    /// Fine-tuning hyperparameters; required unless fine_tune is off.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sgd: Option<SgdConfig>,
    pub seed: u64,
    #[serde(default = "default_eval_split")]
    pub eval_split: SplitTag,
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.target_ratio.is_finite() || self.target_ratio < 1.0 {
            return Err(Error::invalid("greedy_prune", "target_ratio must be >= 1"));
        }
        match (self.fine_tune, &self.sgd) {
            (FineTuneMode::Off, _) => Ok(()),
            (_, Some(sgd)) => sgd.validate(),
            (_, None) => Err(Error::invalid(
                "greedy_prune",
                "fine_tune enabled but no sgd section provided",
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub pruned: FilterRef,
    /// Full score vector, in current filter order, before this removal.
    pub scores: Vec<ImportanceScore>,
    pub accuracy_after_prune: f64,
    pub accuracy_after_fine_tune: Option<f64>,
    pub n_iter: usize,
    pub r_iter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceTrace {
    pub layer_id: String,
    pub n_original: usize,
    pub index: IndexKind,
    pub eval_split: SplitTag,
    pub eval_size: usize,
    pub seed: u64,
    pub records: Vec<TraceRecord>,
    /// Present when fine_tune = "final" ran after the loop.
    pub final_fine_tune_accuracy: Option<f64>,
}

impl ImportanceTrace {
    /// Structural invariants of a well-formed trace.
    pub fn check(&self) -> Result<()> {
        let mut prev_n = self.n_original;
        let mut prev_r = 0.0f64;
        for (t, rec) in self.records.iter().enumerate() {
            if rec.iteration != t + 1 {
                return Err(Error::invalid("trace", format!("iteration {} at row {t}", rec.iteration)));
            }
            if rec.n_iter != prev_n - 1 {
                return Err(Error::invalid(
                    "trace",
                    format!("n_iter {} after {prev_n} (must drop by exactly 1)", rec.n_iter),
                ));
            }
            if rec.r_iter <= prev_r {
                return Err(Error::invalid("trace", "r_iter must strictly increase"));
            }
            // scoring happened on the post-(t-1) network: one score per filter
            if rec.scores.len() != prev_n {
                return Err(Error::invalid(
                    "trace",
                    format!("iteration {} scored {} filters, expected {prev_n}", t + 1, rec.scores.len()),
                ));
            }
            prev_n = rec.n_iter;
            prev_r = rec.r_iter;
        }
        Ok(())
    }
}

/// Lowest score wins; ties go to the lowest filter index.
fn argmin_filter(scores: &[ImportanceScore]) -> usize {
    let mut best = 0usize;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if s.value < scores[best].value {
            best = i;
        }
    }
    best
}

/// The greedy loop: rescore, remove the least important filter,
/// optionally fine-tune, until the running ratio reaches the target.
pub fn greedy_prune<T: Scalar>(
    net: &Network<T>,
    cfg: &PruneConfig,
    eval: &Dataset<T>,
    train: Option<&Dataset<T>>,
) -> Result<(Network<T>, ImportanceTrace)> {
    cfg.validate()?;
    let n_original = conv_filter_count(net, &cfg.layer_id)?;
    if cfg.target_ratio > n_original as f64 {
        return Err(Error::invalid(
            "greedy_prune",
            format!(
                "target_ratio {} needs more than all {n_original} filters of '{}' removed",
                cfg.target_ratio, cfg.layer_id
            ),
        ));
    }
    let ft_train = if cfg.fine_tune == FineTuneMode::Off {
        None
    } else {
        Some(train.ok_or_else(|| {
            Error::invalid("greedy_prune", "fine_tune enabled but no training data supplied")
        })?)
    };

    let mut working = net.clone();
    let mut trace = ImportanceTrace {
        layer_id: cfg.layer_id.clone(),
        n_original,
        index: cfg.index,
        eval_split: eval.split,
        eval_size: eval.len(),
        seed: cfg.seed,
        records: Vec::new(),
        final_fine_tune_accuracy: None,
    };
    let mut n_iter = n_original;
    let mut r_iter = 1.0f64;
    let mut iteration = 0usize;
    while r_iter < cfg.target_ratio {
        iteration += 1;
        let scores = score_layer(
            &working,
            &cfg.layer_id,
            cfg.index,
            eval,
            cfg.seed.wrapping_add(iteration as u64),
        )?;
        let victim = FilterRef::new(cfg.layer_id.clone(), argmin_filter(&scores));
        working = prune_surgery(&working, &victim)?;
        let accuracy_after_prune = evaluate_accuracy(&working, eval)?;
        let accuracy_after_fine_tune = if cfg.fine_tune == FineTuneMode::EachIter {
            let mut sgd = *cfg.sgd.as_ref().expect("validated above");
            // vary the shuffle per iteration, still fully seeded
            sgd.seed = sgd.seed.wrapping_add(iteration as u64);
            let (tuned, _) = train_sgd(&working, ft_train.expect("validated above"), &sgd)?;
            working = tuned;
            Some(evaluate_accuracy(&working, eval)?)
        } else {
            None
        };
        n_iter -= 1;
        r_iter = n_original as f64 / n_iter as f64;
        trace.records.push(TraceRecord {
            iteration,
            pruned: victim,
            scores,
            accuracy_after_prune,
            accuracy_after_fine_tune,
            n_iter,
            r_iter,
        });
    }
    if cfg.fine_tune == FineTuneMode::Final && !trace.records.is_empty() {
        let sgd = cfg.sgd.as_ref().expect("validated above");
        let (tuned, _) = train_sgd(&working, ft_train.expect("validated above"), sgd)?;
        working = tuned;
        trace.final_fine_tune_accuracy = Some(evaluate_accuracy(&working, eval)?);
    }
    trace.check()?;
    Ok((working, trace))
}

/// Score once on the intact network and remove the k lowest together.
pub fn one_pass_prune<T: Scalar>(
    net: &Network<T>,
    layer_id: &str,
    k: usize,
    kind: IndexKind,
    eval: &Dataset<T>,
    seed: u64,
) -> Result<Network<T>> {
    let n = conv_filter_count(net, layer_id)?;
    if k == 0 || k >= n {
        return Err(Error::invalid(
            "one_pass_prune",
            format!("k must satisfy 1 <= k < {n}, got {k}"),
        ));
    }
    let scores = score_layer(net, layer_id, kind, eval, seed)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[a].value.total_cmp(&scores[b].value).then(a.cmp(&b))
    });
    let mut victims: Vec<usize> = order[..k].to_vec();
    // remove highest index first so earlier removals don't shift later ones
    victims.sort_unstable_by(|a, b| b.cmp(a));
    let mut working = net.clone();
    for &v in &victims {
        working = prune_surgery(&working, &FilterRef::new(layer_id, v))?;
    }
    Ok(working)
}

// ---------------------------------------------------------------------------
// Ratio accounting
// ---------------------------------------------------------------------------

/// Exact per-layer filter-count ratio with a fixed rendering rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralRatio {
    pub n_original: usize,
    pub n_kept: usize,
}

pub fn structural_ratio(n_original: usize, n_kept: usize) -> Result<StructuralRatio> {
    if n_kept == 0 || n_kept > n_original {
        return Err(Error::invalid(
            "structural_ratio",
            format!("need 1 <= n_kept <= n_original, got {n_kept} of {n_original}"),
        ));
    }
    Ok(StructuralRatio { n_original, n_kept })
}

impl StructuralRatio {
    pub fn exact(&self) -> f64 {
        self.n_original as f64 / self.n_kept as f64
    }

    /// Ratio in hundredths, round-half-up, computed in integers so rendering
    /// never depends on float formatting.
    pub fn hundredths(&self) -> u64 {
        let (n, k) = (self.n_original as u64, self.n_kept as u64);
        (200 * n + k) / (2 * k)
    }

    pub fn render(&self) -> String {
        let h = self.hundredths();
        format!("{}.{:02}", h / 100, h % 100)
    }

    /// Known cases where a published figure disagrees with this rounding
    /// rule; reports surface the note next to the computed value.
    pub fn rounding_note(&self) -> Option<String> {
        const KNOWN: &[(usize, usize, &str)] = &[(256, 154, "1.67")];
        KNOWN.iter().find(|&&(n, k, _)| n == self.n_original && k == self.n_kept).map(
            |&(_, _, printed)| {
                format!(
                    "{}/{} = {:.4} renders as {} under round-half-up; often quoted as {printed}",
                    self.n_original,
                    self.n_kept,
                    self.exact(),
                    self.render()
                )
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use crate::dataset::synth_dataset;
    use crate::network::predictions;
    use crate::tensor::Tensor;

    fn lenet_like() -> Network<f32> {
        Network::from_arch(&ArchConfig::preset("lenet-desk").unwrap(), 13).unwrap()
    }

    fn images(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let d = synth_dataset::<f32>(seed, n, 4, [1, 28, 28]).unwrap();
        (0..n).map(|i| d.image(i).clone()).collect()
    }

    #[test]
    fn surgery_shrinks_target_and_successor() {
        let net = lenet_like();
        let pruned = prune_surgery(&net, &FilterRef::new("conv1", 3)).unwrap();
        let (w1, b1) = match &pruned.layers[0].op {
            LayerOp::Conv { weights, bias, .. } => (weights, bias),
            _ => panic!(),
        };
        assert_eq!(w1.shape(), &[7, 1, 5, 5]);
        assert_eq!(b1.shape(), &[7]);
        let w2 = match &pruned.layers[3].op {
            LayerOp::Conv { weights, .. } => weights,
            _ => panic!(),
        };
        assert_eq!(w2.shape(), &[16, 7, 5, 5]);
        // parameter accounting: the target loses exactly 1/n of its params
        let (orig_w, orig_b) = match &net.layers[0].op {
            LayerOp::Conv { weights, bias, .. } => (weights.len(), bias.len()),
            _ => panic!(),
        };
        assert_eq!(w1.len(), orig_w * 7 / 8);
        assert_eq!(b1.len(), orig_b * 7 / 8);
        pruned.validate().unwrap();
    }

    #[test]
    fn retained_slices_are_bit_identical() {
        let net = lenet_like();
        let pruned = prune_surgery(&net, &FilterRef::new("conv1", 1)).unwrap();
        let (wo, wp) = match (&net.layers[0].op, &pruned.layers[0].op) {
            (LayerOp::Conv { weights: a, .. }, LayerOp::Conv { weights: b, .. }) => (a, b),
            _ => panic!(),
        };
        // filter 0 unchanged, filters 2.. shift down by one slot
        assert_eq!(&wo.data()[..25], &wp.data()[..25]);
        assert_eq!(&wo.data()[50..], &wp.data()[25..]);
        let (so, sp) = match (&net.layers[3].op, &pruned.layers[3].op) {
            (LayerOp::Conv { weights: a, .. }, LayerOp::Conv { weights: b, .. }) => (a, b),
            _ => panic!(),
        };
        // successor input slices: per output filter, channel 1 dropped
        for o in 0..16 {
            let orig = &so.data()[o * 8 * 25..(o * 8 + 1) * 25];
            let kept = &sp.data()[o * 7 * 25..(o * 7 + 1) * 25];
            assert_eq!(orig, kept);
            let orig_tail = &so.data()[(o * 8 + 2) * 25..(o + 1) * 8 * 25];
            let kept_tail = &sp.data()[(o * 7 + 1) * 25..(o + 1) * 7 * 25];
            assert_eq!(orig_tail, kept_tail);
        }
    }

    #[test]
    fn surgery_equals_zero_masking() {
        let net = lenet_like();
        for filter in [0, 5] {
            let f = FilterRef::new("conv1", filter);
            let pruned = prune_surgery(&net, &f).unwrap();
            let mut masked = net.clone();
            if let LayerOp::Conv { weights, bias, .. } = &mut masked.layers[0].op {
                for v in &mut weights.data_mut()[filter * 25..(filter + 1) * 25] {
                    *v = 0.0;
                }
                bias.data_mut()[filter] = 0.0;
            }
            for x in images(6, 31) {
                let a = pruned.forward(&x).unwrap();
                let b = masked.forward(&x).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
            }
        }
    }

    #[test]
    fn surgery_across_flatten_removes_the_right_columns() {
        // conv2 feeds fc1 through pool2+flatten; channel c owns 16 columns
        let net = lenet_like();
        let pruned = prune_surgery(&net, &FilterRef::new("conv2", 7)).unwrap();
        let (wo, wp) = match (&net.layers[7].op, &pruned.layers[7].op) {
            (LayerOp::Affine { weights: a, .. }, LayerOp::Affine { weights: b, .. }) => (a, b),
            _ => panic!(),
        };
        assert_eq!(wo.shape(), &[64, 256]);
        assert_eq!(wp.shape(), &[64, 240]);
        for u in 0..64 {
            assert_eq!(&wo.data()[u * 256..u * 256 + 7 * 16], &wp.data()[u * 240..u * 240 + 7 * 16]);
            assert_eq!(&wo.data()[u * 256 + 8 * 16..(u + 1) * 256], &wp.data()[u * 240 + 7 * 16..(u + 1) * 240]);
        }
        // and the semantics hold
        for x in images(4, 32) {
            let mut masked = net.clone();
            if let LayerOp::Conv { weights, bias, .. } = &mut masked.layers[3].op {
                for v in &mut weights.data_mut()[7 * 8 * 25..8 * 8 * 25] {
                    *v = 0.0;
                }
                bias.data_mut()[7] = 0.0;
            }
            let a = pruned.forward(&x).unwrap();
            let b = masked.forward(&x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }
    }

    #[test]
    fn zero_outgoing_filter_prunes_to_identical_logits() {
        let mut net = lenet_like();
        if let LayerOp::Conv { weights, .. } = &mut net.layers[3].op {
            // zero conv2's input slices reading channel 2 of conv1
            for o in 0..16 {
                for v in &mut weights.data_mut()[(o * 8 + 2) * 25..(o * 8 + 3) * 25] {
                    *v = 0.0;
                }
            }
        }
        let pruned = prune_surgery(&net, &FilterRef::new("conv1", 2)).unwrap();
        for x in images(6, 33) {
            let a = net.forward(&x).unwrap();
            let b = pruned.forward(&x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-6);
        }
    }

    #[test]
    fn structural_constraints_are_enforced() {
        let resnet = Network::<f32>::from_arch(&ArchConfig::preset("resnet-desk").unwrap(), 3).unwrap();
        // stem feeds pool then the residual block: unsupported
        let err = prune_surgery(&resnet, &FilterRef::new("stem", 0)).unwrap_err();
        assert!(err.to_string().contains("identity-path"), "{err}");
        // branch2's last conv is pinned by the add
        let err = prune_surgery(&resnet, &FilterRef::new("block1_conv_b", 0)).unwrap_err();
        assert!(err.to_string().contains("identity add"), "{err}");
        // branch2's first conv is fine
        let pruned = prune_surgery(&resnet, &FilterRef::new("block1_conv_a", 0)).unwrap();
        assert_eq!(conv_filter_count(&pruned, "block1_conv_a").unwrap(), 7);
        assert_eq!(conv_filter_count(&pruned, "block1_conv_b").unwrap(), 8);
    }

    #[test]
    fn inner_surgery_equals_zero_masking() {
        let resnet = Network::<f32>::from_arch(&ArchConfig::preset("resnet-desk").unwrap(), 5).unwrap();
        let f = FilterRef::new("block1_conv_a", 3);
        let pruned = prune_surgery(&resnet, &f).unwrap();
        let mut masked = resnet.clone();
        if let LayerOp::Residual { branch2 } = &mut masked.layers[3].op {
            if let LayerOp::Conv { weights, bias, .. } = &mut branch2[0].op {
                let inner: usize = weights.shape()[1..].iter().product();
                for v in &mut weights.data_mut()[3 * inner..4 * inner] {
                    *v = 0.0;
                }
                bias.data_mut()[3] = 0.0;
            }
        }
        for x in images(5, 34) {
            let a = pruned.forward(&x).unwrap();
            let b = masked.forward(&x).unwrap();
            assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
        }
    }

    #[test]
    fn last_filter_removal_refused() {
        let cfg = ArchConfig::parse(
            "schema = \"prunekit-arch-v1\"\n\
             input = [1, 4, 4]\n\
             class_count = 2\n\n\
             [[layer]]\nid = \"c1\"\nkind = \"conv\"\nfilters = 1\nkernel = 3\nstride = 1\npadding = 1\n\n\
             [[layer]]\nid = \"fl\"\nkind = \"flatten\"\n\n\
             [[layer]]\nid = \"out\"\nkind = \"affine\"\nunits = 2\n",
        )
        .unwrap();
        let net = Network::<f32>::from_arch(&cfg, 1).unwrap();
        let err = prune_surgery(&net, &FilterRef::new("c1", 0)).unwrap_err();
        assert!(err.to_string().contains("single filter"), "{err}");
    }

    #[test]
    fn prune_branch_is_relu_passthrough() {
        let resnet = Network::<f32>::from_arch(&ArchConfig::preset("resnet-desk").unwrap(), 7).unwrap();
        let pruned = prune_branch(&resnet, "block1").unwrap();
        assert!(matches!(pruned.layers[3].op, LayerOp::Relu));
        assert_eq!(pruned.layers[3].id, "block1");
        // equivalent to the original with branch2 zeroed
        let mut masked = resnet.clone();
        if let LayerOp::Residual { branch2 } = &mut masked.layers[3].op {
            for inner in branch2 {
                if let LayerOp::Conv { weights, bias, .. } = &mut inner.op {
                    *weights = Tensor::zeros(weights.shape().to_vec());
                    *bias = Tensor::zeros(bias.shape().to_vec());
                }
            }
        }
        let eval = synth_dataset(9, 20, 4, [1, 28, 28]).unwrap();
        assert_eq!(
            predictions(&pruned, &eval).unwrap(),
            predictions(&masked, &eval).unwrap()
        );
        assert!(prune_branch(&resnet, "stem").is_err());
    }

    #[test]
    fn greedy_ratio_one_returns_unchanged() {
        let net = lenet_like();
        let cfg = PruneConfig {
            layer_id: "conv1".into(),
            target_ratio: 1.0,
            index: IndexKind::Incoming,
            fine_tune: FineTuneMode::Off,
            sgd: None,
            seed: 0,
            eval_split: SplitTag::Validation,
        };
        let eval = synth_dataset(9, 10, 4, [1, 28, 28]).unwrap();
        let (out, trace) = greedy_prune(&net, &cfg, &eval, None).unwrap();
        assert!(trace.records.is_empty());
        assert_eq!(conv_filter_count(&out, "conv1").unwrap(), 8);
    }

    #[test]
    fn greedy_four_to_two_runs_exactly_two_iterations() {
        let cfg_arch = ArchConfig::parse(
            "schema = \"prunekit-arch-v1\"\n\
             input = [1, 6, 6]\n\
             class_count = 2\n\n\
             [[layer]]\nid = \"c1\"\nkind = \"conv\"\nfilters = 4\nkernel = 3\nstride = 1\npadding = 1\n\n\
             [[layer]]\nid = \"r1\"\nkind = \"relu\"\n\n\
             [[layer]]\nid = \"fl\"\nkind = \"flatten\"\n\n\
             [[layer]]\nid = \"out\"\nkind = \"affine\"\nunits = 2\n",
        )
        .unwrap();
        let net = Network::<f32>::from_arch(&cfg_arch, 19).unwrap();
        let eval = synth_dataset(8, 16, 2, [1, 6, 6]).unwrap();
        let cfg = PruneConfig {
            layer_id: "c1".into(),
            target_ratio: 2.0,
            index: IndexKind::Car,
            fine_tune: FineTuneMode::Off,
            sgd: None,
            seed: 0,
            eval_split: SplitTag::Validation,
        };
        let (out, trace) = greedy_prune(&net, &cfg, &eval, None).unwrap();
        assert_eq!(trace.records.len(), 2);
        assert_eq!(conv_filter_count(&out, "c1").unwrap(), 2);
        assert_eq!(trace.records.last().unwrap().r_iter, 2.0);
        assert_eq!(trace.records[0].scores.len(), 4);
        assert_eq!(trace.records[1].scores.len(), 3);
        trace.check().unwrap();
        // excessive ratio rejected before any mutation
        let bad = PruneConfig { target_ratio: 5.0, ..cfg };
        assert!(greedy_prune(&net, &bad, &eval, None).is_err());
    }

    #[test]
    fn one_pass_k1_equals_single_greedy_iteration() {
        let net = lenet_like();
        let eval = synth_dataset(9, 20, 4, [1, 28, 28]).unwrap();
        let one = one_pass_prune(&net, "conv1", 1, IndexKind::Incoming, &eval, 3).unwrap();
        let cfg = PruneConfig {
            layer_id: "conv1".into(),
            target_ratio: 8.0 / 7.0,
            index: IndexKind::Incoming,
            fine_tune: FineTuneMode::Off,
            sgd: None,
            seed: 3,
            eval_split: SplitTag::Validation,
        };
        let (greedy, trace) = greedy_prune(&net, &cfg, &eval, None).unwrap();
        assert_eq!(trace.records.len(), 1);
        let (a, b) = match (&one.layers[0].op, &greedy.layers[0].op) {
            (LayerOp::Conv { weights: a, .. }, LayerOp::Conv { weights: b, .. }) => (a, b),
            _ => panic!(),
        };
        assert_eq!(a.data(), b.data());
        // k = n-1 leaves the argmax filter
        let survivors = one_pass_prune(&net, "conv1", 7, IndexKind::Incoming, &eval, 3).unwrap();
        assert_eq!(conv_filter_count(&survivors, "conv1").unwrap(), 1);
        let scores = score_layer(&net, "conv1", IndexKind::Incoming, &eval, 3).unwrap();
        let argmax = scores
            .iter()
            .enumerate()
            .max_by(|(_, x), (_, y)| x.value.total_cmp(&y.value))
            .unwrap()
            .0;
        let kept = match &survivors.layers[0].op {
            LayerOp::Conv { weights, .. } => weights.data()[..25].to_vec(),
            _ => panic!(),
        };
        let orig = match &net.layers[0].op {
            LayerOp::Conv { weights, .. } => weights.data()[argmax * 25..(argmax + 1) * 25].to_vec(),
            _ => panic!(),
        };
        assert_eq!(kept, orig);
        // bounds
        assert!(one_pass_prune(&net, "conv1", 0, IndexKind::Incoming, &eval, 3).is_err());
        assert!(one_pass_prune(&net, "conv1", 8, IndexKind::Incoming, &eval, 3).is_err());
    }

    #[test]
    fn table_ratio_pairs_reproduce() {
        let cases = [
            (96, 90, "1.07"),
            (96, 88, "1.09"),
            (96, 67, "1.43"),
            (96, 58, "1.66"),
            (256, 239, "1.07"),
            (256, 237, "1.08"),
            (256, 189, "1.35"),
            (256, 154, "1.66"),
            (96, 96, "1.00"),
        ];
        for (n, k, want) in cases {
            let r = structural_ratio(n, k).unwrap();
            assert_eq!(r.render(), want, "{n}/{k}");
        }
        assert!(structural_ratio(256, 154).unwrap().rounding_note().is_some());
        assert!(structural_ratio(96, 67).unwrap().rounding_note().is_none());
        assert!(structural_ratio(4, 0).is_err());
        assert!(structural_ratio(4, 5).is_err());
    }

    #[test]
    fn ties_break_toward_lowest_index() {
        let scores: Vec<ImportanceScore> = [0.5, 0.2, 0.2, 0.9]
            .iter()
            .enumerate()
            .map(|(i, &v)| ImportanceScore {
                filter: FilterRef::new("c", i),
                kind: IndexKind::Car,
                value: v,
            })
            .collect();
        assert_eq!(argmin_filter(&scores), 1);
    }
}
