//! Filter importance indices. CAR scores a filter by the accuracy lost when
//! it is ablated; the weight-magnitude indices and the seeded random index
//! are the comparison baselines.

use crate::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::network::{evaluate_accuracy, LayerOp, Network};
use crate::pruner::{self, prune_surgery};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterRef {
    pub layer_id: String,
    pub index: usize,
}

impl FilterRef {
    pub fn new(layer_id: impl Into<String>, index: usize) -> Self {
        FilterRef { layer_id: layer_id.into(), index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexKind {
    Car,
    Incoming,
    Outgoing,
    Random,
}

impl IndexKind {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexKind::Car => "car",
            IndexKind::Incoming => "incoming",
            IndexKind::Outgoing => "outgoing",
            IndexKind::Random => "random",
        }
    }
}

impl std::str::FromStr for IndexKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "car" => Ok(IndexKind::Car),
            "incoming" => Ok(IndexKind::Incoming),
            "outgoing" => Ok(IndexKind::Outgoing),
            "random" => Ok(IndexKind::Random),
            other => Err(Error::invalid(
                "index kind",
                format!("unknown kind '{other}' (expected car, incoming, outgoing, or random)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScore {
    pub filter: FilterRef,
    pub kind: IndexKind,
    pub value: f64,
}

#[derive(Debug, Clone, Copy)]
pub enum Direction {
    Incoming,
    Outgoing,
}

/// Clone with one filter's weights and bias set to zero. Because relu and
/// pooling both map zero to zero, this is observationally equivalent to
/// surgical removal; it is used to score filters that cannot be removed
/// structurally (single-filter layers, shape-constrained branch convs).
fn zero_masked<T: Scalar>(net: &Network<T>, f: &FilterRef) -> Result<Network<T>> {
    let mut out = net.clone();
    let layer = pruner::conv_layer_mut(&mut out, &f.layer_id)?;
    match &mut layer.op {
        LayerOp::Conv { weights, bias, .. } => {
            let inner: usize = weights.shape()[1..].iter().product();
            let start = f.index * inner;
            for v in &mut weights.data_mut()[start..start + inner] {
                *v = T::zero();
            }
            bias.data_mut()[f.index] = T::zero();
        }
        _ => unreachable!("conv_layer_mut returns conv layers only"),
    }
    Ok(out)
}

fn ablated_accuracy<T: Scalar>(net: &Network<T>, f: &FilterRef, eval: &Dataset<T>) -> Result<f64> {
    let candidate = if pruner::surgery_supported(net, f)? {
        prune_surgery(net, f)?
    } else {
        zero_masked(net, f)?
    };
    evaluate_accuracy(&candidate, eval)
}

/// CAR(i, L): accuracy of the intact network minus accuracy with filter i of
/// layer L removed (connections included). Negative values are legitimate —
/// removing a filter can help.
pub fn car_index<T: Scalar>(
    net: &Network<T>,
    f: &FilterRef,
    eval: &Dataset<T>,
) -> Result<ImportanceScore> {
    pruner::check_filter_ref(net, f)?;
    let base = evaluate_accuracy(net, eval)?;
    let ablated = ablated_accuracy(net, f, eval)?;
    Ok(ImportanceScore { filter: f.clone(), kind: IndexKind::Car, value: base - ablated })
}

/// CAR for every current filter of one layer. Candidate ablations run
/// concurrently against read-only views; the result is in filter order and
/// independent of scheduling.
pub fn car_all<T: Scalar>(
    net: &Network<T>,
    layer_id: &str,
    eval: &Dataset<T>,
) -> Result<Vec<ImportanceScore>> {
    let n = pruner::conv_filter_count(net, layer_id)?;
    let base = evaluate_accuracy(net, eval)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let f = FilterRef::new(layer_id, i);
            let ablated = ablated_accuracy(net, &f, eval)?;
            Ok(ImportanceScore { filter: f, kind: IndexKind::Car, value: base - ablated })
        })
        .collect()
}

/// Mean absolute weight, either over the filter's own kernel (incoming) or
/// over the successor weights that read its channel (outgoing).
pub fn avg_weight_index<T: Scalar>(
    net: &Network<T>,
    f: &FilterRef,
    direction: Direction,
) -> Result<ImportanceScore> {
    pruner::check_filter_ref(net, f)?;
    let (kind, values) = match direction {
        Direction::Incoming => (IndexKind::Incoming, pruner::incoming_weights(net, f)?),
        Direction::Outgoing => (IndexKind::Outgoing, pruner::outgoing_weights(net, f)?),
    };
    let sum: f64 = values.iter().map(|v| v.to_acc().abs()).sum();
    Ok(ImportanceScore { filter: f.clone(), kind, value: sum / values.len() as f64 })
}

/// A seeded random ranking expressed as scores: the filter scored 0 would be
/// pruned first. Same seed, same permutation.
pub fn random_index(layer_id: &str, n_filters: usize, seed: u64) -> Result<Vec<ImportanceScore>> {
    if n_filters == 0 {
        return Err(Error::invalid("random_index", "layer has no filters"));
    }
    let mut perm: Vec<usize> = (0..n_filters).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut scores: Vec<ImportanceScore> = (0..n_filters)
        .map(|i| ImportanceScore {
            filter: FilterRef::new(layer_id, i),
            kind: IndexKind::Random,
            value: 0.0,
        })
        .collect();
    for (rank, &filter) in perm.iter().enumerate() {
        scores[filter].value = rank as f64;
    }
    Ok(scores)
}

/// One layer's scores under any index kind, in filter order.
pub fn score_layer<T: Scalar>(
    net: &Network<T>,
    layer_id: &str,
    kind: IndexKind,
    eval: &Dataset<T>,
    seed: u64,
) -> Result<Vec<ImportanceScore>> {
    match kind {
        IndexKind::Car => car_all(net, layer_id, eval),
        IndexKind::Random => {
            random_index(layer_id, pruner::conv_filter_count(net, layer_id)?, seed)
        }
        IndexKind::Incoming | IndexKind::Outgoing => {
            let n = pruner::conv_filter_count(net, layer_id)?;
            let dir = if kind == IndexKind::Incoming {
                Direction::Incoming
            } else {
                Direction::Outgoing
            };
            (0..n)
                .map(|i| avg_weight_index(net, &FilterRef::new(layer_id, i), dir))
                .collect()
        }
    }
}

/// CSV rendering: one row per score plus the evaluation context.
pub fn scores_csv(
    scores: &[ImportanceScore],
    eval_split: SplitTag,
    eval_size: usize,
    seed: u64,
) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer_id", "filter_index", "kind", "value", "eval_split", "eval_size", "seed"])
        .map_err(|e| Error::format(format!("scores csv: {e}")))?;
    for s in scores {
        w.write_record([
            s.filter.layer_id.as_str(),
            &s.filter.index.to_string(),
            s.kind.as_str(),
            &format!("{}", s.value),
            &eval_split.to_string(),
            &eval_size.to_string(),
            &seed.to_string(),
        ])
        .map_err(|e| Error::format(format!("scores csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(format!("scores csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::format(format!("scores csv: {e}")))
}
