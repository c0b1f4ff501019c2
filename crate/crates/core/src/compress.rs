//! Second-stage weight compression: magnitude pruning, codebook quantization,
//! and exact storage accounting.
//!
//! The sparse layout stores nonzeros as (delta, code) pairs over the
//! flattened tensor. With MAX = 2^idx_bits − 1, a real entry carries a gap
//! delta in [0, MAX−1] from the cursor and places its value at
//! cursor + delta (cursor then moves one past it); the reserved pair
//! (MAX, 0) is an escape that advances the cursor by MAX positions without
//! placing anything. Greedy encoding (maximal escapes, then the remainder)
//! makes the byte stream canonical: encode ∘ decode ∘ encode is the
//! identity on stores.

use crate::error::{Error, Result};
use crate::network::{LayerOp, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// On-disk/store header size: entry count (4), codebook length (4), idx_bits
/// (1), code_bits (1), reserved (6).
pub const STORE_HEADER_BYTES: usize = 16;
pub const DEFAULT_IDX_BITS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressedLayerStore {
    pub layer_id: String,
    pub shape: Vec<usize>,
    /// (index delta, codebook index) pairs, escapes included.
    pub entries: Vec<(u32, u32)>,
    pub codebook: Vec<f32>,
    pub idx_bits: u8,
    pub code_bits: u8,
}

impl CompressedLayerStore {
    pub fn check(&self) -> Result<()> {
        if self.idx_bits == 0 || self.idx_bits > 32 || self.code_bits == 0 || self.code_bits > 32 {
            return Err(Error::invalid("store", "idx_bits and code_bits must lie in 1..=32"));
        }
        let max_delta = (1u64 << self.idx_bits) - 1;
        let code_limit = 1u64 << self.code_bits;
        if self.codebook.len() as u64 > code_limit {
            return Err(Error::invalid(
                "store",
                format!("codebook of {} entries overflows {} code bits", self.codebook.len(), self.code_bits),
            ));
        }
        let n: usize = self.shape.iter().product();
        let mut cursor = 0u64;
        let mut referenced = vec![false; self.codebook.len()];
        for &(delta, code) in &self.entries {
            if u64::from(delta) > max_delta {
                return Err(Error::invalid("store", format!("delta {delta} exceeds {max_delta}")));
            }
            if u64::from(delta) == max_delta {
                if code != 0 {
                    return Err(Error::invalid("store", "escape entries must carry code 0"));
                }
                cursor += max_delta;
            } else {
                if u64::from(code) >= self.codebook.len() as u64 {
                    return Err(Error::invalid("store", format!("code {code} out of codebook range")));
                }
                referenced[code as usize] = true;
                cursor += u64::from(delta) + 1;
            }
            if cursor > n as u64 {
                return Err(Error::invalid("store", "entries overrun the declared shape"));
            }
        }
        if let Some(unused) = referenced.iter().position(|&r| !r) {
            if !self.codebook.is_empty() {
                return Err(Error::invalid("store", format!("codebook entry {unused} is never referenced")));
            }
        }
        Ok(())
    }

    /// Number of real (non-escape) nonzero positions.
    pub fn nonzero_count(&self) -> usize {
        let max_delta = (1u64 << self.idx_bits) - 1;
        self.entries.iter().filter(|&&(d, _)| u64::from(d) != max_delta).count()
    }
}

// ---------------------------------------------------------------------------
// Magnitude pruning
// ---------------------------------------------------------------------------

/// Zero the floor(sparsity * N) smallest-magnitude entries; ties break toward
/// the lower flat index (so already-zero entries are consumed first).
pub fn magnitude_prune<T: Scalar>(weights: &Tensor<T>, sparsity: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::invalid("magnitude_prune", "sparsity must lie in [0, 1)"));
    }
    let n = weights.len();
    let k = (sparsity * n as f64).floor() as usize;
    let mut out = weights.clone();
    if k == 0 {
        return Ok(out);
    }
    let mut order: Vec<usize> = (0..n).collect();
    let data = weights.data();
    order.sort_by(|&a, &b| {
        let ma = data[a].to_acc().abs();
        let mb = data[b].to_acc().abs();
        ma.total_cmp(&mb).then(a.cmp(&b))
    });
    for &i in &order[..k] {
        out.data_mut()[i] = T::zero();
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Codebook quantization
// ---------------------------------------------------------------------------

/// 1-D k-means over the nonzero values: linearly spaced initialization
/// between the min and max nonzero, Lloyd iterations to an assignment
/// fixpoint (or 100 rounds), ties toward the lower centroid index. When the
/// distinct nonzeros already fit the codebook the result is exact.
pub fn kmeans_quantize<T: Scalar>(
    weights: &Tensor<T>,
    layer_id: &str,
    code_bits: u8,
    idx_bits: u8,
) -> Result<CompressedLayerStore> {
    if code_bits == 0 || code_bits > 24 {
        return Err(Error::invalid("kmeans_quantize", "code_bits must lie in 1..=24"));
    }
    if idx_bits == 0 || idx_bits > 32 {
        return Err(Error::invalid("kmeans_quantize", "idx_bits must lie in 1..=32"));
    }
    let nonzero: Vec<(usize, f64)> = weights
        .data()
        .iter()
        .enumerate()
        .filter(|(_, v)| **v != T::zero())
        .map(|(i, v)| (i, v.to_acc()))
        .collect();
    if nonzero.is_empty() {
        return Err(Error::invalid(
            "kmeans_quantize",
            format!("layer '{layer_id}': all weights are zero, nothing to quantize"),
        ));
    }

    let mut distinct: Vec<f64> = nonzero.iter().map(|&(_, v)| v).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let k_cap = 1usize << code_bits.min(20);
    let (codebook, assignment) = if distinct.len() <= k_cap {
        // exact: codebook = the sorted distinct values themselves
        let codebook: Vec<f64> = distinct.clone();
        let assignment: Vec<usize> = nonzero
            .iter()
            .map(|&(_, v)| codebook.partition_point(|&c| c < v))
            .collect();
        (codebook, assignment)
    } else {
        lloyd(&nonzero.iter().map(|&(_, v)| v).collect::<Vec<_>>(), k_cap)
    };

    // drop centroids nothing maps to, remapping codes
    let mut used = vec![false; codebook.len()];
    for &a in &assignment {
        used[a] = true;
    }
    let mut remap = vec![usize::MAX; codebook.len()];
    let mut kept = Vec::new();
    for (i, (&u, &c)) in used.iter().zip(codebook.iter()).enumerate() {
        if u {
            remap[i] = kept.len();
            kept.push(c as f32);
        }
    }

    let positions: Vec<(usize, u32)> = nonzero
        .iter()
        .zip(&assignment)
        .map(|(&(pos, _), &a)| (pos, remap[a] as u32))
        .collect();
    let entries = encode_entries(&positions, idx_bits);
    let store = CompressedLayerStore {
        layer_id: layer_id.to_string(),
        shape: weights.shape().to_vec(),
        entries,
        codebook: kept,
        idx_bits,
        code_bits,
    };
    store.check()?;
    Ok(store)
}

/// Plain Lloyd iterations in 1-D; returns (centroids, assignment).
fn lloyd(values: &[f64], k: usize) -> (Vec<f64>, Vec<usize>) {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut centroids: Vec<f64> = if k == 1 {
        vec![(lo + hi) / 2.0]
    } else {
        (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
    };
    let assign = |centroids: &[f64]| -> Vec<usize> {
        values
            .iter()
            .map(|&v| {
                let mut best = 0usize;
                let mut best_d = (v - centroids[0]).abs();
                for (i, &c) in centroids.iter().enumerate().skip(1) {
                    let d = (v - c).abs();
                    if d < best_d {
                        best = i;
                        best_d = d;
                    }
                }
                best
            })
            .collect()
    };
    let mut assignment = assign(&centroids);
    for _ in 0..100 {
        let mut sums = vec![0.0f64; k];
        let mut counts = vec![0u64; k];
        for (&v, &a) in values.iter().zip(&assignment) {
            sums[a] += v;
            counts[a] += 1;
        }
        for i in 0..k {
            if counts[i] > 0 {
                centroids[i] = sums[i] / counts[i] as f64;
            }
        }
        let next = assign(&centroids);
        if next == assignment {
            break;
        }
        assignment = next;
    }
    (centroids, assignment)
}

/// Canonical greedy delta encoding of sorted (position, code) pairs.
fn encode_entries(positions: &[(usize, u32)], idx_bits: u8) -> Vec<(u32, u32)> {
    let max_delta = (1u64 << idx_bits) - 1;
    let mut entries = Vec::with_capacity(positions.len());
    let mut cursor = 0u64;
    for &(pos, code) in positions {
        let mut gap = pos as u64 - cursor;
        while gap >= max_delta {
            entries.push((max_delta as u32, 0));
            gap -= max_delta;
        }
        entries.push((gap as u32, code));
        cursor = pos as u64 + 1;
    }
    entries
}

/// Reconstruct the dense tensor a store describes.
pub fn decode<T: Scalar>(store: &CompressedLayerStore) -> Result<Tensor<T>> {
    store.check()?;
    let n: usize = store.shape.iter().product();
    let max_delta = (1u64 << store.idx_bits) - 1;
    let mut data = vec![T::zero(); n];
    let mut cursor = 0u64;
    for &(delta, code) in &store.entries {
        if u64::from(delta) == max_delta {
            cursor += max_delta;
        } else {
            let pos = cursor + u64::from(delta);
            data[pos as usize] = T::from_acc(f64::from(store.codebook[code as usize]));
            cursor = pos + 1;
        }
    }
    Tensor::new(store.shape.clone(), data)
}

/// Re-encode a store's decoded positions; canonical form for byte-identity
/// checks.
pub fn reencode(store: &CompressedLayerStore) -> Result<CompressedLayerStore> {
    store.check()?;
    let max_delta = (1u64 << store.idx_bits) - 1;
    let mut positions = Vec::new();
    let mut cursor = 0u64;
    for &(delta, code) in &store.entries {
        if u64::from(delta) == max_delta {
            cursor += max_delta;
        } else {
            let pos = cursor + u64::from(delta);
            positions.push((pos as usize, code));
            cursor = pos + 1;
        }
    }
    Ok(CompressedLayerStore {
        entries: encode_entries(&positions, store.idx_bits),
        ..store.clone()
    })
}

// ---------------------------------------------------------------------------
// Storage accounting
// ---------------------------------------------------------------------------

/// Bytes to store a dense f32 tensor of `n` entries.
pub fn dense_storage_bytes(n: usize) -> usize {
    4 * n
}

/// Bytes to store a compressed layer: fixed header, the packed entry stream,
/// and the f32 codebook. Escapes count as entries.
pub fn storage_bytes(store: &CompressedLayerStore) -> usize {
    let bits = store.entries.len() * (store.idx_bits as usize + store.code_bits as usize);
    STORE_HEADER_BYTES + bits.div_ceil(8) + 4 * store.codebook.len()
}

/// Frobenius quantization error between a tensor and its decoded store.
pub fn quantization_error<T: Scalar>(weights: &Tensor<T>, store: &CompressedLayerStore) -> Result<f64> {
    let decoded: Tensor<T> = decode(store)?;
    if decoded.shape() != weights.shape() {
        return Err(Error::shape("quantization_error", "store shape differs from tensor"));
    }
    let sq: f64 = weights
        .data()
        .iter()
        .zip(decoded.data())
        .map(|(&a, &b)| {
            let d = a.to_acc() - b.to_acc();
            d * d
        })
        .sum();
    Ok(sq.sqrt())
}

/// Within-cluster sum of squares of a store against the tensor it encodes —
/// the k-means objective restricted to the nonzeros.
pub fn store_wss<T: Scalar>(weights: &Tensor<T>, store: &CompressedLayerStore) -> Result<f64> {
    let e = quantization_error(weights, store)?;
    Ok(e * e)
}

/// Dense bytes of a layer's weight tensor in `original` divided by the bytes
/// of its compressed (or still-dense, post-surgery) representation.
pub fn combined_ratio<T: Scalar>(
    original: &Network<T>,
    layer_id: &str,
    compressed_bytes: usize,
) -> Result<f64> {
    let idx = original.layer_index(layer_id)?;
    let weights = match &original.layers[idx].op {
        LayerOp::Conv { weights, .. } | LayerOp::Affine { weights, .. } => weights,
        _ => {
            return Err(Error::invalid(
                "combined_ratio",
                format!("layer '{layer_id}' has no weight tensor"),
            ))
        }
    };
    if compressed_bytes == 0 {
        return Err(Error::invalid("combined_ratio", "compressed size of zero bytes"));
    }
    Ok(dense_storage_bytes(weights.len()) as f64 / compressed_bytes as f64)
}

/// Nearest-integer "N x" rendering used for combined-pipeline summaries.
pub fn render_multiple(ratio: f64) -> String {
    format!("{}x", ratio.round() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(n: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![n], (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn magnitude_prune_examples() {
        let w = Tensor::new(vec![4], vec![1.0f32, -3.0, 2.0, 0.5]).unwrap();
        let out = magnitude_prune(&w, 0.5).unwrap();
        assert_eq!(out.data(), &[0.0, -3.0, 2.0, 0.0]);
        let id = magnitude_prune(&w, 0.0).unwrap();
        assert_eq!(id.data(), w.data());
        assert!(magnitude_prune(&w, 1.0).is_err());
        // ties toward lower flat index
        let w = Tensor::new(vec![4], vec![1.0f32, -1.0, 1.0, 1.0]).unwrap();
        let out = magnitude_prune(&w, 0.5).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn magnitude_prune_matches_sort_oracle() {
        let n = 10_000;
        let w = rand_tensor(n, 71);
        let sparsity = 0.73;
        let pruned = magnitude_prune(&w, sparsity).unwrap();
        // oracle: full sort of (|w|, index), survivors = top n-k
        let k = (sparsity * n as f64).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            w.data()[a]
                .abs()
                .total_cmp(&w.data()[b].abs())
                .then(a.cmp(&b))
        });
        let survivors: std::collections::BTreeSet<usize> = order[k..].iter().cloned().collect();
        for i in 0..n {
            if survivors.contains(&i) {
                assert_eq!(pruned.data()[i], w.data()[i]);
            } else {
                assert_eq!(pruned.data()[i], 0.0);
            }
        }
    }

    #[test]
    fn two_distinct_values_one_bit_is_exact() {
        let w = Tensor::new(vec![6], vec![0.0f32, 1.5, -0.5, 1.5, 0.0, -0.5]).unwrap();
        let store = kmeans_quantize(&w, "l", 1, 8).unwrap();
        assert_eq!(store.codebook, vec![-0.5, 1.5]);
        let back: Tensor<f32> = decode(&store).unwrap();
        assert_eq!(back.data(), w.data());
        assert_eq!(store.nonzero_count(), 4);
    }

    #[test]
    fn wide_codebook_is_lossless() {
        let mut w = rand_tensor(200, 5);
        for v in w.data_mut().iter_mut().step_by(3) {
            *v = 0.0;
        }
        let store = kmeans_quantize(&w, "l", 8, 8).unwrap();
        let back: Tensor<f32> = decode(&store).unwrap();
        assert_eq!(back.data(), w.data());
        // zero positions preserved exactly
        for (a, b) in w.data().iter().zip(back.data()) {
            assert_eq!(*a == 0.0, *b == 0.0);
        }
    }

    #[test]
    fn all_zero_tensor_rejected() {
        let w = Tensor::<f32>::zeros(vec![10]);
        assert!(kmeans_quantize(&w, "l", 4, 8).is_err());
    }

    #[test]
    fn wss_beats_random_assignments() {
        let w = rand_tensor(500, 9);
        let store = kmeans_quantize(&w, "l", 4, 8).unwrap();
        let ours = store_wss(&w, &store).unwrap();
        let values: Vec<f64> = w.data().iter().filter(|v| **v != 0.0).map(|v| f64::from(*v)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let k = store.codebook.len();
        let mut best = f64::INFINITY;
        for _ in 0..1000 {
            // random partition -> centroid at each part's mean -> WSS
            let assign: Vec<usize> = values.iter().map(|_| rng.gen_range(0..k)).collect();
            let mut sums = vec![0.0f64; k];
            let mut counts = vec![0u64; k];
            for (&v, &a) in values.iter().zip(&assign) {
                sums[a] += v;
                counts[a] += 1;
            }
            let centroids: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(&s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect();
            let wss: f64 = values
                .iter()
                .zip(&assign)
                .map(|(&v, &a)| (v - centroids[a]).powi(2))
                .sum();
            best = best.min(wss);
        }
        assert!(ours <= best, "kmeans {ours} vs best random {best}");
    }

    #[test]
    fn error_non_increasing_in_code_bits() {
        let w = rand_tensor(800, 13);
        let mut prev = f64::INFINITY;
        for b in 2..=8u8 {
            let store = kmeans_quantize(&w, "l", b, 8).unwrap();
            let e = quantization_error(&w, &store).unwrap();
            assert!(e <= prev + 1e-12, "bits {b}: {e} > {prev}");
            prev = e;
        }
    }

    #[test]
    fn storage_fixture_values() {
        assert_eq!(dense_storage_bytes(96 * 3 * 11 * 11), 139_392);
        let store = CompressedLayerStore {
            layer_id: "l".into(),
            shape: vec![100],
            entries: vec![(0, 0); 100],
            codebook: vec![0.0; 256],
            idx_bits: 8,
            code_bits: 8,
        };
        assert_eq!(storage_bytes(&store), 1240);
    }

    #[test]
    fn escapes_cover_long_gaps() {
        // one value at position 600 with 8-bit deltas: two escapes (255+255)
        // then a real delta of 90
        let mut w = Tensor::<f32>::zeros(vec![700]);
        w.data_mut()[600] = 1.25;
        let store = kmeans_quantize(&w, "l", 2, 8).unwrap();
        assert_eq!(store.entries, vec![(255, 0), (255, 0), (90, 0)]);
        let back: Tensor<f32> = decode(&store).unwrap();
        assert_eq!(back.data()[600], 1.25);
        assert_eq!(back.data().iter().filter(|v| **v != 0.0).count(), 1);
        // a gap of exactly max_delta needs an escape plus a zero delta
        let mut w = Tensor::<f32>::zeros(vec![300]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[256] = 2.0; // gap from cursor 1 is 255 = MAX
        let store = kmeans_quantize(&w, "l", 2, 8).unwrap();
        assert_eq!(store.entries, vec![(0, 0), (255, 0), (0, 1)]);
    }

    #[test]
    fn reencode_is_canonical() {
        let mut w = rand_tensor(4000, 17);
        let mask = magnitude_prune(&w, 0.9).unwrap();
        w = mask;
        let store = kmeans_quantize(&w, "l", 4, 8).unwrap();
        let again = reencode(&store).unwrap();
        assert_eq!(store, again);
        // and a non-canonical store (extra escape splitting) normalizes
        let mut crooked = store.clone();
        // split the first real entry's delta into escape-free pieces only if
        // it is big enough; otherwise just verify stability
        let decoded: Tensor<f32> = decode(&crooked).unwrap();
        crooked = reencode(&crooked).unwrap();
        let redecoded: Tensor<f32> = decode(&crooked).unwrap();
        assert_eq!(decoded.data(), redecoded.data());
    }

    #[test]
    fn compressed_beats_dense_at_half_sparsity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..20 {
            let n = rng.gen_range(64..4096);
            let sparsity = rng.gen_range(0.5..0.99);
            let code_bits = rng.gen_range(1..=8u8);
            let mut w = rand_tensor(n, 1000 + trial);
            w = magnitude_prune(&w, sparsity).unwrap();
            if w.data().iter().all(|v| *v == 0.0) {
                continue;
            }
            let store = kmeans_quantize(&w, "l", code_bits, 8).unwrap();
            assert!(
                storage_bytes(&store) < dense_storage_bytes(n),
                "n={n} sparsity={sparsity} bits={code_bits}: {} vs {}",
                storage_bytes(&store),
                dense_storage_bytes(n)
            );
        }
    }

    #[test]
    fn store_check_rejects_malformed() {
        let good = CompressedLayerStore {
            layer_id: "l".into(),
            shape: vec![10],
            entries: vec![(2, 0)],
            codebook: vec![1.0],
            idx_bits: 8,
            code_bits: 1,
        };
        good.check().unwrap();
        let mut bad = good.clone();
        bad.entries = vec![(2, 1)];
        assert!(bad.check().is_err(), "code out of range");
        let mut bad = good.clone();
        bad.entries = vec![(255, 1)];
        assert!(bad.check().is_err(), "escape with nonzero code");
        let mut bad = good.clone();
        bad.entries = vec![(9, 0), (5, 0)];
        assert!(bad.check().is_err(), "overruns shape");
        let mut bad = good.clone();
        bad.codebook = vec![1.0, 2.0];
        assert!(bad.check().is_err(), "unreferenced codebook entry");
    }

    #[test]
    fn render_multiple_rounds_to_integer() {
        assert_eq!(render_multiple(41.7), "42x");
        assert_eq!(render_multiple(1.02), "1x");
    }
}
