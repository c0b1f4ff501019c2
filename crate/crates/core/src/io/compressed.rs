//! PKC1 compressed-model container.
//!
//! Layout, little-endian throughout:
//!   magic "PKC1"
//!   u32 arch length | canonical architecture TOML
//!   u32 block count
//!   blocks: u32 id length | id | u8 kind | body
//!     kind 0 dense weights:      u32 rank | u32 extents... | f32 data...
//!     kind 1 compressed weights: u32 payload length | payload
//!     kind 2 dense bias:         u32 rank | u32 extents... | f32 data...
//!   u32 manifest length | manifest JSON
//!   u32 CRC-32 of everything above
//!
//! A kind-1 payload is exactly what the storage accounting counts: a 16-byte
//! header (u32 entry count, u32 codebook length, u8 idx_bits, u8 code_bits,
//! six reserved zero bytes), the entry bitstream (per entry: delta then code,
//! LSB-first), then the f32 codebook.

use super::{append_checksum, format_err, read_file, split_checksummed, write_file, ByteReader};
use crate::arch::ArchConfig;
use crate::compress::{storage_bytes, CompressedLayerStore, STORE_HEADER_BYTES};
use crate::error::{Error, Result};
use crate::network::{Layer, LayerOp, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const COMPRESSED_MAGIC: &[u8; 4] = b"PKC1";
pub const MANIFEST_SCHEMA: &str = "prunekit-manifest-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub layer_id: String,
    /// Dense bytes of this layer's weights in the uncompressed original.
    pub original_dense_bytes: usize,
    /// Bytes of this layer's weight block in this file.
    pub stored_bytes: usize,
    pub combined_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub entries: Vec<ManifestEntry>,
    pub total_original_bytes: usize,
    pub total_stored_bytes: usize,
    pub total_ratio: f64,
}

impl Manifest {
    pub fn from_entries(entries: Vec<ManifestEntry>) -> Self {
        let total_original_bytes = entries.iter().map(|e| e.original_dense_bytes).sum();
        let total_stored_bytes: usize = entries.iter().map(|e| e.stored_bytes).sum();
        let total_ratio = if total_stored_bytes > 0 {
            total_original_bytes as f64 / total_stored_bytes as f64
        } else {
            1.0
        };
        Manifest {
            schema: MANIFEST_SCHEMA.to_string(),
            entries,
            total_original_bytes,
            total_stored_bytes,
            total_ratio,
        }
    }
}

// ---------------------------------------------------------------------------
// Store payload: the byte sequence the storage accounting measures
// ---------------------------------------------------------------------------

fn pack_bits(entries: &[(u32, u32)], idx_bits: u8, code_bits: u8) -> Vec<u8> {
    let per = idx_bits as usize + code_bits as usize;
    let mut bytes = vec![0u8; (entries.len() * per).div_ceil(8)];
    let mut bit = 0usize;
    let put = |val: u32, nbits: u8, bytes: &mut [u8], bit: &mut usize| {
        for k in 0..nbits {
            if (val >> k) & 1 == 1 {
                bytes[*bit / 8] |= 1 << (*bit % 8);
            }
            *bit += 1;
        }
    };
    for &(delta, code) in entries {
        put(delta, idx_bits, &mut bytes, &mut bit);
        put(code, code_bits, &mut bytes, &mut bit);
    }
    bytes
}

fn unpack_bits(bytes: &[u8], count: usize, idx_bits: u8, code_bits: u8) -> Result<Vec<(u32, u32)>> {
    let per = idx_bits as usize + code_bits as usize;
    if bytes.len() * 8 < count * per {
        return Err(Error::format(format!(
            "bitstream of {} bytes cannot hold {count} entries of {per} bits",
            bytes.len()
        )));
    }
    let mut bit = 0usize;
    let get = |nbits: u8, bit: &mut usize| -> u32 {
        let mut v = 0u32;
        for k in 0..nbits {
            if bytes[*bit / 8] >> (*bit % 8) & 1 == 1 {
                v |= 1 << k;
            }
            *bit += 1;
        }
        v
    };
    Ok((0..count).map(|_| {
        let d = get(idx_bits, &mut bit);
        let c = get(code_bits, &mut bit);
        (d, c)
    }).collect())
}

/// Serialize a store to its accounting-exact payload:
/// `payload.len() == storage_bytes(store)`.
pub fn store_payload(store: &CompressedLayerStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(storage_bytes(store));
    out.extend_from_slice(&(store.entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&(store.codebook.len() as u32).to_le_bytes());
    out.push(store.idx_bits);
    out.push(store.code_bits);
    out.extend_from_slice(&[0u8; 6]);
    out.extend_from_slice(&pack_bits(&store.entries, store.idx_bits, store.code_bits));
    for &c in &store.codebook {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

/// Parse a payload back into a store; `shape` comes from the architecture.
pub fn store_from_payload(
    payload: &[u8],
    layer_id: &str,
    shape: Vec<usize>,
) -> Result<CompressedLayerStore> {
    if payload.len() < STORE_HEADER_BYTES {
        return Err(Error::format(format!(
            "store payload for '{layer_id}' is {} bytes, shorter than the header",
            payload.len()
        )));
    }
    let entries_n = u32::from_le_bytes(payload[0..4].try_into().unwrap()) as usize;
    let codebook_n = u32::from_le_bytes(payload[4..8].try_into().unwrap()) as usize;
    let idx_bits = payload[8];
    let code_bits = payload[9];
    if payload[10..16] != [0u8; 6] {
        return Err(Error::format(format!("store payload for '{layer_id}': reserved bytes not zero")));
    }
    let per = idx_bits as usize + code_bits as usize;
    let stream_len = (entries_n * per).div_ceil(8);
    let want = STORE_HEADER_BYTES + stream_len + 4 * codebook_n;
    if payload.len() != want {
        return Err(Error::format(format!(
            "store payload for '{layer_id}': {} bytes, header implies {want}",
            payload.len()
        )));
    }
    let entries = unpack_bits(&payload[STORE_HEADER_BYTES..STORE_HEADER_BYTES + stream_len], entries_n, idx_bits, code_bits)?;
    let mut codebook = Vec::with_capacity(codebook_n);
    for i in 0..codebook_n {
        let at = STORE_HEADER_BYTES + stream_len + 4 * i;
        codebook.push(f32::from_le_bytes(payload[at..at + 4].try_into().unwrap()));
    }
    let store = CompressedLayerStore {
        layer_id: layer_id.to_string(),
        shape,
        entries,
        codebook,
        idx_bits,
        code_bits,
    };
    store.check()?;
    Ok(store)
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

fn push_dense<T: Scalar>(out: &mut Vec<u8>, tensor: &Tensor<T>) {
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v.to_acc() as f32).to_le_bytes());
    }
}

fn push_block_header(out: &mut Vec<u8>, id: &str, kind: u8) {
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.push(kind);
}

fn collect_blocks<T: Scalar>(
    layers: &[Layer<T>],
    stores: &BTreeMap<String, CompressedLayerStore>,
    out: &mut Vec<u8>,
    count: &mut u32,
) -> Result<()> {
    for layer in layers {
        match &layer.op {
            LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias } => {
                if let Some(store) = stores.get(&layer.id) {
                    if store.shape != weights.shape() {
                        return Err(Error::invalid(
                            "save_compressed",
                            format!(
                                "store for '{}' has shape {:?}, layer has {:?}",
                                layer.id,
                                store.shape,
                                weights.shape()
                            ),
                        ));
                    }
                    push_block_header(out, &layer.id, 1);
                    let payload = store_payload(store);
                    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
                    out.extend_from_slice(&payload);
                } else {
                    push_block_header(out, &layer.id, 0);
                    push_dense(out, weights);
                }
                push_block_header(out, &layer.id, 2);
                push_dense(out, bias);
                *count += 2;
            }
            LayerOp::Residual { branch2 } => collect_blocks(branch2, stores, out, count)?,
            _ => {}
        }
    }
    Ok(())
}

/// Serialize a compressed model: quantized layers carry their stores, all
/// other parameterized layers stay dense, biases always dense.
pub fn compressed_bytes<T: Scalar>(
    net: &Network<T>,
    stores: &BTreeMap<String, CompressedLayerStore>,
    manifest: &Manifest,
) -> Result<Vec<u8>> {
    let arch = net.to_arch().render();
    let mut body = Vec::new();
    let mut count = 0u32;
    collect_blocks(&net.layers, stores, &mut body, &mut count)?;
    // every store must have claimed a weight slot somewhere in the walk
    let mut seen = 0usize;
    fn count_hits<T: Scalar>(
        layers: &[Layer<T>],
        stores: &BTreeMap<String, CompressedLayerStore>,
        seen: &mut usize,
    ) {
        for layer in layers {
            match &layer.op {
                LayerOp::Conv { .. } | LayerOp::Affine { .. } => {
                    if stores.contains_key(&layer.id) {
                        *seen += 1;
                    }
                }
                LayerOp::Residual { branch2 } => count_hits(branch2, stores, seen),
                _ => {}
            }
        }
    }
    count_hits(&net.layers, stores, &mut seen);
    if seen != stores.len() {
        return Err(Error::invalid(
            "save_compressed",
            "a store names a layer absent from the network",
        ));
    }
    let manifest_json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::format(format!("manifest serialization: {e}")))?;

    let mut out = Vec::with_capacity(body.len() + arch.len() + manifest_json.len() + 24);
    out.extend_from_slice(COMPRESSED_MAGIC);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest_json.as_bytes());
    append_checksum(&mut out);
    Ok(out)
}

pub fn save_compressed<T: Scalar>(
    net: &Network<T>,
    stores: &BTreeMap<String, CompressedLayerStore>,
    manifest: &Manifest,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_file(path.as_ref(), &compressed_bytes(net, stores, manifest)?)
}

fn read_dense<T: Scalar>(r: &mut ByteReader<'_>, id: &str) -> Result<Tensor<T>> {
    let rank = r.u32_le()? as usize;
    if rank > 8 {
        return Err(r.error(format!("block '{id}': implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32_le()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::from_acc(f64::from(r.f32_le()?)));
    }
    Tensor::new(shape, data)
}

enum BlockBody<T> {
    DenseWeights(Tensor<T>),
    Store(Vec<u8>),
    Bias(Tensor<T>),
}

fn apply_blocks<T: Scalar>(
    layers: &mut [Layer<T>],
    blocks: &mut BTreeMap<(String, u8), BlockBody<T>>,
    stores: &mut BTreeMap<String, CompressedLayerStore>,
) -> Result<()> {
    for layer in layers.iter_mut() {
        match &mut layer.op {
            LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias } => {
                let wkey = (layer.id.clone(), 0u8);
                let skey = (layer.id.clone(), 1u8);
                let new_weights = match (blocks.remove(&wkey), blocks.remove(&skey)) {
                    (Some(BlockBody::DenseWeights(t)), None) => t,
                    (None, Some(BlockBody::Store(payload))) => {
                        let store =
                            store_from_payload(&payload, &layer.id, weights.shape().to_vec())?;
                        let decoded = crate::compress::decode::<T>(&store)?;
                        stores.insert(layer.id.clone(), store);
                        decoded
                    }
                    (None, None) => {
                        return Err(Error::format(format!(
                            "no weight block for layer '{}'",
                            layer.id
                        )))
                    }
                    _ => {
                        return Err(Error::format(format!(
                            "layer '{}' has both dense and compressed weight blocks",
                            layer.id
                        )))
                    }
                };
                if new_weights.shape() != weights.shape() {
                    return Err(Error::format(format!(
                        "layer '{}': architecture expects weights {:?}, file carries {:?}",
                        layer.id,
                        weights.shape(),
                        new_weights.shape()
                    )));
                }
                *weights = new_weights;
                match blocks.remove(&(layer.id.clone(), 2u8)) {
                    Some(BlockBody::Bias(t)) if t.shape() == bias.shape() => *bias = t,
                    Some(BlockBody::Bias(t)) => {
                        return Err(Error::format(format!(
                            "layer '{}': bias shape {:?} does not match architecture {:?}",
                            layer.id,
                            t.shape(),
                            bias.shape()
                        )))
                    }
                    _ => {
                        return Err(Error::format(format!(
                            "no bias block for layer '{}'",
                            layer.id
                        )))
                    }
                }
            }
            LayerOp::Residual { branch2 } => apply_blocks(branch2, blocks, stores)?,
            _ => {}
        }
    }
    Ok(())
}

/// Parse a PKC1 file: the network (quantized layers decoded), the stores, and
/// the manifest.
pub fn compressed_from_bytes<T: Scalar>(
    bytes: &[u8],
    path: Option<&Path>,
) -> Result<(Network<T>, BTreeMap<String, CompressedLayerStore>, Manifest)> {
    let dummy = Path::new("<memory>");
    let payload = split_checksummed(bytes, path.unwrap_or(dummy))?;
    let mut r = ByteReader::new(payload, path);
    let magic = r.take(4)?;
    if magic != COMPRESSED_MAGIC {
        return Err(r.error(format!("magic mismatch: {magic:02x?} is not PKC1")));
    }
    let arch_len = r.u32_le()? as usize;
    let arch_text = std::str::from_utf8(r.take(arch_len)?)
        .map_err(|_| r.error("architecture block is not UTF-8"))?;
    let arch = ArchConfig::parse(arch_text)?;
    let count = r.u32_le()? as usize;
    let mut blocks: BTreeMap<(String, u8), BlockBody<T>> = BTreeMap::new();
    for _ in 0..count {
        let id_len = r.u32_le()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| r.error("block id is not UTF-8"))?
            .to_string();
        let kind = r.u8()?;
        let body = match kind {
            0 => BlockBody::DenseWeights(read_dense(&mut r, &id)?),
            1 => {
                let len = r.u32_le()? as usize;
                BlockBody::Store(r.take(len)?.to_vec())
            }
            2 => BlockBody::Bias(read_dense(&mut r, &id)?),
            other => return Err(r.error(format!("block '{id}': unknown kind {other}"))),
        };
        if blocks.insert((id.clone(), kind), body).is_some() {
            return Err(r.error(format!("duplicate block for '{id}' kind {kind}")));
        }
    }
    let manifest_len = r.u32_le()? as usize;
    let manifest_text = std::str::from_utf8(r.take(manifest_len)?)
        .map_err(|_| r.error("manifest is not UTF-8"))?;
    let manifest: Manifest = serde_json::from_str(manifest_text)
        .map_err(|e| r.error(format!("manifest JSON: {e}")))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(r.error(format!(
            "unsupported manifest schema '{}' (expected '{MANIFEST_SCHEMA}')",
            manifest.schema
        )));
    }
    if !r.done() {
        return Err(r.error(format!("{} trailing bytes after the manifest", r.remaining())));
    }
    let mut net = Network::from_arch(&arch, 0)?;
    let mut stores = BTreeMap::new();
    apply_blocks(&mut net.layers, &mut blocks, &mut stores)?;
    if let Some(((id, kind), _)) = blocks.into_iter().next() {
        return Err(format_err(path, format!("block for '{id}' kind {kind} matches no layer")));
    }
    net.validate()?;
    Ok((net, stores, manifest))
}

pub fn load_compressed<T: Scalar>(
    path: impl AsRef<Path>,
) -> Result<(Network<T>, BTreeMap<String, CompressedLayerStore>, Manifest)> {
    let bytes = read_file(path.as_ref())?;
    compressed_from_bytes(&bytes, Some(path.as_ref()))
}
