//! PKM1 model container.
//!
//! Layout, little-endian throughout:
//!   magic "PKM1"
//!   u32 arch length | canonical architecture TOML (UTF-8)
//!   u32 record count
//!   records: u32 id length | id | u8 kind (0 = weights, 1 = bias)
//!            | u32 rank | u32 extents... | f32 data...
//!   u32 CRC-32 of everything above
//!
//! Records appear in network order (branch2 layers inline at their block's
//! position), weights before bias, so a given network has exactly one byte
//! representation.

use super::{append_checksum, format_err, read_file, split_checksummed, write_file, ByteReader};
use crate::arch::ArchConfig;
use crate::error::Result;
use crate::network::{Layer, LayerOp, Network};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const MODEL_MAGIC: &[u8; 4] = b"PKM1";

fn push_tensor<T: Scalar>(out: &mut Vec<u8>, id: &str, kind: u8, tensor: &Tensor<T>) {
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id.as_bytes());
    out.push(kind);
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &e in tensor.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        out.extend_from_slice(&(v.to_acc() as f32).to_le_bytes());
    }
}

fn collect_records<T: Scalar>(layers: &[Layer<T>], out: &mut Vec<u8>, count: &mut u32) {
    for layer in layers {
        match &layer.op {
            LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias } => {
                push_tensor(out, &layer.id, 0, weights);
                push_tensor(out, &layer.id, 1, bias);
                *count += 2;
            }
            LayerOp::Residual { branch2 } => collect_records(branch2, out, count),
            _ => {}
        }
    }
}

/// Serialize a network to PKM1 bytes.
pub fn model_bytes<T: Scalar>(net: &Network<T>) -> Result<Vec<u8>> {
    let arch = net.to_arch().render();
    let mut body = Vec::new();
    let mut count = 0u32;
    collect_records(&net.layers, &mut body, &mut count);

    let mut out = Vec::with_capacity(body.len() + arch.len() + 16);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&(arch.len() as u32).to_le_bytes());
    out.extend_from_slice(arch.as_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&body);
    append_checksum(&mut out);
    Ok(out)
}

pub fn save_model<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model_bytes(net)?)
}

fn read_tensor_record<T: Scalar>(
    r: &mut ByteReader<'_>,
) -> Result<(String, u8, Tensor<T>)> {
    let id_len = r.u32_le()? as usize;
    let id = std::str::from_utf8(r.take(id_len)?)
        .map_err(|_| r.error("record id is not UTF-8"))?
        .to_string();
    let kind = r.u8()?;
    if kind > 1 {
        return Err(r.error(format!("record '{id}': unknown tensor kind {kind}")));
    }
    let rank = r.u32_le()? as usize;
    if rank > 8 {
        return Err(r.error(format!("record '{id}': implausible rank {rank}")));
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
    Ok((id, kind, Tensor::new(shape, data)?))
}

fn apply_records<T: Scalar>(
    layers: &mut [Layer<T>],
    records: &mut BTreeMap<(String, u8), Tensor<T>>,
) -> Result<()> {
    for layer in layers.iter_mut() {
        match &mut layer.op {
            LayerOp::Conv { weights, bias, .. } | LayerOp::Affine { weights, bias } => {
                for (kind, slot) in [(0u8, &mut *weights), (1u8, bias)] {
                    let key = (layer.id.clone(), kind);
                    let tensor = records.remove(&key).ok_or_else(|| {
                        format_err(
                            None,
                            format!("missing tensor record for layer '{}' kind {kind}", layer.id),
                        )
                    })?;
                    if tensor.shape() != slot.shape() {
                        return Err(format_err(
                            None,
                            format!(
                                "layer '{}': architecture expects shape {:?}, record carries {:?}",
                                layer.id,
                                slot.shape(),
                                tensor.shape()
                            ),
                        ));
                    }
                    *slot = tensor;
                }
            }
            LayerOp::Residual { branch2 } => apply_records(branch2, records)?,
            _ => {}
        }
    }
    Ok(())
}

/// Parse PKM1 bytes into a network. The embedded architecture text defines
/// the structure; every parameterized layer must have exactly its two tensor
/// records.
pub fn model_from_bytes<T: Scalar>(bytes: &[u8], path: Option<&Path>) -> Result<Network<T>> {
    let dummy = Path::new("<memory>");
    let payload = split_checksummed(bytes, path.unwrap_or(dummy))?;
    let mut r = ByteReader::new(payload, path);
    let magic = r.take(4)?;
    if magic != MODEL_MAGIC {
        return Err(r.error(format!("magic mismatch: {magic:02x?} is not PKM1")));
    }
    let arch_len = r.u32_le()? as usize;
    let arch_text = std::str::from_utf8(r.take(arch_len)?)
        .map_err(|_| r.error("architecture block is not UTF-8"))?;
    let arch = ArchConfig::parse(arch_text)?;
    let count = r.u32_le()? as usize;
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let (id, kind, tensor) = read_tensor_record::<T>(&mut r)?;
        if records.insert((id.clone(), kind), tensor).is_some() {
            return Err(r.error(format!("duplicate tensor record for '{id}' kind {kind}")));
        }
    }
    if !r.done() {
        return Err(r.error(format!("{} trailing bytes after the last record", r.remaining())));
    }
    let mut net = Network::from_arch(&arch, 0)?;
    apply_records(&mut net.layers, &mut records)?;
    if let Some(((id, kind), _)) = records.into_iter().next() {
        return Err(format_err(
            path,
            format!("tensor record for '{id}' kind {kind} matches no layer"),
        ));
    }
    net.validate()?;
    Ok(net)
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    let bytes = read_file(path.as_ref())?;
    model_from_bytes(&bytes, Some(path.as_ref()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use crate::pruner::prune_branch;
    use tempfile::TempDir;

    fn nets() -> (Network<f32>, Network<f32>) {
        (
            Network::from_arch(&ArchConfig::preset("lenet-desk").unwrap(), 11).unwrap(),
            Network::from_arch(&ArchConfig::preset("resnet-desk").unwrap(), 12).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let (lenet, resnet) = nets();
        for net in [lenet, resnet] {
            let bytes = model_bytes(&net).unwrap();
            let loaded: Network<f32> = model_from_bytes(&bytes, None).unwrap();
            let again = model_bytes(&loaded).unwrap();
            assert_eq!(bytes, again);
            // loaded tensors bit-equal
            let x = crate::dataset::synth_dataset::<f32>(1, 1, 2, [1, 28, 28]).unwrap();
            let a = net.forward(x.image(0)).unwrap();
            let b = loaded.forward(x.image(0)).unwrap();
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn save_load_through_files() {
        let dir = TempDir::new().unwrap();
        let (net, _) = nets();
        let p = dir.path().join("model.pkm");
        save_model(&net, &p).unwrap();
        let loaded: Network<f32> = load_model(&p).unwrap();
        let p2 = dir.path().join("model2.pkm");
        save_model(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn corrupting_any_byte_fails_checksum() {
        let (net, _) = nets();
        let bytes = model_bytes(&net).unwrap();
        for pos in [0usize, 5, bytes.len() / 2, bytes.len() - 5] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            let err = model_from_bytes::<f32>(&bad, None).unwrap_err();
            let msg = err.to_string();
            assert!(
                msg.contains("checksum") || msg.contains("magic"),
                "byte {pos}: {msg}"
            );
        }
    }

    #[test]
    fn truncation_and_magic_are_reported() {
        let (net, _) = nets();
        let bytes = model_bytes(&net).unwrap();
        let err = model_from_bytes::<f32>(&bytes[..3], None).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"XXXX");
        // fix the checksum so magic is what fails
        wrong.truncate(wrong.len() - 4);
        super::append_checksum(&mut wrong);
        let err = model_from_bytes::<f32>(&wrong, None).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn pruned_branch_leaves_no_branch_records() {
        let (_, resnet) = nets();
        let with = model_bytes(&resnet).unwrap();
        let without = model_bytes(&prune_branch(&resnet, "block1").unwrap()).unwrap();
        let needle = b"block1_conv_a";
        let contains = |hay: &[u8]| hay.windows(needle.len()).any(|w| w == needle);
        assert!(contains(&with));
        assert!(!contains(&without));
        // and the pruned file still loads
        let loaded: Network<f32> = model_from_bytes(&without, None).unwrap();
        assert!(matches!(
            loaded.layers[loaded.layer_index("block1").unwrap()].op,
            LayerOp::Relu
        ));
    }

    #[test]
    fn missing_and_extra_records_rejected() {
        let (net, _) = nets();
        let bytes = model_bytes(&net).unwrap();
        // chop the record count down by one without touching the byte stream
        // is fiddly; instead parse-modify-reserialize through the public API:
        // build bytes for a smaller net, then claim the lenet arch.
        let arch_small = ArchConfig::parse(
            "schema = \"prunekit-arch-v1\"\n\
             input = [1, 28, 28]\n\
             class_count = 10\n\n\
             [[layer]]\nid = \"conv1\"\nkind = \"conv\"\nfilters = 8\nkernel = 5\nstride = 1\npadding = 0\n\n\
             [[layer]]\nid = \"fl\"\nkind = \"flatten\"\n\n\
             [[layer]]\nid = \"out\"\nkind = \"affine\"\nunits = 10\n",
        )
        .unwrap();
        let small = Network::<f32>::from_arch(&arch_small, 3).unwrap();
        let small_bytes = model_bytes(&small).unwrap();
        // transplant lenet's arch block onto the small net's records
        let arch_text = net.to_arch().render();
        let mut franken = Vec::new();
        franken.extend_from_slice(MODEL_MAGIC);
        franken.extend_from_slice(&(arch_text.len() as u32).to_le_bytes());
        franken.extend_from_slice(arch_text.as_bytes());
        // copy record section from small (skip its magic+arch header)
        let small_arch_len = u32::from_le_bytes(small_bytes[4..8].try_into().unwrap()) as usize;
        let records = &small_bytes[8 + small_arch_len..small_bytes.len() - 4];
        franken.extend_from_slice(records);
        append_checksum(&mut franken);
        let err = model_from_bytes::<f32>(&franken, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("missing") || msg.contains("shape"), "{msg}");
        let _ = bytes;
    }
}
