//! IDX dataset files (the published MNIST container): big-endian headers,
//! one byte per pixel/label.

use super::{format_err, io_err};
use crate::dataset::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::Read;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct IdxFile {
    magic: u32,
    extents: Vec<usize>,
    data: Vec<u8>,
}

/// Streaming reader: header first, then the payload in fixed-size chunks, so
/// the result cannot depend on how the bytes arrive.
fn read_idx(path: &Path) -> Result<IdxFile> {
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut head = [0u8; 4];
    file.read_exact(&mut head)
        .map_err(|_| format_err(Some(path), "truncated: missing magic"))?;
    let magic = u32::from_be_bytes(head);
    let dims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(format_err(
                Some(path),
                format!("magic mismatch: {other:#010x} is neither images ({IDX_IMAGES_MAGIC:#010x}) nor labels ({IDX_LABELS_MAGIC:#010x})"),
            ))
        }
    };
    let mut extents = Vec::with_capacity(dims);
    for _ in 0..dims {
        let mut e = [0u8; 4];
        file.read_exact(&mut e)
            .map_err(|_| format_err(Some(path), "truncated: incomplete extent list"))?;
        extents.push(u32::from_be_bytes(e) as usize);
    }
    let expected: usize = extents.iter().product();
    let mut data = Vec::with_capacity(expected);
    let mut chunk = [0u8; 8192];
    loop {
        let n = file.read(&mut chunk).map_err(|e| io_err(path, e))?;
        if n == 0 {
            break;
        }
        data.extend_from_slice(&chunk[..n]);
    }
    if data.len() != expected {
        return Err(format_err(
            Some(path),
            format!("truncated: header promises {expected} payload bytes, found {}", data.len()),
        ));
    }
    Ok(IdxFile { magic, extents, data })
}

/// Load an MNIST-style image/label pair into a dataset; pixels scale to
/// [0, 1], labels must lie in [0, 10).
pub fn load_idx<T: Scalar>(
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
    split: SplitTag,
) -> Result<Dataset<T>> {
    let images = read_idx(image_path.as_ref())?;
    let labels = read_idx(label_path.as_ref())?;
    if images.magic != IDX_IMAGES_MAGIC {
        return Err(format_err(
            Some(image_path.as_ref()),
            "magic mismatch: expected an images file",
        ));
    }
    if labels.magic != IDX_LABELS_MAGIC {
        return Err(format_err(
            Some(label_path.as_ref()),
            "magic mismatch: expected a labels file",
        ));
    }
    let n = images.extents[0];
    if labels.extents[0] != n {
        return Err(format_err(
            Some(label_path.as_ref()),
            format!("count mismatch: {n} images but {} labels", labels.extents[0]),
        ));
    }
    let (rows, cols) = (images.extents[1], images.extents[2]);
    let per = rows * cols;
    let mut imgs = Vec::with_capacity(n);
    for i in 0..n {
        let bytes = &images.data[i * per..(i + 1) * per];
        let data: Vec<T> = bytes.iter().map(|&b| T::from_acc(f64::from(b) / 255.0)).collect();
        imgs.push(Tensor::new(vec![1, rows, cols], data)?);
    }
    let mut lbls = Vec::with_capacity(n);
    for (i, &b) in labels.data.iter().enumerate() {
        if b >= 10 {
            return Err(format_err(
                Some(label_path.as_ref()),
                format!("label {b} at example {i} outside [0, 10)"),
            ));
        }
        lbls.push(b as usize);
    }
    Dataset::new(imgs, lbls, split, 10)
}

/// Write a dataset back out as an IDX image/label pair (test fixtures and
/// subset staging). Pixel values are clamped to [0, 1] and scaled to bytes.
pub fn save_idx<T: Scalar>(
    data: &Dataset<T>,
    image_path: impl AsRef<Path>,
    label_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = data
        .image_shape()
        .ok_or(Error::EmptyDataset { op: "save_idx" })?;
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::invalid(
            "save_idx",
            format!("IDX stores single-channel images, got shape {shape:?}"),
        ));
    }
    let (rows, cols) = (shape[1], shape[2]);
    let mut img_bytes = Vec::with_capacity(16 + data.len() * rows * cols);
    img_bytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    img_bytes.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(rows as u32).to_be_bytes());
    img_bytes.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lbl_bytes = Vec::with_capacity(8 + data.len());
    lbl_bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbl_bytes.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for i in 0..data.len() {
        for &v in data.image(i).data() {
            let b = (v.to_acc().clamp(0.0, 1.0) * 255.0).round() as u8;
            img_bytes.push(b);
        }
        lbl_bytes.push(data.label(i) as u8);
    }
    super::write_file(image_path.as_ref(), &img_bytes)?;
    super::write_file(label_path.as_ref(), &lbl_bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write_pair(dir: &Path, imgs: &[[u8; 4]], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let ip = dir.join("imgs.idx");
        let lp = dir.join("lbls.idx");
        let mut ib = Vec::new();
        ib.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        ib.extend_from_slice(&(imgs.len() as u32).to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        ib.extend_from_slice(&2u32.to_be_bytes());
        for img in imgs {
            ib.extend_from_slice(img);
        }
        std::fs::write(&ip, ib).unwrap();
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        std::fs::write(&lp, lb).unwrap();
        (ip, lp)
    }

    #[test]
    fn hand_built_pair_loads_exactly() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[[0, 51, 102, 255], [255, 0, 0, 0]], &[3, 7]);
        let ds = load_idx::<f32>(&ip, &lp, SplitTag::Test).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.image(0).shape(), &[1, 2, 2]);
        assert_eq!(ds.image(0).data(), &[0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.label(1), 7);
    }

    #[test]
    fn count_mismatch_is_distinct() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[[0; 4], [0; 4]], &[1]);
        let err = load_idx::<f32>(&ip, &lp, SplitTag::Test).unwrap_err();
        assert!(err.to_string().contains("count mismatch"), "{err}");
    }

    #[test]
    fn magic_mismatch_is_distinct() {
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("bad.idx");
        std::fs::write(&p, 0x12345678u32.to_be_bytes()).unwrap();
        let (_, lp) = write_pair(dir.path(), &[[0; 4]], &[1]);
        let err = load_idx::<f32>(&p, &lp, SplitTag::Test).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"), "{err}");
        // images where labels belong
        let (ip, _) = write_pair(dir.path(), &[[0; 4]], &[1]);
        let err = load_idx::<f32>(&ip, &ip, SplitTag::Test).unwrap_err();
        assert!(err.to_string().contains("magic mismatch"), "{err}");
    }

    #[test]
    fn truncation_is_distinct() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[[0; 4]], &[1]);
        let mut bytes = std::fs::read(&ip).unwrap();
        bytes.truncate(bytes.len() - 2);
        std::fs::write(&ip, bytes).unwrap();
        let err = load_idx::<f32>(&ip, &lp, SplitTag::Test).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn out_of_range_label_rejected() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[[0; 4]], &[11]);
        let err = load_idx::<f32>(&ip, &lp, SplitTag::Test).unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = TempDir::new().unwrap();
        let (ip, lp) = write_pair(dir.path(), &[[10, 20, 30, 40], [200, 210, 220, 230]], &[0, 9]);
        let ds = load_idx::<f32>(&ip, &lp, SplitTag::Train).unwrap();
        let ip2 = dir.path().join("imgs2.idx");
        let lp2 = dir.path().join("lbls2.idx");
        save_idx(&ds, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());
    }
}
