//! File formats: IDX datasets, PKM1 model containers, PKC1 compressed
//! containers, and CSV/JSON exports. IDX keeps its published big-endian
//! layout; everything artifact-native is little-endian and ends with a
//! CRC-32 of all preceding bytes.

pub mod compressed;
pub mod idx;
pub mod model;
pub mod text;

use crate::error::{Error, Result};
use std::io::Read;
use std::path::Path;

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::io(path, source)
}

pub(crate) fn format_err(path: Option<&Path>, detail: impl Into<String>) -> Error {
    match path {
        Some(p) => Error::format_at(p, detail),
        None => Error::format(detail),
    }
}

/// Cursor over an in-memory buffer with format-error reporting.
pub(crate) struct ByteReader<'b> {
    buf: &'b [u8],
    pos: usize,
    path: Option<&'b Path>,
}

impl<'b> ByteReader<'b> {
    pub fn new(buf: &'b [u8], path: Option<&'b Path>) -> Self {
        ByteReader { buf, pos: 0, path }
    }

    pub fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(format_err(
                self.path,
                format!("truncated: wanted {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32_le(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn f32_le(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }


    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn error(&self, detail: impl Into<String>) -> Error {
        format_err(self.path, detail)
    }
}

/// Verify the trailing CRC-32 and return the payload before it.
pub(crate) fn split_checksummed<'b>(buf: &'b [u8], path: &Path) -> Result<&'b [u8]> {
    if buf.len() < 4 {
        return Err(format_err(Some(path), "truncated: no room for checksum"));
    }
    let (payload, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(format_err(
            Some(path),
            format!("checksum mismatch: stored {stored:#010x}, computed {actual:#010x}"),
        ));
    }
    Ok(payload)
}

/// Append the CRC-32 of everything written so far.
pub(crate) fn append_checksum(buf: &mut Vec<u8>) {
    let crc = crc32fast::hash(buf);
    buf.extend_from_slice(&crc.to_le_bytes());
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(buf)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}
