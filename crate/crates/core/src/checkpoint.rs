//! Checkpoint files: a named parameter table with shapes and 64-bit
//! little-endian values.
//!
//! Layout:
//!
//! ```text
//! magic "FSEGCKP1" | u32 version=1 | u32 entry_count
//! per entry: u32 name_len | utf-8 name | u32 ndim | u32 dims… | f64le values
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::write_atomic;

const CKPT_MAGIC: &[u8; 8] = b"FSEGCKP1";

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl CheckpointEntry {
    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        CheckpointEntry {
            name: name.into(),
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(name: impl Into<String>, values: Vec<f64>) -> Self {
        CheckpointEntry {
            name: name.into(),
            shape: vec![values.len()],
            data: values,
        }
    }
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::ShapeMismatch {
                op: "write_checkpoint",
                lhs: e.shape.clone(),
                rhs: vec![e.data.len()],
            });
        }
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::format(path, "checkpoint", why);
    if bytes.len() < 16 || &bytes[..8] != CKPT_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut pos = 8usize;
    let read_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        if *pos + 4 > bytes.len() {
            return Err(Error::format(path, "checkpoint", "truncated"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    if read_u32(&bytes, &mut pos)? != 1 {
        return Err(bad("unsupported version"));
    }
    let count = read_u32(&bytes, &mut pos)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&bytes, &mut pos)? as usize;
        if pos + name_len > bytes.len() {
            return Err(bad("truncated name"));
        }
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| Error::format(path, "checkpoint", "name not utf-8"))?;
        pos += name_len;
        let ndim = read_u32(&bytes, &mut pos)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&bytes, &mut pos)? as usize);
        }
        let numel: usize = shape.iter().product();
        if pos + numel * 8 > bytes.len() {
            return Err(bad("truncated values"));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let off = pos + i * 8;
            data.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        }
        pos += numel * 8;
        entries.push(CheckpointEntry { name, shape, data });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(entries)
}

/// Look up one entry by name.
pub fn find_entry<'a>(entries: &'a [CheckpointEntry], name: &str, path: &Path) -> Result<&'a CheckpointEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::format(path, "checkpoint", format!("missing entry `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_preserves_names_shapes_and_bits() {
        let dir = std::env::temp_dir().join("fusionseg-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let entries = vec![
            CheckpointEntry {
                name: "enc.conv1.weight".into(),
                shape: vec![27, 4],
                data: (0..108).map(|i| (i as f64) * 0.125 - 3.0).collect(),
            },
            CheckpointEntry::scalar("meta.kind", 1.0),
            CheckpointEntry::vector("meta.widths", vec![4.0, 8.0, 16.0, 32.0]),
        ];
        write_checkpoint(&path, &entries).unwrap();
        let back = read_checkpoint(&path).unwrap();
        assert_eq!(entries, back);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = std::env::temp_dir().join("fusionseg-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
