//! Multi-tensor container: a payload file of concatenated PNPL blocks plus a
//! JSON index (`<payload>.json`) naming each block, its logical shape, and
//! its byte range. Used for inversion records and toy checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct IndexEntry {
    pub name: String,
    /// Logical shape; may differ in rank from the stored 3-d block.
    pub shape: Vec<usize>,
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ContainerIndex {
    pub kind: String,
    pub meta: serde_json::Value,
    pub entries: Vec<IndexEntry>,
}

pub fn index_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_container(
    payload: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Vec<usize>, &LatentTensor)],
) -> Result<()> {
    let mut buf = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, t) in tensors {
        let offset = buf.len() as u64;
        t.write_to(&mut buf).expect("writing to a Vec cannot fail");
        entries.push(IndexEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            bytes: buf.len() as u64 - offset,
        });
    }
    let index = ContainerIndex {
        kind: kind.to_string(),
        meta,
        entries,
    };
    fs::write(payload, &buf).map_err(|e| Error::io(payload, e))?;
    let json = serde_json::to_string_pretty(&index).expect("index serializes");
    let ipath = index_path(payload);
    fs::write(&ipath, json + "\n").map_err(|e| Error::io(&ipath, e))
}

pub fn read_container(payload: &Path, kind: &str) -> Result<(ContainerIndex, Vec<LatentTensor>)> {
    let ipath = index_path(payload);
    let text = fs::read_to_string(&ipath).map_err(|e| Error::io(&ipath, e))?;
    let index: ContainerIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", ipath.display())))?;
    if index.kind != kind {
        return Err(Error::Format(format!(
            "{}: expected container kind {kind:?}, found {:?}",
            ipath.display(),
            index.kind
        )));
    }
    let bytes = fs::read(payload).map_err(|e| Error::io(payload, e))?;
    let mut tensors = Vec::with_capacity(index.entries.len());
    for entry in &index.entries {
        let start = entry.offset as usize;
        let end = start
            .checked_add(entry.bytes as usize)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Format(format!("entry {} exceeds payload", entry.name)))?;
        let t = LatentTensor::from_bytes(&bytes[start..end])?;
        if t.shape().numel() != entry.shape.iter().product::<usize>() {
            return Err(Error::Format(format!(
                "entry {}: block {} does not match logical shape {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        tensors.push(t);
    }
    Ok((index, tensors))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn container_round_trip_and_kind_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        let a = LatentTensor::filled(Shape::new(1, 2, 2), 1.5);
        let b = LatentTensor::filled(Shape::new(2, 1, 3), -2.0);
        write_container(
            &p,
            "test",
            serde_json::json!({"k": 1}),
            &[("a".into(), vec![4], &a), ("b".into(), vec![2, 3], &b)],
        )
        .unwrap();
        let (idx, ts) = read_container(&p, "test").unwrap();
        assert_eq!(idx.entries.len(), 2);
        assert_eq!(idx.meta["k"], 1);
        assert_eq!(ts, vec![a, b]);
        assert!(matches!(read_container(&p, "other"), Err(Error::Format(_))));
    }
}
