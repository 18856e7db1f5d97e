//! Parameter checkpoint archive: a JSON manifest followed by raw
//! little-endian float64 buffers. Round trips are bit-exact.
//!
//! Layout: magic "SFGC" | u32 version | u64 manifest length | manifest JSON
//! | concatenated buffers. Manifest entries carry (name, shape, offset into
//! the buffer section, element count).

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"SFGC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
}

/// A loaded checkpoint entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Write named tensors to `path`.
pub fn save(params: &[(String, Tensor)], path: &Path) -> Result<()> {
    let mut entries = Vec::with_capacity(params.len());
    let mut offset = 0u64;
    for (name, t) in params {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        });
        offset += t.numel() as u64 * 8;
    }
    let manifest =
        serde_json::to_vec(&Manifest { entries }).map_err(|e| Error::Format(e.to_string()))?;
    let mut f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let io = |e| Error::io(path.display().to_string(), e);
    f.write_all(MAGIC).map_err(io)?;
    f.write_all(&VERSION.to_le_bytes()).map_err(io)?;
    f.write_all(&(manifest.len() as u64).to_le_bytes()).map_err(io)?;
    f.write_all(&manifest).map_err(io)?;
    for (_, t) in params {
        let d = t.data();
        let mut bytes = Vec::with_capacity(d.len() * 8);
        for v in d.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&bytes).map_err(io)?;
    }
    Ok(())
}

/// Read all entries from `path`.
pub fn load(path: &Path) -> Result<Vec<Entry>> {
    let mut f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a checkpoint archive (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + mlen {
        return Err(Error::Format(format!("{}: truncated manifest", path.display())));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + mlen])
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    let data = &bytes[16 + mlen..];
    let mut out = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        let start = e.offset as usize;
        let end = start + e.len as usize * 8;
        if end > data.len() {
            return Err(Error::Format(format!(
                "{}: truncated buffer for entry {}",
                path.display(),
                e.name
            )));
        }
        let vals: Vec<f64> = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if e.shape.iter().product::<usize>() != vals.len() {
            return Err(Error::Format(format!(
                "{}: entry {} shape {:?} does not match {} values",
                path.display(),
                e.name,
                e.shape,
                vals.len()
            )));
        }
        out.push(Entry {
            name: e.name,
            shape: e.shape,
            data: vals,
        });
    }
    Ok(out)
}

/// Restore loaded entries into live parameters, matched by name.
pub fn restore(params: &[(String, Tensor)], entries: &[Entry]) -> Result<()> {
    for (name, t) in params {
        let e = entries
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing parameter {name}")))?;
        if e.shape != t.shape() {
            return Err(Error::Format(format!(
                "checkpoint entry {name} has shape {:?}, model expects {:?}",
                e.shape,
                t.shape()
            )));
        }
        t.set_data(e.data.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sfgc");
        let params = vec![
            (
                "w".to_string(),
                Tensor::param(vec![1.0, -0.5, 1e-300, f64::MIN_POSITIVE], &[2, 2]).unwrap(),
            ),
            ("b".to_string(), Tensor::param(vec![0.25], &[1]).unwrap()),
        ];
        save(&params, &path).unwrap();
        let entries = load(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].data, params[0].1.to_vec());
        assert_eq!(entries[1].data, params[1].1.to_vec());

        // save -> load -> save produces identical bytes
        let path2 = dir.path().join("ck2.sfgc");
        let reparams: Vec<(String, Tensor)> = entries
            .iter()
            .map(|e| {
                (
                    e.name.clone(),
                    Tensor::param(e.data.clone(), &e.shape).unwrap(),
                )
            })
            .collect();
        save(&reparams, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.sfgc");
        let params = vec![(
            "w".to_string(),
            Tensor::param(vec![1.0; 16], &[4, 4]).unwrap(),
        )];
        save(&params, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(Error::Format(_))));
    }
}
