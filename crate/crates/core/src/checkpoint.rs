//! Single-file checkpoint container: a magic header, a version, a JSON
//! manifest (array names, shapes, offsets, config digest) and raw
//! little-endian f32 blobs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CKPTRID1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob section, in f32 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_digest: String,
    arrays: Vec<ManifestEntry>,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<A: Scalar> {
    pub version: u32,
    pub config_digest: String,
    pub arrays: Vec<(String, Tensor<A>)>,
}

impl<A: Scalar> Checkpoint<A> {
    pub fn tensor(&self, name: &str) -> Result<&Tensor<A>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Load(format!("checkpoint has no array '{name}'")))
    }
}

/// Write arrays and the configuration digest to one file.
pub fn save_checkpoint<A: Scalar>(
    path: &Path,
    arrays: &[(String, Tensor<A>)],
    config_digest: &str,
) -> Result<()> {
    if arrays.is_empty() {
        return Err(Error::Input("refusing to write an empty checkpoint".into()));
    }
    let mut entries = Vec::with_capacity(arrays.len());
    let mut offset = 0usize;
    for (name, t) in arrays {
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("array '{name}'")));
        }
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config_digest: config_digest.to_string(),
        arrays: entries,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&manifest_bytes)?;
    for (_, t) in arrays {
        for v in t.data() {
            f.write_all(&(v.to_f64_() as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

/// Read a checkpoint, validating the header and every array extent.
pub fn load_checkpoint<A: Scalar>(path: &Path) -> Result<Checkpoint<A>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| Error::Load("file too short for a checkpoint header".into()))?;
    if &magic != MAGIC {
        return Err(Error::Load("bad magic: not a checkpoint file".into()));
    }
    let mut len_bytes = [0u8; 8];
    f.read_exact(&mut len_bytes)
        .map_err(|_| Error::Load("truncated manifest length".into()))?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    f.read_exact(&mut manifest_bytes)
        .map_err(|_| Error::Load("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }
    let mut blob = Vec::new();
    f.read_to_end(&mut blob)?;
    let total: usize = manifest.arrays.iter().map(|e| e.len).sum();
    if blob.len() != total * 4 {
        // Name the first array whose extent runs past the data we have.
        let available = blob.len() / 4;
        let culprit = manifest
            .arrays
            .iter()
            .find(|e| e.offset + e.len > available)
            .map(|e| e.name.clone())
            .unwrap_or_else(|| "<trailing data>".to_string());
        return Err(Error::Load(format!(
            "blob size {} does not match manifest total {} (array '{culprit}')",
            blob.len(),
            total * 4
        )));
    }
    let mut arrays = Vec::with_capacity(manifest.arrays.len());
    for e in &manifest.arrays {
        let expected: usize = e.shape.iter().product();
        if expected != e.len {
            return Err(Error::Load(format!(
                "array '{}': shape {:?} does not contain {} elements",
                e.name, e.shape, e.len
            )));
        }
        let start = e.offset * 4;
        let data: Vec<A> = blob[start..start + e.len * 4]
            .chunks_exact(4)
            .map(|c| A::from_f64_(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(e.shape.clone(), data);
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("array '{}'", e.name)));
        }
        arrays.push((e.name.clone(), t));
    }
    Ok(Checkpoint {
        version: manifest.version,
        config_digest: manifest.config_digest,
        arrays,
    })
}
