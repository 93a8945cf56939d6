use serde::{Deserialize, Serialize};

use super::train::ChannelStats;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::numerics::{Dtype, Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MCPK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: usize,
    /// Element count.
    len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    dtype: Dtype,
    config_hash: String,
    model: ModelConfig,
    channel_ids: Vec<u16>,
    stats: ChannelStats,
    entries: Vec<EntryMeta>,
}

/// A trained model bundle: parameters, the configuration they were
/// built with, and the normalization statistics needed at inference.
pub struct Checkpoint<E: Scalar> {
    pub params: ModelParams<Tensor<E>>,
    pub model: ModelConfig,
    pub stats: ChannelStats,
    pub config_hash: String,
}

/// FNV-1a over the canonical JSON of any serializable config.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Serialize: magic, version, u64 manifest length, manifest JSON, then
/// the raw little-endian tensor blobs in manifest order.
pub fn checkpoint_to_bytes<E: Scalar>(ckpt: &Checkpoint<E>) -> Result<Vec<u8>> {
    let named = ckpt.params.named_tensors();
    let mut entries = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    for nt in &named {
        entries.push(EntryMeta {
            name: nt.name.clone(),
            shape: nt.tensor.shape().to_vec(),
            offset,
            len: nt.tensor.len(),
        });
        offset += nt.tensor.len() * E::BYTE_WIDTH;
    }
    let manifest = Manifest {
        dtype: E::DTYPE,
        config_hash: ckpt.config_hash.clone(),
        model: ckpt.model,
        channel_ids: ckpt.params.channel_ids.clone(),
        stats: ckpt.stats.clone(),
        entries,
    };
    let mjson = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(13 + mjson.len() + offset);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(mjson.len() as u64).to_le_bytes());
    out.extend_from_slice(&mjson);
    for nt in &named {
        for &x in nt.tensor.data() {
            out.extend_from_slice(&x.to_le_bytes_vec());
        }
    }
    Ok(out)
}

pub fn checkpoint_from_bytes<E: Scalar>(bytes: &[u8]) -> Result<Checkpoint<E>> {
    let bad = |msg: &str| Error::Checkpoint(msg.to_string());
    if bytes.len() < 13 {
        return Err(bad("file too short"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad("unsupported version"));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    if bytes.len() < 13 + mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[13..13 + mlen])?;
    if manifest.dtype != E::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: file holds {}, loader wants {}",
            manifest.dtype,
            E::DTYPE
        )));
    }
    let blob = &bytes[13 + mlen..];
    // template with the right shapes, then overwrite by name
    let mut params = ModelParams::<Tensor<E>>::init(&manifest.model, &manifest.channel_ids, 0)?;
    let mut consumed = 0usize;
    let mut by_name: std::collections::HashMap<&str, &EntryMeta> = manifest
        .entries
        .iter()
        .map(|e| (e.name.as_str(), e))
        .collect();
    for (name, tensor) in params.fields_mut() {
        let entry = by_name
            .remove(name.as_str())
            .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))?;
        if entry.shape != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch for {name}: file {:?}, model {:?}",
                entry.shape,
                tensor.shape()
            )));
        }
        let start = entry.offset;
        let end = start + entry.len * E::BYTE_WIDTH;
        if end > blob.len() {
            return Err(bad("truncated blob"));
        }
        for (i, x) in tensor.data_mut().iter_mut().enumerate() {
            *x = E::from_le_slice(&blob[start + i * E::BYTE_WIDTH..]);
        }
        consumed += entry.len * E::BYTE_WIDTH;
    }
    if !by_name.is_empty() {
        return Err(Error::Checkpoint(format!(
            "unknown entries in file: {:?}",
            by_name.keys().collect::<Vec<_>>()
        )));
    }
    if consumed != blob.len() {
        return Err(bad("blob size mismatch"));
    }
    Ok(Checkpoint {
        params,
        model: manifest.model,
        stats: manifest.stats,
        config_hash: manifest.config_hash,
    })
}

pub fn save_checkpoint<E: Scalar>(path: &std::path::Path, ckpt: &Checkpoint<E>) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint<E: Scalar>(path: &std::path::Path) -> Result<Checkpoint<E>> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_checkpoint() -> Checkpoint<f32> {
        let mut cfg = ModelConfig::tiny(3);
        cfg.h = 16;
        cfg.w = 16;
        cfg.p = 8;
        let params = ModelParams::init(&cfg, &[0, 5, 7], 42).unwrap();
        Checkpoint {
            params,
            model: cfg,
            stats: ChannelStats {
                ids: vec![0, 5, 7],
                mean: vec![0.1, 0.2, 0.3],
                std: vec![1.0, 2.0, 3.0],
            },
            config_hash: config_hash(&cfg),
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ckpt = sample_checkpoint();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let loaded = checkpoint_from_bytes::<f32>(&bytes).unwrap();
        let bytes2 = checkpoint_to_bytes(&loaded).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(loaded.stats, ckpt.stats);
        assert_eq!(loaded.params.channel_ids, ckpt.params.channel_ids);
        for (a, b) in ckpt
            .params
            .named_tensors()
            .iter()
            .zip(loaded.params.named_tensors().iter())
        {
            assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
        }
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let ckpt = sample_checkpoint();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        assert!(matches!(
            checkpoint_from_bytes::<f64>(&bytes),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let ckpt = sample_checkpoint();
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        assert!(checkpoint_from_bytes::<f32>(&bytes[..20]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(checkpoint_from_bytes::<f32>(&bad).is_err());
        let mut truncated = bytes.clone();
        truncated.truncate(bytes.len() - 8);
        assert!(checkpoint_from_bytes::<f32>(&truncated).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mcpk");
        let ckpt = sample_checkpoint();
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.config_hash, ckpt.config_hash);
        // save -> load -> save produces identical bytes on disk
        let path2 = dir.path().join("model2.mcpk");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let cfg = ModelConfig::tiny(3);
        let a = config_hash(&cfg);
        let b = config_hash(&cfg);
        assert_eq!(a, b);
        let mut cfg2 = cfg;
        cfg2.d = 16;
        assert_ne!(a, config_hash(&cfg2));
    }
}
