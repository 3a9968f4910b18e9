//! Versioned checkpoint archive.
//!
//! Layout: 8-byte magic, little-endian `u32` version, little-endian `u64`
//! header length, UTF-8 JSON header, then raw little-endian `f64` tensor
//! data in the order listed by the header.

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"GCCKPT\0\0";

/// Position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes: [u8; 32] = hex::decode(&self.seed).ok()?.try_into().ok()?;
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    stage: String,
    config_hash: String,
    upstream: BTreeMap<String, String>,
    epoch: u64,
    rng: RngState,
    optimizer: Option<Adam>,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to resume or consume one training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub config_hash: String,
    /// Hashes of the checkpoints this stage was trained against.
    pub upstream: BTreeMap<String, String>,
    pub epoch: u64,
    pub rng: RngState,
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub meta: serde_json::Value,
}

fn ck_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.to_path_buf(), msg: msg.into() }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut blob: Vec<u8> = Vec::new();
        let mut push = |group: &str, name: &str, t: &Tensor| {
            tensors.push(TensorEntry { group: group.into(), name: name.into(), shape: t.shape().to_vec() });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (k, t) in self.params.iter() {
            push("param", k, t);
        }
        if let Some(opt) = &self.optimizer {
            for (k, t) in &opt.m {
                push("adam_m", k, t);
            }
            for (k, t) in &opt.v {
                push("adam_v", k, t);
            }
        }
        let header = Header {
            stage: self.stage.clone(),
            config_hash: self.config_hash.clone(),
            upstream: self.upstream.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizer: self.optimizer.clone(),
            meta: self.meta.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ck_err(path, "not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(path, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| ck_err(path, "truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| ck_err(path, e.to_string()))?;
        let mut off = 20 + hlen;
        let mut params = ParamStore::new();
        let mut optimizer = header.optimizer;
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(off..off + 8 * n).ok_or_else(|| ck_err(path, "truncated tensor data"))?;
            off += 8 * n;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::from_vec(&e.shape, data);
            match (e.group.as_str(), optimizer.as_mut()) {
                ("param", _) => params.insert(e.name, t),
                ("adam_m", Some(o)) => {
                    o.m.insert(e.name, t);
                }
                ("adam_v", Some(o)) => {
                    o.v.insert(e.name, t);
                }
                (g, _) => return Err(ck_err(path, format!("unexpected tensor group '{g}'"))),
            }
        }
        if off != bytes.len() {
            return Err(ck_err(path, "trailing bytes"));
        }
        Ok(Self {
            stage: header.stage,
            config_hash: header.config_hash,
            upstream: header.upstream,
            epoch: header.epoch,
            rng: header.rng,
            params,
            optimizer,
            meta: header.meta,
        })
    }

    /// Writes the archive and returns its SHA-256 hex digest.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        }
        std::fs::write(path, &bytes).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Reads an archive, rejecting it when `expected_config` is given and
    /// does not match. Returns the checkpoint and its SHA-256 hex digest.
    pub fn load(path: &Path, expected_config: Option<&str>) -> Result<(Self, String)> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let ck = Self::from_bytes(&bytes, path)?;
        if let Some(exp) = expected_config {
            if ck.config_hash != exp {
                return Err(ck_err(
                    path,
                    format!("config hash mismatch: archive {} vs run {exp}", ck.config_hash),
                ));
            }
        }
        Ok((ck, hex::encode(Sha256::digest(&bytes))))
    }

    /// SHA-256 hex digest of a file.
    pub fn file_hash(path: &Path) -> Result<String> {
        let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample() -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        rng.next_u64();
        let mut params = ParamStore::new();
        params.insert("a.w", Tensor::from_vec(&[2, 2], vec![1.0, -2.5, 3.25, f64::MIN_POSITIVE]));
        params.insert("a.b", Tensor::from_vec(&[2], vec![0.0, 1e300]));
        let mut opt = Adam::new(1e-3);
        let grads = params.iter().map(|(k, t)| (k.clone(), t.map(|v| v * 0.5))).collect();
        let mut p2 = params.clone();
        opt.step(&mut p2, &grads);
        Checkpoint {
            stage: "lg".into(),
            config_hash: "abc".into(),
            upstream: BTreeMap::from([("pretrain".into(), "ff".into())]),
            epoch: 7,
            rng: RngState::capture(&rng),
            params: p2,
            optimizer: Some(opt),
            meta: serde_json::json!({"note": 1}),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        let ck = sample();
        let h1 = ck.save(&path).unwrap();
        let (back, h2) = Checkpoint::load(&path, Some("abc")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
    }

    #[test]
    fn rejects_config_mismatch_and_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        sample().save(&path).unwrap();
        assert!(Checkpoint::load(&path, Some("other")).is_err());
        std::fs::write(&path, b"nope").unwrap();
        assert!(Checkpoint::load(&path, None).is_err());
    }

    #[test]
    fn rng_state_resumes_stream() {
        let mut a = ChaCha8Rng::seed_from_u64(1);
        a.next_u32();
        let mut b = RngState::capture(&a).restore().unwrap();
        assert_eq!(a.next_u64(), b.next_u64());
    }
}
