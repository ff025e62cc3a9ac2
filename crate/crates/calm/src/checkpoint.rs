//! Checkpoint directories: `index.json` (tensor name → shape, dtype, byte
//! offset), `tensors.bin` (little-endian f32 blob), `config.json` (resolved
//! run configuration) and, when a vocabulary exists, `vocab.txt`.

use std::fs;
use std::path::Path;

use calm_core::config::RunConfig;
use calm_core::corpus::Vocab;
use calm_core::tensor::Tensor;
use calm_core::train::Store;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{format_err, io_err, Result};

pub const INDEX: &str = "index.json";
pub const BLOB: &str = "tensors.bin";
pub const CONFIG: &str = "config.json";
pub const VOCAB: &str = "vocab.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// byte offset into the blob
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Index {
    pub tensors: Vec<TensorEntry>,
    pub label_names: Vec<String>,
    /// SHA-256 of the blob
    pub id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub store: Store,
    pub config: RunConfig,
    pub vocab: Option<Vocab>,
    pub label_names: Vec<String>,
    pub id: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = vocab.tokens().join("\n");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(Vocab::from_tokens(text.lines().map(str::to_string).collect())?)
}

/// Writes a checkpoint and returns its id.
pub fn save(dir: &Path, store: &Store, config: &RunConfig, vocab: Option<&Vocab>, label_names: &[String]) -> Result<String> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(store.scalar_count() * 4);
    let mut tensors = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        tensors.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), dtype: "f32".into(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let id = sha256_hex(&blob);
    let index = Index { tensors, label_names: label_names.to_vec(), id: id.clone() };
    let write = |name: &str, bytes: &[u8]| fs::write(dir.join(name), bytes).map_err(io_err(dir.join(name)));
    write(BLOB, &blob)?;
    write(INDEX, &serde_json::to_vec_pretty(&index).expect("index serializes"))?;
    write(CONFIG, &serde_json::to_vec_pretty(config).expect("config serializes"))?;
    if let Some(v) = vocab {
        write_vocab(&dir.join(VOCAB), v)?;
    }
    Ok(id)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let read = |name: &str| fs::read(dir.join(name)).map_err(io_err(dir.join(name)));
    let index: Index = serde_json::from_slice(&read(INDEX)?).map_err(|e| format_err(dir.join(INDEX), e))?;
    let config: RunConfig = serde_json::from_slice(&read(CONFIG)?).map_err(|e| format_err(dir.join(CONFIG), e))?;
    let blob = read(BLOB)?;
    let mut store = Store::new();
    for e in &index.tensors {
        if e.dtype != "f32" {
            return Err(format_err(dir.join(INDEX), format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
        }
        let n: usize = e.shape.iter().product();
        let bytes = blob
            .get(e.offset..e.offset + 4 * n)
            .ok_or_else(|| format_err(dir.join(BLOB), format!("tensor `{}` runs past the end of the blob", e.name)))?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        store.insert(&e.name, Tensor::new(&e.shape, data));
    }
    let vocab_path = dir.join(VOCAB);
    let vocab = if vocab_path.exists() { Some(read_vocab(&vocab_path)?) } else { None };
    Ok(Checkpoint { store, config, vocab, label_names: index.label_names, id: index.id })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::new();
        store.normal("a.weight", &[3, 4], 0.02, 7);
        store.insert("b", Tensor::new(&[2], vec![f32::MIN_POSITIVE, -0.0]));
        let vocab = Vocab::build(&["hello there", "hello"], 1).unwrap();
        let cfg = RunConfig::tiny();
        let id = save(dir.path(), &store, &cfg, Some(&vocab), &["x".to_string()]).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.id, id);
        assert_eq!(ck.config, cfg);
        assert_eq!(ck.vocab.as_ref(), Some(&vocab));
        assert_eq!(ck.label_names, vec!["x".to_string()]);
        for ((n1, t1), (n2, t2)) in store.iter().zip(ck.store.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(save(dir.path(), &ck.store, &cfg, None, &[]).unwrap(), id);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::new();
        store.zeros("w", &[4, 4]);
        save(dir.path(), &store, &RunConfig::default(), None, &[]).unwrap();
        fs::write(dir.path().join(BLOB), [0u8; 10]).unwrap();
        assert!(load(dir.path()).is_err());
    }
}
