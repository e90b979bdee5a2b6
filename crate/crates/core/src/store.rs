//! Precomputed embedding store backing the retrieval service.
//!
//! Layout, all integers little-endian:
//!   magic `NRST0001` (8 bytes)
//!   u32 embed_dim, u64 note count, u64 checkpoint fingerprint
//!   id table: per note, u32 byte length + UTF-8 id
//!   payload: count * embed_dim f32 vectors

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::Note;
use crate::eval::embed_pool;
use crate::model::{ModelError, ModelParams};
use crate::prompt::TruncationConfig;

const MAGIC: &[u8; 8] = b"NRST0001";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store format: {0}")]
    Format(String),
    #[error(
        "store fingerprint {store:#018x} does not match checkpoint fingerprint {checkpoint:#018x}"
    )]
    FingerprintMismatch { store: u64, checkpoint: u64 },
    #[error("duplicate note id {0:?} in store")]
    DuplicateId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    pub embed_dim: usize,
    pub fingerprint: u64,
    pub ids: Vec<String>,
    /// Packed row-major `count x embed_dim`.
    pub vectors: Vec<f32>,
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, idx: usize) -> &[f32] {
        &self.vectors[idx * self.embed_dim..(idx + 1) * self.embed_dim]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|i| i == id)
    }

    /// Vectors as one row per note, the shape `eval::rank` consumes.
    pub fn vector_rows(&self) -> Vec<Vec<f32>> {
        (0..self.len()).map(|i| self.vector(i).to_vec()).collect()
    }
}

/// Embed every note with the given parameters and bind the result to the
/// producing checkpoint's fingerprint. Bit-reproducible.
pub fn build_store(
    params: &ModelParams<f32>,
    notes: &[Note],
    trunc: &TruncationConfig,
    fingerprint: u64,
) -> Result<EmbeddingStore, StoreError> {
    let mut seen = std::collections::HashSet::new();
    for n in notes {
        if !seen.insert(n.id.as_str()) {
            return Err(StoreError::DuplicateId(n.id.clone()));
        }
    }
    let rows = embed_pool(params, notes, trunc)?;
    let embed_dim = params.cfg.embed_dim;
    let mut vectors = Vec::with_capacity(notes.len() * embed_dim);
    for r in rows {
        vectors.extend_from_slice(&r);
    }
    Ok(EmbeddingStore {
        embed_dim,
        fingerprint,
        ids: notes.iter().map(|n| n.id.clone()).collect(),
        vectors,
    })
}

pub fn write_store(path: &Path, store: &EmbeddingStore) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.embed_dim as u32).to_le_bytes())?;
    w.write_all(&(store.ids.len() as u64).to_le_bytes())?;
    w.write_all(&store.fingerprint.to_le_bytes())?;
    for id in &store.ids {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
    }
    for &v in &store.vectors {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, StoreError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(StoreError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u32buf)?;
    let embed_dim = u32::from_le_bytes(u32buf) as usize;
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)?;
    let fingerprint = u64::from_le_bytes(u64buf);
    let mut ids = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        r.read_exact(&mut u32buf)?;
        let len = u32::from_le_bytes(u32buf) as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let id = String::from_utf8(buf)
            .map_err(|_| StoreError::Format("id table is not UTF-8".into()))?;
        if !seen.insert(id.clone()) {
            return Err(StoreError::DuplicateId(id));
        }
        ids.push(id);
    }
    let mut payload = vec![0u8; count * embed_dim * 4];
    r.read_exact(&mut payload)?;
    let vectors = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(StoreError::Format("trailing bytes after payload".into()));
    }
    Ok(EmbeddingStore {
        embed_dim,
        fingerprint,
        ids,
        vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_vocab, generate_synthetic_corpus, CorpusGenConfig};
    use crate::model::ModelConfig;

    fn small_setup() -> (ModelParams<f32>, Vec<Note>) {
        let cfg = ModelConfig {
            hidden_dim: 16,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 400,
            embed_dim: 8,
            ..Default::default()
        };
        let params = ModelParams::init(cfg, 5, 3.0);
        let (notes, _) = generate_synthetic_corpus(
            &CorpusGenConfig {
                n_notes: 5,
                n_categories: 2,
                ..Default::default()
            },
            &default_vocab(200),
        )
        .unwrap();
        (params, notes)
    }

    #[test]
    fn payload_size_is_count_times_dim() {
        let (params, notes) = small_setup();
        let store = build_store(&params, &notes, &TruncationConfig::default(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.bin");
        write_store(&path, &store).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header: usize = 8 + 4 + 8 + 8 + notes.iter().map(|n| 4 + n.id.len()).sum::<usize>();
        assert_eq!(bytes.len(), header + notes.len() * store.embed_dim * 4);
    }

    #[test]
    fn rebuild_and_roundtrip_are_identical() {
        let (params, notes) = small_setup();
        let trunc = TruncationConfig::default();
        let a = build_store(&params, &notes, &trunc, 7).unwrap();
        let b = build_store(&params, &notes, &trunc, 7).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("s1.bin");
        let p2 = dir.path().join("s2.bin");
        write_store(&p1, &a).unwrap();
        write_store(&p2, &b).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let loaded = read_store(&p1).unwrap();
        assert_eq!(loaded, a);
        // vectors equal the in-memory embeddings
        let rows = embed_pool(&params, &notes, &trunc).unwrap();
        for (i, row) in rows.iter().enumerate() {
            assert_eq!(loaded.vector(i), row.as_slice());
        }
    }
}
