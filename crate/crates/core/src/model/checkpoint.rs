//! Checkpoint file format.
//!
//! Layout, all integers little-endian:
//!   magic `NRCK0001` (8 bytes)
//!   u32 length of the config text block
//!   config text: one `key value` line per `ModelConfig` field
//!   raw f32 values for every tensor, in the order visited by
//!   `ModelParams::for_each_tensor` (tok_embed, pos_embed, per-layer tensors,
//!   final norm, output head, embedding projection, tau)
//!   u64 total f32 count, as a trailer check

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelParams};

const MAGIC: &[u8; 8] = b"NRCK0001";

fn config_text(cfg: &ModelConfig) -> String {
    format!(
        "vocab_size {}\nhidden_dim {}\nn_layers {}\nn_heads {}\nmax_seq_len {}\nembed_dim {}\n",
        cfg.vocab_size, cfg.hidden_dim, cfg.n_layers, cfg.n_heads, cfg.max_seq_len, cfg.embed_dim
    )
}

fn parse_config(text: &str) -> Result<ModelConfig, ModelError> {
    let mut cfg = ModelConfig::default();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap_or("");
        let val: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::Format(format!("bad config line: {line:?}")))?;
        match key {
            "vocab_size" => cfg.vocab_size = val,
            "hidden_dim" => cfg.hidden_dim = val,
            "n_layers" => cfg.n_layers = val,
            "n_heads" => cfg.n_heads = val,
            "max_seq_len" => cfg.max_seq_len = val,
            "embed_dim" => cfg.embed_dim = val,
            other => return Err(ModelError::Format(format!("unknown config key {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn save(params: &ModelParams<f32>, path: &Path) -> Result<(), ModelError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    let cfg_text = config_text(&params.cfg);
    w.write_all(&(cfg_text.len() as u32).to_le_bytes())?;
    w.write_all(cfg_text.as_bytes())?;
    let mut total: u64 = 0;
    for (_, t) in params.tensors() {
        total += t.len() as u64;
        for &v in t {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&total.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams<f32>, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ModelError::Format(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let mut len4 = [0u8; 4];
    r.read_exact(&mut len4)?;
    let cfg_len = u32::from_le_bytes(len4) as usize;
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)?;
    let cfg_text = String::from_utf8(cfg_buf)
        .map_err(|_| ModelError::Format("config block is not UTF-8".into()))?;
    let cfg = parse_config(&cfg_text)?;

    // Allocate the right shapes, then fill in checkpoint order.
    let mut params: ModelParams<f32> = ModelParams::init(cfg, 0, 0.0);
    let mut total: u64 = 0;
    for (name, t) in params.tensors_mut() {
        let mut buf = vec![0u8; t.len() * 4];
        r.read_exact(&mut buf).map_err(|e| {
            ModelError::Format(format!("truncated checkpoint while reading {name}: {e}"))
        })?;
        for (i, chunk) in buf.chunks_exact(4).enumerate() {
            t[i] = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        total += t.len() as u64;
    }
    let mut trailer = [0u8; 8];
    r.read_exact(&mut trailer)?;
    if u64::from_le_bytes(trailer) != total {
        return Err(ModelError::Format(format!(
            "trailer count {} does not match tensor count {}",
            u64::from_le_bytes(trailer),
            total
        )));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(ModelError::Format("trailing bytes after checkpoint".into()));
    }
    Ok(params)
}

/// FNV-1a over a file's bytes; used to bind embedding stores to the
/// checkpoint that produced them.
pub fn file_fingerprint(path: &Path) -> Result<u64, ModelError> {
    let bytes = std::fs::read(path)?;
    Ok(fnv1a(&bytes))
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
