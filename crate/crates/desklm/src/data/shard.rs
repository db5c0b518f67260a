//! Binary token-shard files.
//!
//! Layout (all little-endian): magic `IMUS`, u32 version, u32 vocab_size,
//! u64 doc_count, then per-doc `{u64 token_count, u64 char_length,
//! f32 quality_score (NaN when absent)}`, then every token id as u32 in
//! document order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::DataError;

pub const SHARD_MAGIC: [u8; 4] = *b"IMUS";
pub const SHARD_VERSION: u32 = 1;

/// One source's documents as a flat id stream plus per-doc metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenShard {
    pub source_name: String,
    pub vocab_size: u32,
    pub token_ids: Vec<u32>,
    /// Cumulative end offset of each document; strictly increasing except
    /// that empty documents are legal and repeat the previous offset.
    pub doc_boundaries: Vec<u64>,
    pub char_lengths: Vec<u64>,
    /// Pre-computed quality score per document; `None` when unscored.
    pub quality_scores: Vec<Option<f32>>,
}

impl TokenShard {
    pub fn new(source_name: impl Into<String>, vocab_size: u32) -> Self {
        TokenShard {
            source_name: source_name.into(),
            vocab_size,
            token_ids: Vec::new(),
            doc_boundaries: Vec::new(),
            char_lengths: Vec::new(),
            quality_scores: Vec::new(),
        }
    }

    pub fn push_doc(&mut self, tokens: &[u32], char_length: u64, quality: Option<f32>) {
        self.token_ids.extend_from_slice(tokens);
        self.doc_boundaries.push(self.token_ids.len() as u64);
        self.char_lengths.push(char_length);
        self.quality_scores.push(quality);
    }

    pub fn doc_count(&self) -> usize {
        self.doc_boundaries.len()
    }

    pub fn doc(&self, i: usize) -> &[u32] {
        let start = if i == 0 { 0 } else { self.doc_boundaries[i - 1] as usize };
        &self.token_ids[start..self.doc_boundaries[i] as usize]
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.doc_count();
        if self.char_lengths.len() != n || self.quality_scores.len() != n {
            return Err(DataError::Invalid("metadata length mismatch".into()));
        }
        let mut prev = 0u64;
        for &b in &self.doc_boundaries {
            if b < prev {
                return Err(DataError::Invalid("doc boundaries must be nondecreasing".into()));
            }
            prev = b;
        }
        if prev != self.token_ids.len() as u64 {
            return Err(DataError::Invalid("boundaries do not cover the id stream".into()));
        }
        for &id in &self.token_ids {
            if id >= self.vocab_size {
                return Err(DataError::TokenOutOfRange { id, vocab: self.vocab_size });
            }
        }
        Ok(())
    }
}

pub fn write_shard(shard: &TokenShard, path: &Path) -> Result<(), DataError> {
    shard.validate()?;
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(&SHARD_MAGIC)?;
    w.write_all(&SHARD_VERSION.to_le_bytes())?;
    w.write_all(&shard.vocab_size.to_le_bytes())?;
    w.write_all(&(shard.doc_count() as u64).to_le_bytes())?;
    let mut start = 0u64;
    for i in 0..shard.doc_count() {
        let end = shard.doc_boundaries[i];
        w.write_all(&(end - start).to_le_bytes())?;
        w.write_all(&shard.char_lengths[i].to_le_bytes())?;
        let q = shard.quality_scores[i].unwrap_or(f32::NAN);
        w.write_all(&q.to_le_bytes())?;
        start = end;
    }
    for &id in &shard.token_ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a shard; the source name is the file stem.
pub fn read_shard(path: &Path) -> Result<TokenShard, DataError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != SHARD_MAGIC {
        return Err(DataError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r, "version")?;
    if version != SHARD_VERSION {
        return Err(DataError::Format(format!(
            "unsupported shard version {version} (expected {SHARD_VERSION})"
        )));
    }
    let vocab_size = read_u32(&mut r, "vocab_size")?;
    let doc_count = read_u64(&mut r, "doc_count")? as usize;
    let source_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "unnamed".into());
    let mut shard = TokenShard::new(source_name, vocab_size);
    let mut token_counts = Vec::with_capacity(doc_count);
    let mut total = 0u64;
    for _ in 0..doc_count {
        let tc = read_u64(&mut r, "token_count")?;
        let cl = read_u64(&mut r, "char_length")?;
        let mut qb = [0u8; 4];
        read_exact(&mut r, &mut qb, "quality_score")?;
        let q = f32::from_le_bytes(qb);
        token_counts.push(tc);
        total += tc;
        shard.doc_boundaries.push(total);
        shard.char_lengths.push(cl);
        shard.quality_scores.push(if q.is_nan() { None } else { Some(q) });
    }
    shard.token_ids.reserve(total as usize);
    let mut buf = [0u8; 4];
    for _ in 0..total {
        read_exact(&mut r, &mut buf, "token ids")?;
        shard.token_ids.push(u32::from_le_bytes(buf));
    }
    // trailing bytes mean a corrupt or mismatched file
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(DataError::Format("trailing bytes after token stream".into()));
    }
    shard.validate()?;
    Ok(shard)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<(), DataError> {
    r.read_exact(buf)
        .map_err(|_| DataError::Format(format!("truncated file while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64, DataError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}
