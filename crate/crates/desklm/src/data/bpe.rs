//! Small byte-pair-encoding trainer over the byte-level base vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{DataError, BYTE_VOCAB};

/// Learned merge table on top of the 258-token byte base. Encoding applies
/// merges in training order; decoding concatenates stored byte expansions,
/// so encode∘decode is lossless by construction.
#[derive(Debug, Clone)]
pub struct BpeTokenizer {
    merges: Vec<(u32, u32)>,
    token_bytes: Vec<Vec<u8>>,
}

impl BpeTokenizer {
    /// Byte-level tokenizer with no merges.
    pub fn byte_level() -> Self {
        BpeTokenizer { merges: Vec::new(), token_bytes: base_token_bytes() }
    }

    /// Greedy highest-frequency pair merging until `vocab_size` is reached.
    /// Ties break on the lexicographically smallest (first-bytes,
    /// second-bytes) pair so training is deterministic. Stops early with an
    /// error when no pair occurs at least twice.
    pub fn train(corpus: &[String], vocab_size: u32) -> Result<Self, DataError> {
        if vocab_size <= BYTE_VOCAB {
            return Err(DataError::VocabTooSmall(BYTE_VOCAB));
        }
        if corpus.iter().all(|d| d.is_empty()) {
            return Err(DataError::Invalid("empty corpus".into()));
        }
        let mut docs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|d| d.as_bytes().iter().map(|&b| b as u32).collect())
            .collect();
        let mut tok = BpeTokenizer::byte_level();
        while tok.vocab_size() < vocab_size {
            let mut counts: HashMap<(u32, u32), u64> = HashMap::new();
            for doc in &docs {
                for w in doc.windows(2) {
                    *counts.entry((w[0], w[1])).or_insert(0) += 1;
                }
            }
            let best = counts
                .iter()
                .filter(|(_, &c)| c >= 2)
                .min_by(|(pa, ca), (pb, cb)| {
                    cb.cmp(ca).then_with(|| {
                        let ka = (&tok.token_bytes[pa.0 as usize], &tok.token_bytes[pa.1 as usize]);
                        let kb = (&tok.token_bytes[pb.0 as usize], &tok.token_bytes[pb.1 as usize]);
                        ka.cmp(&kb)
                    })
                })
                .map(|(&p, _)| p);
            let Some(pair) = best else {
                return Err(DataError::CorpusTooSmall {
                    reached: tok.vocab_size(),
                    requested: vocab_size,
                });
            };
            let new_id = tok.push_merge(pair);
            for doc in docs.iter_mut() {
                merge_in_place(doc, pair, new_id);
            }
        }
        Ok(tok)
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let mut bytes = self.token_bytes[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.token_bytes[pair.1 as usize]);
        self.merges.push(pair);
        self.token_bytes.push(bytes);
        (self.token_bytes.len() - 1) as u32
    }

    pub fn vocab_size(&self) -> u32 {
        self.token_bytes.len() as u32
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = text.as_bytes().iter().map(|&b| b as u32).collect();
        for (rank, &pair) in self.merges.iter().enumerate() {
            let new_id = (BYTE_VOCAB as usize + rank) as u32;
            merge_in_place(&mut ids, pair, new_id);
        }
        ids
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>, DataError> {
        let mut out = Vec::new();
        for &id in ids {
            if id as usize >= self.token_bytes.len() {
                return Err(DataError::TokenOutOfRange { id, vocab: self.vocab_size() });
            }
            out.extend_from_slice(&self.token_bytes[id as usize]);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, DataError> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Plain-text merge table: header line, then one `first second` id pair
    /// per line in training order.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "desklm-bpe v1 merges={}", self.merges.len())?;
        for &(a, b) in &self.merges {
            writeln!(f, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let f = BufReader::new(std::fs::File::open(path)?);
        let mut lines = f.lines();
        let header = lines
            .next()
            .ok_or_else(|| DataError::Format("empty merge file".into()))??;
        if !header.starts_with("desklm-bpe v1") {
            return Err(DataError::Format(format!("bad merge file header: {header}")));
        }
        let mut tok = BpeTokenizer::byte_level();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let a: u32 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::Format(format!("bad merge line: {line}")))?;
            let b: u32 = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| DataError::Format(format!("bad merge line: {line}")))?;
            if a >= tok.vocab_size() || b >= tok.vocab_size() {
                return Err(DataError::Format(format!("merge references unknown id: {line}")));
            }
            tok.push_merge((a, b));
        }
        Ok(tok)
    }
}

/// Byte expansions of the 258 base tokens; the EOS/PAD specials expand to
/// nothing.
fn base_token_bytes() -> Vec<Vec<u8>> {
    let mut v: Vec<Vec<u8>> = (0u16..256).map(|b| vec![b as u8]).collect();
    v.push(Vec::new()); // EOS
    v.push(Vec::new()); // PAD
    v
}

/// Left-to-right non-overlapping replacement of `pair` with `new_id`.
fn merge_in_place(ids: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && ids[r] == pair.0 && ids[r + 1] == pair.1 {
            ids[w] = new_id;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}
