//! Tokenization, binary token shards, and stage-driven mixture sampling.

mod bpe;
mod pack;
mod shard;

pub use bpe::BpeTokenizer;
pub use pack::{BatchProducer, BatchStream, MixtureSpec, PackedBatch};
pub use shard::{read_shard, write_shard, TokenShard, SHARD_MAGIC, SHARD_VERSION};

use thiserror::Error;

/// End-of-document separator inserted between packed documents.
pub const EOS: u32 = 256;
/// Padding token (reserved; packed batches are normally full).
pub const PAD: u32 = 257;
/// Byte-level vocabulary: 256 byte values plus the two specials.
pub const BYTE_VOCAB: u32 = 258;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad shard file: {0}")]
    Format(String),
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("no source passes the stage filters")]
    NoEligibleDocs,
    #[error("mixture weights must be nonnegative with positive sum")]
    BadWeights,
    #[error("corpus too small: reached vocab {reached} of requested {requested}")]
    CorpusTooSmall { reached: u32, requested: u32 },
    #[error("bpe vocab_size must exceed the {0} base tokens")]
    VocabTooSmall(u32),
    #[error("{0}")]
    Invalid(String),
}

/// Byte-level tokenization: ids are the raw byte values.
pub fn byte_tokenize(text: &str) -> Vec<u32> {
    text.as_bytes().iter().map(|&b| b as u32).collect()
}

/// Inverse of [`byte_tokenize`]. Specials (EOS/PAD) decode to nothing; ids
/// beyond the byte vocabulary are an error.
pub fn byte_detokenize(ids: &[u32]) -> Result<String, DataError> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id >= BYTE_VOCAB {
            return Err(DataError::TokenOutOfRange { id, vocab: BYTE_VOCAB });
        }
        if id < 256 {
            bytes.push(id as u8);
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
