//! Weighted per-document mixture sampling and fixed-length batch packing.

use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc::{Receiver, SyncSender};
use std::thread::JoinHandle;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, TokenShard, EOS};

/// Per-stage mixture weights and document filters. Weight keys are source
/// names (a `BTreeMap` keeps draw order independent of insertion order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub weights: BTreeMap<String, f64>,
    /// Strict lower bound on document character length.
    #[serde(default)]
    pub min_char_length: Option<u64>,
    /// Strict lower bound on the pre-computed quality score. Unscored
    /// documents fail the filter when this is set.
    #[serde(default)]
    pub min_quality: Option<f64>,
    pub seed: u64,
}

impl MixtureSpec {
    pub fn uniform(sources: &[&str], seed: u64) -> Self {
        MixtureSpec {
            weights: sources.iter().map(|s| (s.to_string(), 1.0)).collect(),
            min_char_length: None,
            min_quality: None,
            seed,
        }
    }

    fn doc_passes(&self, char_length: u64, quality: Option<f32>) -> bool {
        if let Some(min_len) = self.min_char_length {
            if char_length <= min_len {
                return false;
            }
        }
        if let Some(min_q) = self.min_quality {
            match quality {
                Some(q) => {
                    if f64::from(q) <= min_q {
                        return false;
                    }
                }
                None => return false,
            }
        }
        true
    }

    /// Number of documents in `shard` passing this spec's filters.
    pub fn eligible_count(&self, shard: &TokenShard) -> usize {
        (0..shard.doc_count())
            .filter(|&i| self.doc_passes(shard.char_lengths[i], shard.quality_scores[i]))
            .count()
    }
}

/// One (B,T) slab of inputs with next-token targets and a loss mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedBatch {
    pub b: usize,
    pub t: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub loss_mask: Vec<bool>,
}

struct SourceState {
    shard: TokenShard,
    eligible: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    docs_drawn: u64,
}

/// Deterministic infinite token stream: documents drawn per-source by
/// mixture weight, filtered, concatenated with EOS separators, and chunked
/// into (B,T) batches. Exhausted sources reshuffle and bump their epoch.
pub struct BatchStream {
    sources: Vec<SourceState>,
    picker: WeightedIndex<f64>,
    rng: ChaCha8Rng,
    buffer: VecDeque<u32>,
}

impl BatchStream {
    pub fn new(shards: Vec<TokenShard>, spec: &MixtureSpec) -> Result<Self, DataError> {
        if spec.weights.values().any(|&w| w < 0.0)
            || spec.weights.values().sum::<f64>() <= 0.0
        {
            return Err(DataError::BadWeights);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let by_name: BTreeMap<String, TokenShard> =
            shards.into_iter().map(|s| (s.source_name.clone(), s)).collect();
        let mut sources = Vec::new();
        let mut weights = Vec::new();
        for (name, &w) in &spec.weights {
            if w == 0.0 {
                continue;
            }
            let Some(shard) = by_name.get(name) else {
                return Err(DataError::Invalid(format!("no shard for mixture source `{name}`")));
            };
            let eligible: Vec<usize> = (0..shard.doc_count())
                .filter(|&i| spec.doc_passes(shard.char_lengths[i], shard.quality_scores[i]))
                .collect();
            if eligible.is_empty() {
                continue;
            }
            let mut order: Vec<usize> = (0..eligible.len()).collect();
            order.shuffle(&mut rng);
            sources.push(SourceState {
                shard: shard.clone(),
                eligible,
                order,
                cursor: 0,
                epoch: 0,
                docs_drawn: 0,
            });
            weights.push(w);
        }
        if sources.is_empty() {
            return Err(DataError::NoEligibleDocs);
        }
        let picker = WeightedIndex::new(&weights).map_err(|_| DataError::BadWeights)?;
        Ok(BatchStream { sources, picker, rng, buffer: VecDeque::new() })
    }

    fn refill(&mut self, need: usize) {
        while self.buffer.len() < need {
            let si = self.picker.sample(&mut self.rng);
            let src = &mut self.sources[si];
            if src.cursor == src.order.len() {
                src.order.shuffle(&mut self.rng);
                src.cursor = 0;
                src.epoch += 1;
            }
            let doc_idx = src.eligible[src.order[src.cursor]];
            src.cursor += 1;
            src.docs_drawn += 1;
            self.buffer.extend(src.shard.doc(doc_idx).iter().copied());
            self.buffer.push_back(EOS);
        }
    }

    /// Next (B,T) batch. Rows are consecutive windows of the packed stream;
    /// `targets[i]` is always the stream successor of `tokens[i]`.
    pub fn next_batch(&mut self, b: usize, t: usize) -> PackedBatch {
        let need = b * t + 1;
        self.refill(need);
        let tokens: Vec<u32> = self.buffer.iter().take(b * t).copied().collect();
        let targets: Vec<u32> = self.buffer.iter().skip(1).take(b * t).copied().collect();
        self.buffer.drain(..b * t);
        PackedBatch { b, t, tokens, targets, loss_mask: vec![true; b * t] }
    }

    /// Discards `n` batches (used when resuming mid-stage).
    pub fn skip_batches(&mut self, n: u64, b: usize, t: usize) {
        for _ in 0..n {
            let need = b * t + 1;
            self.refill(need);
            self.buffer.drain(..b * t);
        }
    }

    /// Per-source (name, documents drawn, epoch).
    pub fn source_stats(&self) -> Vec<(String, u64, u64)> {
        self.sources
            .iter()
            .map(|s| (s.shard.source_name.clone(), s.docs_drawn, s.epoch))
            .collect()
    }
}

/// Prepares batches ahead of the trainer on a worker thread through a
/// bounded channel. Sampling order is fixed by the stream's seed, so
/// consumption order is identical to the synchronous path.
pub struct BatchProducer {
    rx: Option<Receiver<PackedBatch>>,
    handle: Option<JoinHandle<()>>,
}

impl BatchProducer {
    pub const DEFAULT_CAPACITY: usize = 4;

    pub fn spawn(mut stream: BatchStream, b: usize, t: usize, capacity: usize) -> Self {
        let (tx, rx): (SyncSender<PackedBatch>, Receiver<PackedBatch>) =
            std::sync::mpsc::sync_channel(capacity.max(1));
        let handle = std::thread::spawn(move || loop {
            let batch = stream.next_batch(b, t);
            if tx.send(batch).is_err() {
                break; // consumer gone
            }
        });
        BatchProducer { rx: Some(rx), handle: Some(handle) }
    }

    pub fn next(&self) -> PackedBatch {
        self.rx.as_ref().expect("receiver alive").recv().expect("producer thread died")
    }
}

impl Drop for BatchProducer {
    fn drop(&mut self) {
        // closing the channel unblocks a full send; then join the worker
        drop(self.rx.take());
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
