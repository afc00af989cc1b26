//! Load-balanced context-parallel sharding.
//!
//! Each sequence's new tokens are cut into `2N` equal chunks `C_0..C_{2N-1}`
//! and rank `i` takes the pair `(C_i, C_{2N-1-i})`, which equalises causal
//! attention work across ranks. Chunk length is `ceil(T / 2N)`; the missing
//! slots are trailing padding, so they sit in `C_{2N-1}` (and spill into the
//! chunks just before it only when `T < (2N-1) * chunk_len`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{SeqId, TokenTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub seq_id: SeqId,
    pub cached_len: usize,
    pub new_len: usize,
}

impl SequenceSpec {
    pub fn new(seq_id: SeqId, cached_len: usize, new_len: usize) -> Self {
        Self {
            seq_id,
            cached_len,
            new_len,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub rank: usize,
    /// Global position of the first slot.
    pub start_position: u64,
    pub valid_len: usize,
    pub padding: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceShard {
    pub seq_id: SeqId,
    pub cached_len: usize,
    pub new_len: usize,
    pub chunk_len: usize,
    pub chunks: Vec<Chunk>,
    /// Real new tokens held by each rank.
    pub rank_new_counts: Vec<usize>,
    /// Cached tokens already resident on each rank.
    pub rank_cached_counts: Vec<usize>,
}

impl SequenceShard {
    pub fn padding(&self) -> usize {
        self.chunks.iter().map(|c| c.padding).sum()
    }

    /// Slots (real or padding) this sequence contributes to every rank.
    pub fn slots_per_rank(&self) -> usize {
        2 * self.chunk_len
    }

    /// The two chunks owned by `rank`, lower one first.
    pub fn rank_chunks(&self, rank: usize) -> [&Chunk; 2] {
        let n2 = self.chunks.len();
        [&self.chunks[rank], &self.chunks[n2 - 1 - rank]]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardPlan {
    pub n_ranks: usize,
    pub sequences: Vec<SequenceShard>,
}

impl ShardPlan {
    /// Token slots for `rank` in fused order: per sequence, `C_i` then
    /// `C_{2N-1-i}`, each chunk's real tokens followed by its padding.
    pub fn rank_slots(&self, rank: usize) -> Vec<Option<TokenTag>> {
        let mut out = Vec::new();
        for s in &self.sequences {
            for c in s.rank_chunks(rank) {
                out.extend((0..c.valid_len).map(|o| {
                    Some(TokenTag {
                        seq: s.seq_id,
                        position: c.start_position + o as u64,
                    })
                }));
                out.extend(std::iter::repeat_n(None, c.padding));
            }
        }
        out
    }

    /// Slots per rank after padding; identical for all ranks.
    pub fn query_len(&self) -> usize {
        self.sequences
            .iter()
            .map(SequenceShard::slots_per_rank)
            .sum()
    }

    pub fn total_new(&self) -> usize {
        self.sequences.iter().map(|s| s.new_len).sum()
    }

    pub fn total_cached(&self) -> usize {
        self.sequences.iter().map(|s| s.cached_len).sum()
    }

    pub fn sequence(&self, seq_id: SeqId) -> Option<&SequenceShard> {
        self.sequences.iter().find(|s| s.seq_id == seq_id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn shard_sequence(spec: &SequenceSpec, n_ranks: usize, cached: Vec<usize>) -> SequenceShard {
    let n_chunks = 2 * n_ranks;
    let chunk_len = spec.new_len.div_ceil(n_chunks);
    let mut rank_new_counts = vec![0; n_ranks];
    let chunks = (0..n_chunks)
        .map(|index| {
            let start = index * chunk_len;
            let valid_len = spec.new_len.saturating_sub(start).min(chunk_len);
            let rank = if index < n_ranks {
                index
            } else {
                n_chunks - 1 - index
            };
            rank_new_counts[rank] += valid_len;
            Chunk {
                index,
                rank,
                start_position: (spec.cached_len + start) as u64,
                valid_len,
                padding: chunk_len - valid_len,
            }
        })
        .collect();
    SequenceShard {
        seq_id: spec.seq_id,
        cached_len: spec.cached_len,
        new_len: spec.new_len,
        chunk_len,
        chunks,
        rank_new_counts,
        rank_cached_counts: cached,
    }
}

fn check_batch(seqs: &[SequenceSpec], n_ranks: usize) -> Result<()> {
    if n_ranks == 0 {
        return Err(Error::Plan("n_ranks must be at least 1".into()));
    }
    if seqs.is_empty() {
        return Err(Error::Plan("empty sequence list".into()));
    }
    for (i, s) in seqs.iter().enumerate() {
        if s.new_len == 0 {
            return Err(Error::Plan(format!(
                "sequence {} has no new tokens; decode turns use plan_decode",
                s.seq_id
            )));
        }
        if seqs[..i].iter().any(|o| o.seq_id == s.seq_id) {
            return Err(Error::Plan(format!("sequence {} listed twice", s.seq_id)));
        }
    }
    Ok(())
}

/// Plan for a first-turn prefill; every sequence must have an empty cache.
pub fn plan_full_prefill(seqs: &[SequenceSpec], n_ranks: usize) -> Result<ShardPlan> {
    check_batch(seqs, n_ranks)?;
    if let Some(s) = seqs.iter().find(|s| s.cached_len != 0) {
        return Err(Error::Plan(format!(
            "sequence {} has {} cached tokens; use plan_partial_prefill",
            s.seq_id, s.cached_len
        )));
    }
    Ok(ShardPlan {
        n_ranks,
        sequences: seqs
            .iter()
            .map(|s| shard_sequence(s, n_ranks, vec![0; n_ranks]))
            .collect(),
    })
}

/// Plan for a follow-up prefill. New tokens are sharded exactly as in a full
/// prefill, with positions continuing after the cache; `cached_layout[i][r]`
/// is how many cached tokens of sequence `i` live on rank `r` and is carried
/// through unchanged.
pub fn plan_partial_prefill(
    seqs: &[SequenceSpec],
    n_ranks: usize,
    cached_layout: &[Vec<usize>],
) -> Result<ShardPlan> {
    check_batch(seqs, n_ranks)?;
    if cached_layout.len() != seqs.len() {
        return Err(Error::Plan(format!(
            "cached layout has {} rows for {} sequences",
            cached_layout.len(),
            seqs.len()
        )));
    }
    let mut sequences = Vec::with_capacity(seqs.len());
    for (s, layout) in seqs.iter().zip(cached_layout) {
        if layout.len() != n_ranks {
            return Err(Error::Plan(format!(
                "cached layout for sequence {} has {} ranks, expected {}",
                s.seq_id,
                layout.len(),
                n_ranks
            )));
        }
        let total: usize = layout.iter().sum();
        if total != s.cached_len {
            return Err(Error::Plan(format!(
                "cached layout for sequence {} sums to {}, cached_len is {}",
                s.seq_id, total, s.cached_len
            )));
        }
        sequences.push(shard_sequence(s, n_ranks, layout.clone()));
    }
    Ok(ShardPlan { n_ranks, sequences })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeSlot {
    pub seq_id: SeqId,
    /// Index of the sequence within the decode batch.
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodePlan {
    pub n_ranks: usize,
    pub iteration: u64,
    pub ranks: Vec<Vec<DecodeSlot>>,
}

impl DecodePlan {
    pub fn owner(&self, seq_id: SeqId) -> Option<usize> {
        self.ranks
            .iter()
            .position(|r| r.iter().any(|s| s.seq_id == seq_id))
    }

    /// Queries per rank once padded to a common length.
    pub fn padded_len(&self) -> usize {
        self.ranks.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn batch_len(&self) -> usize {
        self.ranks.iter().map(Vec::len).sum()
    }
}

/// Round-robin decode ownership: batch entry `s` goes to rank
/// `(s + iteration) mod N`, which computes its query and stores its new KV.
pub fn plan_decode(batch: &[SeqId], n_ranks: usize, iteration: u64) -> Result<DecodePlan> {
    if n_ranks == 0 {
        return Err(Error::Plan("n_ranks must be at least 1".into()));
    }
    if batch.is_empty() {
        return Err(Error::Plan("empty decode batch".into()));
    }
    let mut ranks = vec![Vec::new(); n_ranks];
    let offset = (iteration % n_ranks as u64) as usize;
    for (slot, &seq_id) in batch.iter().enumerate() {
        if batch[..slot].contains(&seq_id) {
            return Err(Error::Plan(format!("sequence {seq_id} listed twice")));
        }
        ranks[(slot + offset) % n_ranks].push(DecodeSlot { seq_id, slot });
    }
    Ok(DecodePlan {
        n_ranks,
        iteration,
        ranks,
    })
}
