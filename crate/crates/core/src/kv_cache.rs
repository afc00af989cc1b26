//! Per-rank persistent key/value store.
//!
//! Only real tokens are stored. A rank generally holds non-contiguous pieces
//! of a sequence (two prefill chunks per turn plus whichever decode tokens
//! the round-robin assigned to it), kept sorted by position.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{EmbeddingBlock, SeqId};

#[derive(Clone, Debug, PartialEq)]
struct SeqKv {
    keys: EmbeddingBlock,
    values: EmbeddingBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankKvCache {
    n_kv_heads: usize,
    head_dim: usize,
    entries: BTreeMap<SeqId, SeqKv>,
}

impl RankKvCache {
    pub fn new(n_kv_heads: usize, head_dim: usize) -> Self {
        Self {
            n_kv_heads,
            head_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Stores `k`/`v` rows for `seq` and returns the new cached length.
    pub fn append(&mut self, seq: SeqId, k: &EmbeddingBlock, v: &EmbeddingBlock) -> Result<usize> {
        if k.num_heads() != self.n_kv_heads || k.head_dim() != self.head_dim {
            return Err(Error::Cache(format!(
                "block is {}x{}, cache holds {}x{}",
                k.num_heads(),
                k.head_dim(),
                self.n_kv_heads,
                self.head_dim
            )));
        }
        if !k.same_shape(v) || k.tags() != v.tags() {
            return Err(Error::Cache(
                "key and value blocks differ in shape or positions".into(),
            ));
        }
        let mut incoming = Vec::with_capacity(k.num_tokens());
        for (i, tag) in k.tags().iter().enumerate() {
            match tag {
                Some(t) if t.seq == seq => incoming.push((t.position, i)),
                Some(t) => {
                    return Err(Error::Cache(format!(
                        "token of sequence {} appended under sequence {seq}",
                        t.seq
                    )))
                }
                None => return Err(Error::Cache("padding rows cannot be cached".into())),
            }
        }
        incoming.sort_unstable();
        if incoming.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Cache(format!(
                "duplicate position in block for sequence {seq}"
            )));
        }
        let order: Vec<usize> = incoming.iter().map(|&(_, i)| i).collect();
        let (k_sorted, v_sorted) = (k.select(&order), v.select(&order));

        let entry = self.entries.entry(seq).or_insert_with(|| SeqKv {
            keys: EmbeddingBlock::new(k.num_heads(), k.head_dim()),
            values: EmbeddingBlock::new(k.num_heads(), k.head_dim()),
        });
        let last = entry
            .keys
            .num_tokens()
            .checked_sub(1)
            .map(|i| entry.keys.position(i));
        match (last, incoming.first()) {
            (Some(last), Some(&(first, _))) if first <= last => {
                // Interleaved with what is already stored: merge by position.
                let mut keys = entry.keys.clone();
                let mut values = entry.values.clone();
                keys.extend_from(&k_sorted)?;
                values.extend_from(&v_sorted)?;
                let mut idx: Vec<usize> = (0..keys.num_tokens()).collect();
                idx.sort_by_key(|&i| keys.position(i));
                if idx
                    .windows(2)
                    .any(|w| keys.position(w[0]) == keys.position(w[1]))
                {
                    return Err(Error::Cache(format!(
                        "position already cached for sequence {seq}"
                    )));
                }
                entry.keys = keys.select(&idx);
                entry.values = values.select(&idx);
            }
            _ => {
                entry.keys.extend_from(&k_sorted)?;
                entry.values.extend_from(&v_sorted)?;
            }
        }
        Ok(entry.keys.num_tokens())
    }

    pub fn cached_len(&self, seq: SeqId) -> usize {
        self.entries.get(&seq).map_or(0, |e| e.keys.num_tokens())
    }

    pub fn total_len(&self) -> usize {
        self.entries.values().map(|e| e.keys.num_tokens()).sum()
    }

    pub fn seq_ids(&self) -> impl Iterator<Item = SeqId> + '_ {
        self.entries.keys().copied()
    }

    /// Stored keys and values in position order, or empty blocks.
    pub fn get(&self, seq: SeqId) -> (EmbeddingBlock, EmbeddingBlock) {
        match self.entries.get(&seq) {
            Some(e) => (e.keys.clone(), e.values.clone()),
            None => (
                EmbeddingBlock::new(self.n_kv_heads, self.head_dim),
                EmbeddingBlock::new(self.n_kv_heads, self.head_dim),
            ),
        }
    }

    /// Copy of one sequence's cache padded with invalid rows to `max_len`.
    pub fn snapshot_padded(
        &self,
        seq: SeqId,
        max_len: usize,
    ) -> Result<(EmbeddingBlock, EmbeddingBlock)> {
        let len = self.cached_len(seq);
        if max_len < len {
            return Err(Error::Cache(format!(
                "snapshot length {max_len} is shorter than {len} cached tokens of sequence {seq}"
            )));
        }
        let (k, v) = self.get(seq);
        Ok((k.padded_to(max_len)?, v.padded_to(max_len)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TokenTag;

    fn block(seq: SeqId, positions: impl IntoIterator<Item = u64>) -> EmbeddingBlock {
        let mut b = EmbeddingBlock::new(2, 3);
        for p in positions {
            let row: Vec<f32> = (0..6).map(|i| p as f32 + i as f32 * 0.1).collect();
            b.push(TokenTag { seq, position: p }, &row).unwrap();
        }
        b
    }

    #[test]
    fn append_counts_tokens() {
        let mut c = RankKvCache::new(2, 3);
        let b = block(0, 0..4);
        assert_eq!(c.append(0, &b, &b).unwrap(), 4);
        assert_eq!(c.cached_len(0), 4);
        assert_eq!(c.cached_len(9), 0);
    }

    #[test]
    fn interleaved_chunks_come_back_sorted() {
        let mut c = RankKvCache::new(2, 3);
        let hi = block(0, 12..16);
        let lo = block(0, 0..4);
        c.append(0, &hi, &hi).unwrap();
        c.append(0, &lo, &lo).unwrap();
        let (k, v) = c.get(0);
        assert_eq!(k.positions(), vec![0, 1, 2, 3, 12, 13, 14, 15]);
        assert_eq!(k, v);
        assert_eq!(k.row(4, 1), &[12.3, 12.4, 12.5]);
    }

    #[test]
    fn snapshot_pads_without_touching_cache() {
        let mut c = RankKvCache::new(2, 3);
        let b = block(1, 0..10);
        c.append(1, &b, &b).unwrap();
        let (k, v) = c.snapshot_padded(1, 16).unwrap();
        assert_eq!(k.num_tokens(), 16);
        assert_eq!(k.valid_count(), 10);
        assert!((10..16).all(|i| !v.is_valid(i)));
        assert_eq!(c.cached_len(1), 10);
        let (k, _) = c.snapshot_padded(1, 10).unwrap();
        assert_eq!(k, b);
        assert!(c.snapshot_padded(1, 9).is_err());
    }

    #[test]
    fn rejects_bad_blocks() {
        let mut c = RankKvCache::new(2, 3);
        let wrong = EmbeddingBlock::new(1, 3);
        assert!(c.append(0, &wrong, &wrong).is_err());
        let mut padded = block(0, 0..2);
        padded.push_padding(1);
        assert!(c.append(0, &padded, &padded).is_err());
        let b = block(0, 0..2);
        assert!(c.append(1, &b, &b).is_err());
        c.append(0, &b, &b).unwrap();
        let dup = block(0, 1..3);
        assert!(c.append(0, &dup, &dup).is_err());
        assert_eq!(c.cached_len(0), 2);
    }
}
