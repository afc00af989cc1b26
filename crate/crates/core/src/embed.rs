//! Deterministic synthetic Q/K/V embeddings.
//!
//! Every token's vectors are a pure function of `(seed, seq, position)`,
//! drawn from its own ChaCha8 stream. The sharded engine and the unsharded
//! oracle therefore see identical inputs no matter which rank a token lands
//! on or in what order tokens are generated.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{EmbeddingBlock, GqaConfig, SeqId, TokenTag};

#[derive(Clone, Debug)]
pub struct TokenEmbeddings {
    pub q: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Clone, Copy, Debug)]
pub struct TokenSource {
    seed: u64,
    cfg: GqaConfig,
}

impl TokenSource {
    pub fn new(seed: u64, cfg: GqaConfig) -> Self {
        Self { seed, cfg }
    }

    pub fn cfg(&self) -> &GqaConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token(&self, tag: TokenTag) -> TokenEmbeddings {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((tag.seq as u64) << 40) ^ tag.position);
        let q_len = self.cfg.n_query_heads * self.cfg.head_dim;
        let kv_len = self.cfg.n_kv_heads * self.cfg.head_dim;
        let mut draw =
            |n: usize| -> Vec<f32> { (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect() };
        let q = draw(q_len);
        let k = draw(kv_len);
        let v = draw(kv_len);
        TokenEmbeddings { q, k, v }
    }

    /// Q, K and V blocks for the given slots; `None` slots become padding.
    pub fn blocks(
        &self,
        slots: &[Option<TokenTag>],
    ) -> Result<(EmbeddingBlock, EmbeddingBlock, EmbeddingBlock)> {
        let c = &self.cfg;
        let mut q = EmbeddingBlock::with_capacity(c.n_query_heads, c.head_dim, slots.len());
        let mut k = EmbeddingBlock::with_capacity(c.n_kv_heads, c.head_dim, slots.len());
        let mut v = EmbeddingBlock::with_capacity(c.n_kv_heads, c.head_dim, slots.len());
        for slot in slots {
            match slot {
                Some(tag) => {
                    let e = self.token(*tag);
                    q.push(*tag, &e.q)?;
                    k.push(*tag, &e.k)?;
                    v.push(*tag, &e.v)?;
                }
                None => {
                    q.push_padding(1);
                    k.push_padding(1);
                    v.push_padding(1);
                }
            }
        }
        Ok((q, k, v))
    }

    /// Contiguous tokens `[start, end)` of one sequence.
    pub fn range(
        &self,
        seq: SeqId,
        start: u64,
        end: u64,
    ) -> Result<(EmbeddingBlock, EmbeddingBlock, EmbeddingBlock)> {
        let slots: Vec<_> = (start..end)
            .map(|position| Some(TokenTag { seq, position }))
            .collect();
        self.blocks(&slots)
    }
}
