//! Dense attention substrate.
//!
//! A [`Block`] is a `[tokens, heads, head_dim]` array where every token row
//! carries a tag: the sequence it belongs to and its global position, or
//! nothing when the row is padding. Attention masking is derived from the
//! tags alone, so blocks can be rearranged and shipped between ranks
//! without any side tables.
//!
//! Inputs are stored as `f32`. All arithmetic on them, partial outputs
//! included, happens in `f64`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type SeqId = u32;

/// Identity of a real (non-padding) token row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TokenTag {
    pub seq: SeqId,
    pub position: u64,
}

/// Position reported for padding rows.
pub const PAD_POSITION: u64 = u64::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct Block<E> {
    num_heads: usize,
    head_dim: usize,
    data: Vec<E>,
    tags: Vec<Option<TokenTag>>,
}

/// Attention inputs (Q, K, V), stored in single precision.
pub type EmbeddingBlock = Block<f32>;
/// Attention outputs, kept at accumulation precision.
pub type OutputBlock = Block<f64>;

impl<E: Copy + Default> Block<E> {
    pub fn new(num_heads: usize, head_dim: usize) -> Self {
        Self {
            num_heads,
            head_dim,
            data: Vec::new(),
            tags: Vec::new(),
        }
    }

    pub fn with_capacity(num_heads: usize, head_dim: usize, tokens: usize) -> Self {
        Self {
            num_heads,
            head_dim,
            data: Vec::with_capacity(tokens * num_heads * head_dim),
            tags: Vec::with_capacity(tokens),
        }
    }

    /// Builds a block from a flat row-major buffer and per-token tags.
    pub fn from_parts(
        num_heads: usize,
        head_dim: usize,
        data: Vec<E>,
        tags: Vec<Option<TokenTag>>,
    ) -> Result<Self> {
        if data.len() != tags.len() * num_heads * head_dim {
            return Err(Error::Shape(format!(
                "buffer of {} elements does not hold {} tokens x {} heads x {} dims",
                data.len(),
                tags.len(),
                num_heads,
                head_dim
            )));
        }
        Ok(Self {
            num_heads,
            head_dim,
            data,
            tags,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tags.len()
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn row_len(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn tags(&self) -> &[Option<TokenTag>] {
        &self.tags
    }

    pub fn tag(&self, token: usize) -> Option<TokenTag> {
        self.tags[token]
    }

    pub fn is_valid(&self, token: usize) -> bool {
        self.tags[token].is_some()
    }

    /// Global position of a token, [`PAD_POSITION`] for padding.
    pub fn position(&self, token: usize) -> u64 {
        self.tags[token].map_or(PAD_POSITION, |t| t.position)
    }

    pub fn positions(&self) -> Vec<u64> {
        (0..self.num_tokens()).map(|t| self.position(t)).collect()
    }

    pub fn valid_count(&self) -> usize {
        self.tags.iter().filter(|t| t.is_some()).count()
    }

    /// All heads of one token.
    pub fn token(&self, token: usize) -> &[E] {
        let n = self.row_len();
        &self.data[token * n..(token + 1) * n]
    }

    /// One `(token, head)` row of `head_dim` elements.
    pub fn row(&self, token: usize, head: usize) -> &[E] {
        let start = (token * self.num_heads + head) * self.head_dim;
        &self.data[start..start + self.head_dim]
    }

    pub fn row_mut(&mut self, token: usize, head: usize) -> &mut [E] {
        let start = (token * self.num_heads + head) * self.head_dim;
        &mut self.data[start..start + self.head_dim]
    }

    pub fn push(&mut self, tag: TokenTag, values: &[E]) -> Result<()> {
        if values.len() != self.row_len() {
            return Err(Error::Shape(format!(
                "token row has {} elements, block expects {}",
                values.len(),
                self.row_len()
            )));
        }
        self.data.extend_from_slice(values);
        self.tags.push(Some(tag));
        Ok(())
    }

    pub fn push_padding(&mut self, count: usize) {
        let n = self.row_len();
        self.data
            .extend(std::iter::repeat_n(E::default(), count * n));
        self.tags.extend(std::iter::repeat_n(None, count));
    }

    /// Appends every token of `other`. Head layout must match.
    pub fn extend_from(&mut self, other: &Self) -> Result<()> {
        self.check_same_layout(other)?;
        self.data.extend_from_slice(&other.data);
        self.tags.extend_from_slice(&other.tags);
        Ok(())
    }

    pub fn concat<'a, I>(num_heads: usize, head_dim: usize, parts: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Self>,
        E: 'a,
    {
        let mut out = Self::new(num_heads, head_dim);
        for p in parts {
            out.extend_from(p)?;
        }
        Ok(out)
    }

    /// Copy of the selected token rows, in the given order.
    pub fn select(&self, tokens: &[usize]) -> Self {
        let mut out = Self::with_capacity(self.num_heads, self.head_dim, tokens.len());
        for &t in tokens {
            out.data.extend_from_slice(self.token(t));
            out.tags.push(self.tags[t]);
        }
        out
    }

    /// Copy padded with invalid rows up to `len` tokens.
    pub fn padded_to(&self, len: usize) -> Result<Self> {
        if len < self.num_tokens() {
            return Err(Error::Shape(format!(
                "cannot pad {} tokens down to {}",
                self.num_tokens(),
                len
            )));
        }
        let mut out = self.clone();
        out.push_padding(len - self.num_tokens());
        Ok(out)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.num_heads == other.num_heads
            && self.head_dim == other.head_dim
            && self.num_tokens() == other.num_tokens()
    }

    fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.num_heads != other.num_heads || self.head_dim != other.head_dim {
            return Err(Error::Shape(format!(
                "head layout {}x{} does not match {}x{}",
                other.num_heads, other.head_dim, self.num_heads, self.head_dim
            )));
        }
        Ok(())
    }
}

impl EmbeddingBlock {
    /// Payload size when shipped between ranks.
    pub fn wire_bytes(&self) -> u64 {
        (self.data.len() * std::mem::size_of::<f32>()) as u64
    }
}

/// Grouped-query attention head configuration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GqaConfig {
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub scale: f64,
}

impl GqaConfig {
    /// Uses the standard `1/sqrt(head_dim)` scale.
    pub fn new(n_query_heads: usize, n_kv_heads: usize, head_dim: usize) -> Result<Self> {
        Self::with_scale(
            n_query_heads,
            n_kv_heads,
            head_dim,
            1.0 / (head_dim as f64).sqrt(),
        )
    }

    pub fn with_scale(
        n_query_heads: usize,
        n_kv_heads: usize,
        head_dim: usize,
        scale: f64,
    ) -> Result<Self> {
        let cfg = Self {
            n_query_heads,
            n_kv_heads,
            head_dim,
            scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_query_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "head counts and head_dim must be positive".into(),
            ));
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} query heads are not divisible by {} kv heads",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if !self.scale.is_finite() {
            return Err(Error::Config("attention scale must be finite".into()));
        }
        Ok(())
    }

    /// KV head read by query head `h`.
    pub fn kv_head(&self, h: usize) -> usize {
        h * self.n_kv_heads / self.n_query_heads
    }
}

/// Attention output over a subset of keys, with the log-sum-exp of the
/// scores it attended to. Rows that saw no keys have `lse = -inf` and a
/// zero output.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttention {
    pub output: OutputBlock,
    /// `[tokens, query heads]`, row-major.
    pub lse: Vec<f64>,
}

impl PartialAttention {
    pub fn empty_like(q: &EmbeddingBlock) -> Self {
        let mut output = OutputBlock::with_capacity(q.num_heads(), q.head_dim(), q.num_tokens());
        output.data = vec![0.0; q.data().len()];
        output.tags = q.tags().to_vec();
        Self {
            output,
            lse: vec![f64::NEG_INFINITY; q.num_tokens() * q.num_heads()],
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.output.num_tokens()
    }

    pub fn lse_at(&self, token: usize, head: usize) -> f64 {
        self.lse[token * self.output.num_heads() + head]
    }

    /// Size of the output rows plus one lse scalar per row, as if shipped in
    /// single precision.
    pub fn wire_bytes(&self) -> u64 {
        ((self.output.data().len() + self.lse.len()) * std::mem::size_of::<f32>()) as u64
    }
}

fn check_inputs(
    q: &EmbeddingBlock,
    k: &EmbeddingBlock,
    v: &EmbeddingBlock,
    cfg: &GqaConfig,
) -> Result<()> {
    cfg.validate()?;
    if q.num_heads() != cfg.n_query_heads || q.head_dim() != cfg.head_dim {
        return Err(Error::Shape(format!(
            "query block is {}x{}, config wants {}x{}",
            q.num_heads(),
            q.head_dim(),
            cfg.n_query_heads,
            cfg.head_dim
        )));
    }
    if k.num_heads() != cfg.n_kv_heads || k.head_dim() != cfg.head_dim {
        return Err(Error::Shape(format!(
            "key block is {}x{}, config wants {}x{}",
            k.num_heads(),
            k.head_dim(),
            cfg.n_kv_heads,
            cfg.head_dim
        )));
    }
    if !k.same_shape(v) || k.tags() != v.tags() {
        return Err(Error::Shape(
            "key and value blocks differ in shape or token tags".into(),
        ));
    }
    Ok(())
}

/// Whether a key row is visible to a query row: both real, same sequence,
/// key not after the query.
#[inline]
pub fn admits(query: Option<TokenTag>, key: Option<TokenTag>) -> bool {
    match (query, key) {
        (Some(q), Some(k)) => q.seq == k.seq && k.position <= q.position,
        _ => false,
    }
}

/// Number of `(query token, key token)` pairs the causal mask admits.
pub fn admitted_pairs(q: &EmbeddingBlock, k: &EmbeddingBlock) -> u64 {
    let mut n = 0;
    for qt in q.tags() {
        for kt in k.tags() {
            if admits(*qt, *kt) {
                n += 1;
            }
        }
    }
    n
}

/// Causal grouped-query attention of `q` against `k`/`v`.
///
/// Keys are visited in ascending index order and the softmax is taken in two
/// passes (max, then sum), both in `f64`.
pub fn gqa_attention(
    q: &EmbeddingBlock,
    k: &EmbeddingBlock,
    v: &EmbeddingBlock,
    cfg: &GqaConfig,
) -> Result<PartialAttention> {
    check_inputs(q, k, v, cfg)?;
    let mut out = PartialAttention::empty_like(q);
    let d = cfg.head_dim;
    let mut keys: Vec<usize> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    let mut acc = vec![0.0f64; d];

    for i in 0..q.num_tokens() {
        let qtag = q.tag(i);
        if qtag.is_none() {
            continue;
        }
        keys.clear();
        keys.extend((0..k.num_tokens()).filter(|&j| admits(qtag, k.tag(j))));
        if keys.is_empty() {
            continue;
        }
        for h in 0..cfg.n_query_heads {
            let kvh = cfg.kv_head(h);
            let qrow = q.row(i, h);
            scores.clear();
            scores.extend(keys.iter().map(|&j| {
                let dot: f64 = qrow
                    .iter()
                    .zip(k.row(j, kvh))
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum();
                cfg.scale * dot
            }));
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            acc.iter_mut().for_each(|a| *a = 0.0);
            let mut denom = 0.0;
            for (&j, &s) in keys.iter().zip(&scores) {
                let w = (s - max).exp();
                denom += w;
                for (a, &x) in acc.iter_mut().zip(v.row(j, kvh)) {
                    *a += w * x as f64;
                }
            }
            let row = out.output.row_mut(i, h);
            for (o, a) in row.iter_mut().zip(&acc) {
                *o = a / denom;
            }
            out.lse[i * cfg.n_query_heads + h] = max + denom.ln();
        }
    }
    Ok(out)
}

/// Merges two partials over disjoint key sets.
fn merge_pair(acc: &mut PartialAttention, next: &PartialAttention) {
    let heads = acc.output.num_heads();
    for t in 0..acc.num_tokens() {
        for h in 0..heads {
            let idx = t * heads + h;
            let (la, lb) = (acc.lse[idx], next.lse[idx]);
            if lb == f64::NEG_INFINITY {
                continue;
            }
            if la == f64::NEG_INFINITY {
                acc.lse[idx] = lb;
                acc.output
                    .row_mut(t, h)
                    .copy_from_slice(next.output.row(t, h));
                continue;
            }
            let max = la.max(lb);
            let merged = max + ((la - max).exp() + (lb - max).exp()).ln();
            let (wa, wb) = ((la - merged).exp(), (lb - merged).exp());
            let src = next.output.row(t, h);
            for (o, &x) in acc.output.row_mut(t, h).iter_mut().zip(src) {
                *o = *o * wa + x * wb;
            }
            acc.lse[idx] = merged;
        }
    }
}

/// Combines partial attentions computed over disjoint key sets.
///
/// Parts are folded left to right, so the list order is the reduction order;
/// callers pass them by ascending source rank.
pub fn merge_attention(parts: &[PartialAttention]) -> Result<PartialAttention> {
    let (first, rest) = parts
        .split_first()
        .ok_or_else(|| Error::Shape("merge_attention needs at least one part".into()))?;
    for p in rest {
        if !p.output.same_shape(&first.output) || p.output.tags() != first.output.tags() {
            return Err(Error::Shape(
                "partial attentions disagree on query shape".into(),
            ));
        }
    }
    let mut acc = first.clone();
    for p in rest {
        merge_pair(&mut acc, p);
    }
    Ok(acc)
}
