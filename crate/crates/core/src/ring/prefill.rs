use super::comm::{all_to_all, circulate, StepOutput};
use super::{merge_partials, EngineOptions, MessageKind, RingTopology, StepRecord, StepTrace};
use crate::embed::TokenSource;
use crate::error::{Error, Result};
use crate::kv_cache::RankKvCache;
use crate::sharding::ShardPlan;
use crate::tensor::{admitted_pairs, gqa_attention, EmbeddingBlock, GqaConfig, PartialAttention};

/// New-token inputs held by one rank. `q` follows the plan's slot layout,
/// padding included; `k` and `v` hold only the real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RankInputs {
    pub q: EmbeddingBlock,
    pub k: EmbeddingBlock,
    pub v: EmbeddingBlock,
}

/// Materialises every rank's new-token Q/K/V for `plan`.
pub fn shard_inputs(plan: &ShardPlan, source: &TokenSource) -> Result<Vec<RankInputs>> {
    (0..plan.n_ranks)
        .map(|rank| {
            let slots = plan.rank_slots(rank);
            let (q, k, v) = source.blocks(&slots)?;
            let real: Vec<usize> = (0..k.num_tokens()).filter(|&i| k.is_valid(i)).collect();
            Ok(RankInputs {
                q,
                k: k.select(&real),
                v: v.select(&real),
            })
        })
        .collect()
}

#[derive(Clone)]
pub(super) struct KvBlock {
    pub k: EmbeddingBlock,
    pub v: EmbeddingBlock,
}

fn check_prefill(
    plan: &ShardPlan,
    caches: &[RankKvCache],
    inputs: &[RankInputs],
    cfg: &GqaConfig,
) -> Result<RingTopology> {
    cfg.validate()?;
    let topo = RingTopology::new(plan.n_ranks)?;
    if caches.len() != plan.n_ranks || inputs.len() != plan.n_ranks {
        return Err(Error::Engine(format!(
            "plan has {} ranks but got {} caches and {} input sets",
            plan.n_ranks,
            caches.len(),
            inputs.len()
        )));
    }
    let q_len = plan.query_len();
    for (rank, (cache, input)) in caches.iter().zip(inputs).enumerate() {
        if input.q.num_tokens() != q_len {
            return Err(Error::Engine(format!(
                "rank {rank} holds {} query slots, plan expects {q_len}",
                input.q.num_tokens()
            )));
        }
        if cache.n_kv_heads() != cfg.n_kv_heads || cache.head_dim() != cfg.head_dim {
            return Err(Error::Engine(format!(
                "rank {rank} cache layout does not match the attention config"
            )));
        }
        for s in &plan.sequences {
            if cache.cached_len(s.seq_id) != s.rank_cached_counts[rank] {
                return Err(Error::Engine(format!(
                    "rank {rank} caches {} tokens of sequence {}, plan says {}",
                    cache.cached_len(s.seq_id),
                    s.seq_id,
                    s.rank_cached_counts[rank]
                )));
            }
        }
    }
    Ok(topo)
}

/// Stores each rank's new K/V in its cache ahead of the ring.
fn append_new_kv(
    plan: &ShardPlan,
    caches: &mut [RankKvCache],
    inputs: &[RankInputs],
) -> Result<()> {
    for (cache, input) in caches.iter_mut().zip(inputs) {
        for s in &plan.sequences {
            let idx: Vec<usize> = (0..input.k.num_tokens())
                .filter(|&i| input.k.tag(i).is_some_and(|t| t.seq == s.seq_id))
                .collect();
            if idx.is_empty() {
                continue;
            }
            cache.append(s.seq_id, &input.k.select(&idx), &input.v.select(&idx))?;
        }
    }
    Ok(())
}

/// Rank-local KV for the plan's sequences, concatenated in plan order and
/// optionally padded per sequence to `lengths[i]`.
fn local_kv(plan: &ShardPlan, cache: &RankKvCache, lengths: Option<&[usize]>) -> Result<KvBlock> {
    let mut k = EmbeddingBlock::new(cache.n_kv_heads(), cache.head_dim());
    let mut v = k.clone();
    for (i, s) in plan.sequences.iter().enumerate() {
        let (sk, sv) = match lengths {
            Some(l) => cache.snapshot_padded(s.seq_id, l[i])?,
            None => cache.get(s.seq_id),
        };
        k.extend_from(&sk)?;
        v.extend_from(&sv)?;
    }
    Ok(KvBlock { k, v })
}

pub(super) struct Computed {
    pub partial: PartialAttention,
    pub pairs: u64,
}

pub(super) fn attend(
    q: &EmbeddingBlock,
    k: &EmbeddingBlock,
    v: &EmbeddingBlock,
    cfg: &GqaConfig,
) -> Result<Computed> {
    Ok(Computed {
        partial: gqa_attention(q, k, v, cfg)?,
        pairs: admitted_pairs(q, k),
    })
}

/// Trace rows for the ring loop: at step `j` rank `k` forwards the block
/// that started on `(k - j) mod N`; nothing is sent at the final step.
pub(super) fn ring_records<O>(
    kind: MessageKind,
    topo: RingTopology,
    msg_bytes: &[u64],
    msg_tokens: &[usize],
    steps: &[Vec<StepOutput<O>>],
    pairs: impl Fn(&O) -> u64,
) -> Vec<StepRecord> {
    let n = topo.n_ranks;
    (0..n)
        .map(|j| {
            let sends = j + 1 < n;
            let src = |k: usize| topo.source_at(k, j);
            StepRecord {
                step: j,
                kind,
                bytes: (0..n)
                    .map(|k| if sends { msg_bytes[src(k)] } else { 0 })
                    .collect(),
                tokens: (0..n)
                    .map(|k| if sends { msg_tokens[src(k)] } else { 0 })
                    .collect(),
                pairs: (0..n).map(|k| pairs(&steps[k][j].value)).collect(),
            }
        })
        .collect()
}

pub(super) fn check_equal_messages(kind: MessageKind, tokens: &[usize]) -> Result<()> {
    if tokens.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Engine(format!(
            "{} messages differ in length across ranks: {tokens:?}",
            kind.as_str()
        )));
    }
    Ok(())
}

/// Ring pass-KV prefill over fused variable-length sequences.
///
/// New K/V are appended to the caches first. Every rank then pads its local
/// KV of sequence `i` to `L_i = max_j(P_ij + T_ij)` so all ring messages are
/// the same size, circulates it `N - 1` times, computes `N` partial
/// attentions for its own queries and merges them by source rank.
pub fn ring_pass_kv_prefill(
    plan: &ShardPlan,
    caches: &mut [RankKvCache],
    inputs: &[RankInputs],
    cfg: &GqaConfig,
    opts: &EngineOptions,
) -> Result<(Vec<PartialAttention>, StepTrace)> {
    let topo = check_prefill(plan, caches, inputs, cfg)?;
    append_new_kv(plan, caches, inputs)?;

    let lengths: Vec<usize> = plan
        .sequences
        .iter()
        .map(|s| {
            caches
                .iter()
                .map(|c| c.cached_len(s.seq_id))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let blocks = caches
        .iter()
        .map(|c| local_kv(plan, c, Some(&lengths)))
        .collect::<Result<Vec<_>>>()?;
    let msg_tokens: Vec<usize> = blocks.iter().map(|b| b.k.num_tokens()).collect();
    check_equal_messages(MessageKind::Kv, &msg_tokens)?;
    let msg_bytes: Vec<u64> = blocks
        .iter()
        .map(|b| b.k.wire_bytes() + b.v.wire_bytes())
        .collect();

    let steps = circulate(opts.executor, topo, blocks, |k, _src, kv: &KvBlock| {
        attend(&inputs[k].q, &kv.k, &kv.v, cfg)
    })?;
    let records = ring_records(
        MessageKind::Kv,
        topo,
        &msg_bytes,
        &msg_tokens,
        &steps,
        |c| c.pairs,
    );

    let outputs = steps
        .into_iter()
        .map(|mut rank_steps| {
            rank_steps.sort_by_key(|s| s.source);
            merge_partials(
                rank_steps.into_iter().map(|s| s.value.partial).collect(),
                opts.fault,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((
        outputs,
        StepTrace {
            n_ranks: topo.n_ranks,
            steps: records,
            ring_sends: topo.ring_steps(),
            all_to_alls: 0,
        },
    ))
}

/// Returns scattered partials to their query owners and merges them.
/// `steps[k]` holds, for every visiting source `s`, rank `k`'s partial for
/// the queries of `s`.
pub(super) fn scatter_back(
    topo: RingTopology,
    opts: &EngineOptions,
    steps: Vec<Vec<StepOutput<Computed>>>,
    records: &mut Vec<StepRecord>,
) -> Result<Vec<PartialAttention>> {
    let n = topo.n_ranks;
    let mut a2a_bytes = vec![0u64; n];
    let mut a2a_tokens = vec![0usize; n];
    let outgoing: Vec<Vec<PartialAttention>> = steps
        .into_iter()
        .enumerate()
        .map(|(k, mut rank_steps)| {
            rank_steps.sort_by_key(|s| s.source);
            rank_steps
                .into_iter()
                .map(|s| {
                    if s.source != k {
                        a2a_bytes[k] += s.value.partial.wire_bytes();
                        a2a_tokens[k] += s.value.partial.num_tokens();
                    }
                    s.value.partial
                })
                .collect()
        })
        .collect();
    check_equal_messages(MessageKind::A2a, &a2a_tokens)?;
    records.push(StepRecord {
        step: records.len(),
        kind: MessageKind::A2a,
        bytes: a2a_bytes,
        tokens: a2a_tokens,
        pairs: vec![0; n],
    });
    // incoming[s][k]: partial for the queries of s computed against KV_k.
    let incoming = all_to_all(opts.executor, topo, outgoing)?;
    incoming
        .into_iter()
        .map(|parts| merge_partials(parts, opts.fault))
        .collect()
}

/// Ring pass-Q prefill. KV stays resident; query blocks (equal length on
/// every rank thanks to load-balanced sharding) circulate, and the partial
/// outputs come home through one all-to-all before the same source-ordered
/// merge as pass-KV.
pub fn ring_pass_q_prefill(
    plan: &ShardPlan,
    caches: &mut [RankKvCache],
    inputs: &[RankInputs],
    cfg: &GqaConfig,
    opts: &EngineOptions,
) -> Result<(Vec<PartialAttention>, StepTrace)> {
    let topo = check_prefill(plan, caches, inputs, cfg)?;
    append_new_kv(plan, caches, inputs)?;

    let resident = caches
        .iter()
        .map(|c| local_kv(plan, c, None))
        .collect::<Result<Vec<_>>>()?;
    let queries: Vec<EmbeddingBlock> = inputs.iter().map(|i| i.q.clone()).collect();
    let msg_tokens: Vec<usize> = queries.iter().map(|q| q.num_tokens()).collect();
    check_equal_messages(MessageKind::Q, &msg_tokens)?;
    let msg_bytes: Vec<u64> = queries.iter().map(|q| q.wire_bytes()).collect();

    let steps = circulate(
        opts.executor,
        topo,
        queries,
        |k, _src, q: &EmbeddingBlock| attend(q, &resident[k].k, &resident[k].v, cfg),
    )?;
    let mut records = ring_records(MessageKind::Q, topo, &msg_bytes, &msg_tokens, &steps, |c| {
        c.pairs
    });
    let outputs = scatter_back(topo, opts, steps, &mut records)?;
    Ok((
        outputs,
        StepTrace {
            n_ranks: topo.n_ranks,
            steps: records,
            ring_sends: topo.ring_steps(),
            all_to_alls: 1,
        },
    ))
}
