use std::collections::BTreeMap;

use super::comm::circulate;
use super::prefill::{attend, check_equal_messages, ring_records, scatter_back, RankInputs};
use super::{EngineOptions, MessageKind, RingTopology, StepTrace};
use crate::embed::TokenSource;
use crate::error::{Error, Result};
use crate::kv_cache::RankKvCache;
use crate::sharding::DecodePlan;
use crate::tensor::{EmbeddingBlock, GqaConfig, PartialAttention, SeqId, TokenTag};

/// One decode token per sequence, placed on its round-robin owner and padded
/// so every rank holds the same number of query slots. `next_positions`
/// gives the position of the token being generated for each sequence.
pub fn decode_inputs(
    plan: &DecodePlan,
    source: &TokenSource,
    next_positions: &BTreeMap<SeqId, u64>,
) -> Result<Vec<RankInputs>> {
    let width = plan.padded_len();
    plan.ranks
        .iter()
        .map(|slots| {
            let mut tags = Vec::with_capacity(width);
            for s in slots {
                let position = *next_positions
                    .get(&s.seq_id)
                    .ok_or(Error::UnknownSequence(s.seq_id))?;
                tags.push(Some(TokenTag {
                    seq: s.seq_id,
                    position,
                }));
            }
            tags.resize(width, None);
            let (q, k, v) = source.blocks(&tags)?;
            let real: Vec<usize> = (0..slots.len()).collect();
            Ok(RankInputs {
                q,
                k: k.select(&real),
                v: v.select(&real),
            })
        })
        .collect()
}

/// Batched ring pass-Q decode.
///
/// Each owner first appends its sequences' new K/V, so every query also
/// attends to its own token. Queries travel with their sequence ids; a rank
/// visited by query block `s` attends it against its own cache shard for
/// exactly those sequences. A sequence with no tokens on a rank yields an
/// all-masked partial, which the merge ignores.
pub fn ring_pass_q_decode(
    plan: &DecodePlan,
    caches: &mut [RankKvCache],
    inputs: &[RankInputs],
    cfg: &GqaConfig,
    opts: &EngineOptions,
) -> Result<(Vec<PartialAttention>, StepTrace)> {
    cfg.validate()?;
    let topo = RingTopology::new(plan.n_ranks)?;
    if caches.len() != plan.n_ranks || inputs.len() != plan.n_ranks {
        return Err(Error::Engine(format!(
            "decode plan has {} ranks but got {} caches and {} input sets",
            plan.n_ranks,
            caches.len(),
            inputs.len()
        )));
    }
    for (rank, input) in inputs.iter().enumerate() {
        for tag in input.q.tags().iter().flatten() {
            if caches.iter().all(|c| c.cached_len(tag.seq) == 0) {
                return Err(Error::UnknownSequence(tag.seq));
            }
            if plan.owner(tag.seq) != Some(rank) {
                return Err(Error::Engine(format!(
                    "rank {rank} holds a query for sequence {} it does not own",
                    tag.seq
                )));
            }
        }
    }
    for (cache, input) in caches.iter_mut().zip(inputs) {
        for i in 0..input.k.num_tokens() {
            let seq = input
                .k
                .tag(i)
                .map(|t| t.seq)
                .ok_or_else(|| Error::Engine("decode K/V must not contain padding".into()))?;
            cache.append(seq, &input.k.select(&[i]), &input.v.select(&[i]))?;
        }
    }

    let queries: Vec<EmbeddingBlock> = inputs.iter().map(|i| i.q.clone()).collect();
    let msg_tokens: Vec<usize> = queries.iter().map(|q| q.num_tokens()).collect();
    check_equal_messages(MessageKind::Q, &msg_tokens)?;
    // Sequence ids travel with the queries; count them as 4-byte words.
    let msg_bytes: Vec<u64> = queries
        .iter()
        .map(|q| q.wire_bytes() + 4 * q.num_tokens() as u64)
        .collect();

    let caches_ro: &[RankKvCache] = caches;
    let steps = circulate(
        opts.executor,
        topo,
        queries,
        |k, _src, q: &EmbeddingBlock| {
            let cache = &caches_ro[k];
            let mut bids: Vec<SeqId> = Vec::new();
            for t in q.tags().iter().flatten() {
                if !bids.contains(&t.seq) {
                    bids.push(t.seq);
                }
            }
            let mut keys = EmbeddingBlock::new(cfg.n_kv_heads, cfg.head_dim);
            let mut values = keys.clone();
            for b in bids {
                let (sk, sv) = cache.get(b);
                keys.extend_from(&sk)?;
                values.extend_from(&sv)?;
            }
            attend(q, &keys, &values, cfg)
        },
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sharding::plan_decode;

    #[test]
    fn unknown_sequence_is_rejected() {
        let cfg = GqaConfig::new(2, 1, 4).unwrap();
        let src = TokenSource::new(1, cfg);
        let plan = plan_decode(&[7], 2, 0).unwrap();
        let mut next = BTreeMap::new();
        next.insert(7, 0);
        let inputs = decode_inputs(&plan, &src, &next).unwrap();
        let mut caches = vec![RankKvCache::new(1, 4); 2];
        assert!(matches!(
            ring_pass_q_decode(&plan, &mut caches, &inputs, &cfg, &EngineOptions::default()),
            Err(Error::UnknownSequence(7))
        ));
        assert!(decode_inputs(&plan, &src, &BTreeMap::new()).is_err());
    }

    #[test]
    fn single_rank_single_sequence_step() {
        let cfg = GqaConfig::new(2, 1, 4).unwrap();
        let src = TokenSource::new(1, cfg);
        let mut caches = vec![RankKvCache::new(1, 4)];
        let (_, k, v) = src.range(0, 0, 5).unwrap();
        caches[0].append(0, &k, &v).unwrap();
        let plan = plan_decode(&[0], 1, 0).unwrap();
        let next = BTreeMap::from([(0, 5u64)]);
        let inputs = decode_inputs(&plan, &src, &next).unwrap();
        let (out, trace) =
            ring_pass_q_decode(&plan, &mut caches, &inputs, &cfg, &EngineOptions::default())
                .unwrap();
        assert_eq!(caches[0].cached_len(0), 6);
        assert_eq!(trace.total_pairs(), 6);
        assert_eq!(out[0].num_tokens(), 1);
    }

    #[test]
    fn queries_padded_to_common_width() {
        let cfg = GqaConfig::new(2, 1, 4).unwrap();
        let src = TokenSource::new(1, cfg);
        let plan = plan_decode(&[0, 1, 2], 2, 0).unwrap();
        let next = BTreeMap::from([(0, 3u64), (1, 3), (2, 3)]);
        let inputs = decode_inputs(&plan, &src, &next).unwrap();
        assert_eq!(inputs[0].q.num_tokens(), 2);
        assert_eq!(inputs[1].q.num_tokens(), 2);
        assert_eq!(inputs[1].q.valid_count(), 1);
        assert_eq!(inputs[1].k.num_tokens(), 1);
    }
}
