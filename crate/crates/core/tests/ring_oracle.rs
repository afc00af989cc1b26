mod common;

use std::collections::BTreeMap;

use common::{rel_err, Reference};
use ctxpar_core::embed::TokenSource;
use ctxpar_core::kv_cache::RankKvCache;
use ctxpar_core::perf::Protocol;
use ctxpar_core::ring::{
    decode_inputs, ring_pass_kv_prefill, ring_pass_q_decode, ring_pass_q_prefill, shard_inputs,
    EngineOptions, Executor, MessageKind, Session, Strategy, Turn,
};
use ctxpar_core::sharding::{plan_decode, plan_full_prefill, plan_partial_prefill, SequenceSpec};
use ctxpar_core::tensor::{gqa_attention, merge_attention, EmbeddingBlock, PartialAttention};
use ctxpar_core::GqaConfig;

const TOL: f64 = 1e-6;

fn check_partials(partials: &[PartialAttention], reference: &mut Reference, hd: usize) -> usize {
    let mut checked = 0;
    for p in partials {
        for t in 0..p.num_tokens() {
            if let Some(tag) = p.output.tag(t) {
                let (expected, lse) = reference.attend(tag.seq, tag.position);
                let err = rel_err(p.output.token(t), &expected, hd);
                assert!(err <= TOL, "seq {} pos {}: {err}", tag.seq, tag.position);
                let heads = p.output.num_heads();
                for h in 0..heads {
                    assert!((p.lse[t * heads + h] - lse[h]).abs() <= 1e-9 * lse[h].abs().max(1.0));
                }
                checked += 1;
            }
        }
    }
    checked
}

#[test]
fn gqa_matches_brute_force_on_one_block() {
    let cfg = GqaConfig::new(8, 2, 16).unwrap();
    let src = TokenSource::new(42, cfg);
    let (q, k, v) = src.range(3, 0, 40).unwrap();
    let out = gqa_attention(&q, &k, &v, &cfg).unwrap();
    let mut reference = Reference::new(src);
    assert_eq!(check_partials(&[out], &mut reference, 16), 40);
}

#[test]
fn merging_key_splits_matches_whole() {
    let cfg = GqaConfig::new(4, 1, 8).unwrap();
    let src = TokenSource::new(9, cfg);
    let (q, k, v) = src.range(0, 0, 30).unwrap();
    let splits = [0usize, 7, 8, 21, 30];
    let parts: Vec<_> = splits
        .windows(2)
        .map(|w| {
            let idx: Vec<usize> = (w[0]..w[1]).collect();
            gqa_attention(&q, &k.select(&idx), &v.select(&idx), &cfg).unwrap()
        })
        .collect();
    let merged = merge_attention(&parts).unwrap();
    let mut reference = Reference::new(src);
    check_partials(&[merged], &mut reference, 8);
}

#[test]
fn fused_partial_prefill_two_ranks() {
    // P = (10, 6), T = (8, 4) on 2 ranks, both protocols.
    let cfg = GqaConfig::new(4, 2, 8).unwrap();
    let src = TokenSource::new(17, cfg);
    let mut caches = vec![RankKvCache::new(2, 8); 2];
    let first = plan_full_prefill(
        &[SequenceSpec::new(0, 0, 10), SequenceSpec::new(1, 0, 6)],
        2,
    )
    .unwrap();
    let inputs = shard_inputs(&first, &src).unwrap();
    let opts = EngineOptions::default();
    let (p0, _) = ring_pass_kv_prefill(&first, &mut caches, &inputs, &cfg, &opts).unwrap();
    let mut reference = Reference::new(src);
    assert_eq!(check_partials(&p0, &mut reference, 8), 16);

    let layout: Vec<Vec<usize>> = [0, 1]
        .iter()
        .map(|&s| caches.iter().map(|c| c.cached_len(s)).collect())
        .collect();
    let plan = plan_partial_prefill(
        &[SequenceSpec::new(0, 10, 8), SequenceSpec::new(1, 6, 4)],
        2,
        &layout,
    )
    .unwrap();
    let inputs = shard_inputs(&plan, &src).unwrap();
    let mut c_kv = caches.clone();
    let mut c_q = caches;
    let (kv, kv_trace) = ring_pass_kv_prefill(&plan, &mut c_kv, &inputs, &cfg, &opts).unwrap();
    let (q, q_trace) = ring_pass_q_prefill(&plan, &mut c_q, &inputs, &cfg, &opts).unwrap();
    assert_eq!(check_partials(&kv, &mut reference, 8), 12);
    assert_eq!(kv, q);
    assert_eq!(c_kv, c_q);
    assert_eq!(kv_trace.all_to_alls, 0);
    assert_eq!(q_trace.all_to_alls, 1);
    assert_eq!(kv_trace.total_pairs(), q_trace.total_pairs());
}

#[test]
fn decode_four_sequences_two_ranks() {
    let cfg = GqaConfig::new(8, 4, 16).unwrap();
    let src = TokenSource::new(5, cfg);
    let mut session = Session::new(cfg, 2, 5, EngineOptions::default()).unwrap();
    session
        .run_turn(
            &Turn::FullPrefill {
                lengths: vec![32; 4],
            },
            Strategy::PassKv,
        )
        .unwrap();
    let mut caches = session.caches().to_vec();
    let batch = [0, 1, 2, 3];
    let plan = plan_decode(&batch, 2, 0).unwrap();
    let next: BTreeMap<_, _> = batch.iter().map(|&s| (s, 32u64)).collect();
    let inputs = decode_inputs(&plan, &src, &next).unwrap();
    let (out, trace) =
        ring_pass_q_decode(&plan, &mut caches, &inputs, &cfg, &EngineOptions::default()).unwrap();
    let mut reference = Reference::new(src);
    assert_eq!(check_partials(&out, &mut reference, 16), 4);
    assert_eq!(trace.ring_sends, 1);
    assert_eq!(trace.steps[0].kind, MessageKind::Q);
    assert_eq!(trace.steps.last().unwrap().kind, MessageKind::A2a);
    let total: usize = caches.iter().map(|c| c.total_len()).sum();
    assert_eq!(total, 4 * 33);
}

#[test]
fn decode_single_rank_is_incremental_step() {
    let cfg = GqaConfig::new(2, 1, 4).unwrap();
    let mut s = Session::new(cfg, 1, 1, EngineOptions::default()).unwrap();
    s.run_turn(&Turn::FullPrefill { lengths: vec![7] }, Strategy::PassKv)
        .unwrap();
    let rec = s
        .run_turn(
            &Turn::Decode {
                seqs: None,
                steps: 1,
            },
            Strategy::PassKv,
        )
        .unwrap()
        .remove(0);
    assert_eq!(rec.trace.ring_bytes_per_rank(), 0);
    assert_eq!(rec.outputs[0].position, 7);
    let mut reference = Reference::new(*s.source());
    assert!(reference.record_error(&rec) <= TOL);
}

#[test]
fn decode_balance_over_eight_iterations() {
    let cfg = GqaConfig::new(2, 1, 4).unwrap();
    let mut s = Session::new(cfg, 2, 3, EngineOptions::default()).unwrap();
    s.run_turn(
        &Turn::FullPrefill {
            lengths: vec![6, 9, 4],
        },
        Strategy::PassKv,
    )
    .unwrap();
    let before: Vec<Vec<usize>> = s
        .caches()
        .iter()
        .map(|c| (0..3).map(|q| c.cached_len(q)).collect())
        .collect();
    s.run_turn(
        &Turn::Decode {
            seqs: None,
            steps: 8,
        },
        Strategy::PassKv,
    )
    .unwrap();
    for seq in 0..3 {
        let added: Vec<usize> = s
            .caches()
            .iter()
            .enumerate()
            .map(|(r, c)| c.cached_len(seq) - before[r][seq as usize])
            .collect();
        assert_eq!(added.iter().sum::<usize>(), 8);
        let (lo, hi) = (added.iter().min().unwrap(), added.iter().max().unwrap());
        assert!(hi - lo <= 1, "seq {seq}: {added:?}");
    }
}

#[test]
fn three_stage_conversation_matches_oracle() {
    let cfg = GqaConfig::new(4, 2, 8).unwrap();
    for exec in [Executor::RoundBased, Executor::Threaded] {
        let mut s = Session::new(cfg, 2, 21, EngineOptions::new(exec)).unwrap();
        let turns = [
            Turn::FullPrefill { lengths: vec![64] },
            Turn::Decode {
                seqs: None,
                steps: 16,
            },
            Turn::PartialPrefill {
                seqs: None,
                lengths: vec![8],
            },
        ];
        let t = s.run_turns(&turns, Strategy::Adaptive).unwrap();
        let mut reference = Reference::new(*s.source());
        for r in &t.records {
            assert!(reference.record_error(r) <= TOL, "call {}", r.call);
        }
        assert_eq!(t.records[0].protocol, Protocol::PassKv);
    }
}

#[test]
fn single_full_prefill_turn_equals_direct_call() {
    let cfg = GqaConfig::new(4, 2, 8).unwrap();
    let mut s = Session::new(cfg, 3, 8, EngineOptions::default()).unwrap();
    let rec = s
        .run_turn(&Turn::FullPrefill { lengths: vec![64] }, Strategy::PassKv)
        .unwrap()
        .remove(0);
    let src = TokenSource::new(8, cfg);
    let plan = plan_full_prefill(&[SequenceSpec::new(0, 0, 64)], 3).unwrap();
    let inputs = shard_inputs(&plan, &src).unwrap();
    let mut caches = vec![RankKvCache::new(2, 8); 3];
    let (out, trace) =
        ring_pass_kv_prefill(&plan, &mut caches, &inputs, &cfg, &EngineOptions::default()).unwrap();
    assert_eq!(rec.trace, trace);
    let direct: usize = out.iter().map(|p| p.output.valid_count()).sum();
    assert_eq!(direct, rec.outputs.len());
    assert_eq!(caches, s.caches());
}

#[test]
fn padding_rows_stay_inert() {
    // T = 5 on 4 ranks leaves most chunks padded.
    let cfg = GqaConfig::new(2, 1, 4).unwrap();
    let src = TokenSource::new(2, cfg);
    let plan = plan_full_prefill(&[SequenceSpec::new(0, 0, 5)], 4).unwrap();
    let inputs = shard_inputs(&plan, &src).unwrap();
    let mut caches = vec![RankKvCache::new(1, 4); 4];
    let (out, _) =
        ring_pass_q_prefill(&plan, &mut caches, &inputs, &cfg, &EngineOptions::default()).unwrap();
    let mut reference = Reference::new(src);
    assert_eq!(check_partials(&out, &mut reference, 4), 5);
    for p in &out {
        for t in 0..p.num_tokens() {
            if !p.output.is_valid(t) {
                assert!(p.output.token(t).iter().all(|&x| x == 0.0));
            }
        }
    }
    let empty = EmbeddingBlock::new(1, 4);
    let lone = gqa_attention(&inputs[0].q, &empty, &empty, &cfg).unwrap();
    assert!(lone.lse.iter().all(|&l| l == f64::NEG_INFINITY));
}
