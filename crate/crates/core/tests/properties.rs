use std::collections::BTreeSet;

use proptest::prelude::*;

use ctxpar_core::embed::TokenSource;
use ctxpar_core::kv_cache::RankKvCache;
use ctxpar_core::ring::{
    ring_pass_kv_prefill, ring_pass_q_prefill, shard_inputs, EngineOptions, Session,
    Strategy as RingStrategy, Turn,
};
use ctxpar_core::sharding::{plan_decode, plan_full_prefill, SequenceSpec};
use ctxpar_core::tensor::{gqa_attention, merge_attention, EmbeddingBlock, TokenTag};
use ctxpar_core::GqaConfig;

fn gqa() -> impl Strategy<Value = GqaConfig> {
    prop_oneof![
        Just((4usize, 1usize, 4usize)),
        Just((4, 2, 8)),
        Just((8, 4, 4)),
        Just((2, 2, 16)),
    ]
    .prop_map(|(h, kv, d)| GqaConfig::new(h, kv, d).unwrap())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn key_split_then_merge_equals_whole(
        cfg in gqa(),
        len in 2u64..40,
        cut in 1usize..39,
        seed in any::<u64>(),
    ) {
        let cut = cut.min(len as usize - 1);
        let src = TokenSource::new(seed, cfg);
        let (q, k, v) = src.range(0, 0, len).unwrap();
        let whole = gqa_attention(&q, &k, &v, &cfg).unwrap();
        let a: Vec<usize> = (0..cut).collect();
        let b: Vec<usize> = (cut..len as usize).collect();
        let pa = gqa_attention(&q, &k.select(&a), &v.select(&a), &cfg).unwrap();
        let pb = gqa_attention(&q, &k.select(&b), &v.select(&b), &cfg).unwrap();
        let merged = merge_attention(&[pa, pb]).unwrap();
        prop_assert!(max_abs_diff(merged.output.data(), whole.output.data()) < 1e-12);
        prop_assert!(max_abs_diff(&merged.lse, &whole.lse) < 1e-12);
    }

    #[test]
    fn padding_keys_are_invisible(cfg in gqa(), len in 1u64..24, pad in 1usize..10, seed in any::<u64>()) {
        let src = TokenSource::new(seed, cfg);
        let (q, k, v) = src.range(1, 0, len).unwrap();
        let base = gqa_attention(&q, &k, &v, &cfg).unwrap();
        let mut kp = k.clone();
        let mut vp = v.clone();
        kp.push_padding(pad);
        vp.push_padding(pad);
        let padded = gqa_attention(&q, &kp, &vp, &cfg).unwrap();
        prop_assert_eq!(base, padded);
    }

    #[test]
    fn softmax_weights_sum_to_one(cfg in gqa(), len in 1u64..30, seed in any::<u64>()) {
        let src = TokenSource::new(seed, cfg);
        let (q, k, v) = src.range(0, 0, len).unwrap();
        let ones = EmbeddingBlock::from_parts(
            v.num_heads(),
            v.head_dim(),
            vec![1.0; v.data().len()],
            v.tags().to_vec(),
        )
        .unwrap();
        let out = gqa_attention(&q, &k, &ones, &cfg).unwrap();
        prop_assert!(out.output.data().iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn merge_is_associative(cfg in gqa(), len in 3u64..30, seed in any::<u64>()) {
        let src = TokenSource::new(seed, cfg);
        let (q, k, v) = src.range(0, 0, len).unwrap();
        let n = len as usize;
        let parts: Vec<_> = [(0, n / 3), (n / 3, 2 * n / 3), (2 * n / 3, n)]
            .iter()
            .map(|&(a, b)| {
                let idx: Vec<usize> = (a..b).collect();
                gqa_attention(&q, &k.select(&idx), &v.select(&idx), &cfg).unwrap()
            })
            .collect();
        let left = merge_attention(&parts).unwrap();
        let nested = merge_attention(&[
            merge_attention(&parts[..2]).unwrap(),
            parts[2].clone(),
        ]).unwrap();
        prop_assert_eq!(&left, &nested);
        let right = merge_attention(&[
            parts[0].clone(),
            merge_attention(&parts[1..]).unwrap(),
        ]).unwrap();
        prop_assert!(max_abs_diff(left.output.data(), right.output.data()) < 1e-12);
    }

    #[test]
    fn shard_plan_covers_every_token_once(
        n in 1usize..9,
        lens in prop::collection::vec(1usize..60, 1..4),
    ) {
        let specs: Vec<_> = lens.iter().enumerate()
            .map(|(i, &t)| SequenceSpec::new(i as u32, 0, t)).collect();
        let plan = plan_full_prefill(&specs, n).unwrap();
        let mut seen = BTreeSet::new();
        let width = plan.rank_slots(0).len();
        for r in 0..n {
            let slots = plan.rank_slots(r);
            prop_assert_eq!(slots.len(), width);
            for t in slots.into_iter().flatten() {
                prop_assert!(seen.insert((t.seq, t.position)));
            }
        }
        let expected: usize = lens.iter().sum();
        prop_assert_eq!(seen.len(), expected);
    }

    #[test]
    fn decode_ownership_is_balanced(b in 1usize..9, n in 1usize..9, iters in 1u64..40) {
        let batch: Vec<u32> = (0..b as u32).collect();
        let mut owned = vec![vec![0u64; n]; b];
        for it in 0..iters {
            let plan = plan_decode(&batch, n, it).unwrap();
            for (r, slots) in plan.ranks.iter().enumerate() {
                for s in slots {
                    owned[s.slot][r] += 1;
                }
            }
        }
        for row in owned {
            let (lo, hi) = (row.iter().min().unwrap(), row.iter().max().unwrap());
            prop_assert!(hi - lo <= 1);
        }
    }

    #[test]
    fn cache_round_trip(len in 1u64..50, chunks in prop::collection::vec(1u64..8, 1..10), seed in any::<u64>()) {
        let cfg = GqaConfig::new(2, 1, 4).unwrap();
        let src = TokenSource::new(seed, cfg);
        // Append in reverse chunk order so merging by position is exercised.
        let mut bounds = vec![0u64];
        for c in chunks {
            let last = *bounds.last().unwrap();
            if last >= len { break; }
            bounds.push((last + c).min(len));
        }
        if *bounds.last().unwrap() < len { bounds.push(len); }
        let mut cache = RankKvCache::new(1, 4);
        for w in bounds.windows(2).rev() {
            let (_, k, v) = src.range(4, w[0], w[1]).unwrap();
            cache.append(4, &k, &v).unwrap();
        }
        let (_, k, v) = src.range(4, 0, len).unwrap();
        prop_assert_eq!(cache.get(4), (k, v));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pass_kv_and_pass_q_agree_bitwise(
        cfg in gqa(),
        n in 1usize..6,
        cached in prop::collection::vec(0usize..40, 1..4),
        new in prop::collection::vec(1usize..30, 1..4),
        seed in any::<u64>(),
    ) {
        let b = cached.len().min(new.len());
        let mut s = Session::new(cfg, n, seed, EngineOptions::default()).unwrap();
        let open: Vec<usize> = (0..b).map(|i| cached[i].max(1)).collect();
        s.run_turn(&Turn::FullPrefill { lengths: open }, RingStrategy::PassKv).unwrap();
        let turn = Turn::PartialPrefill { seqs: None, lengths: new[..b].to_vec() };
        let mut a = s.clone();
        let ra = a.run_turn(&turn, RingStrategy::PassKv).unwrap();
        let rb = s.run_turn(&turn, RingStrategy::PassQ).unwrap();
        prop_assert_eq!(&ra[0].outputs, &rb[0].outputs);
        prop_assert_eq!(a.caches(), s.caches());
    }
}

#[test]
fn direct_protocols_share_caches_after_run() {
    let cfg = GqaConfig::new(4, 2, 4).unwrap();
    let src = TokenSource::new(0, cfg);
    let plan = plan_full_prefill(&[SequenceSpec::new(0, 0, 33)], 3).unwrap();
    let inputs = shard_inputs(&plan, &src).unwrap();
    let mut a = vec![RankKvCache::new(2, 4); 3];
    let mut b = a.clone();
    let opts = EngineOptions::default();
    let (oa, _) = ring_pass_kv_prefill(&plan, &mut a, &inputs, &cfg, &opts).unwrap();
    let (ob, _) = ring_pass_q_prefill(&plan, &mut b, &inputs, &cfg, &opts).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(a, b);
    let tags: Vec<TokenTag> = oa
        .iter()
        .flat_map(|p| p.output.tags().iter().flatten().copied())
        .collect();
    assert_eq!(tags.len(), 33);
}
