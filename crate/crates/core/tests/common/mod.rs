//! Test-only reference: brute-force causal GQA straight from the token
//! generator, written without any of the library's attention code.
#![allow(dead_code)]

use std::collections::HashMap;

use ctxpar_core::embed::TokenSource;
use ctxpar_core::ring::{PlanRecord, TokenOutput, TurnRecord};
use ctxpar_core::{SeqId, TokenTag};

pub struct Reference {
    src: TokenSource,
    kv: HashMap<SeqId, Vec<(Vec<f32>, Vec<f32>)>>,
}

impl Reference {
    pub fn new(src: TokenSource) -> Self {
        Self {
            src,
            kv: HashMap::new(),
        }
    }

    fn history(&mut self, seq: SeqId, upto: u64) -> &[(Vec<f32>, Vec<f32>)] {
        let src = self.src;
        let rows = self.kv.entry(seq).or_default();
        while rows.len() as u64 <= upto {
            let e = src.token(TokenTag {
                seq,
                position: rows.len() as u64,
            });
            rows.push((e.k, e.v));
        }
        &rows[..=upto as usize]
    }

    /// Output rows `[head][dim]` and per-head log-sum-exp of one token
    /// attending to positions `0..=pos` of its own sequence.
    pub fn attend(&mut self, seq: SeqId, pos: u64) -> (Vec<f64>, Vec<f64>) {
        let cfg = *self.src.cfg();
        let (nh, nkv, hd) = (cfg.n_query_heads, cfg.n_kv_heads, cfg.head_dim);
        let q = self.src.token(TokenTag { seq, position: pos }).q;
        self.history(seq, pos);
        let hist = &self.kv[&seq][..=pos as usize];
        let per_group = nh / nkv;
        let mut out = Vec::with_capacity(nh * hd);
        let mut lses = Vec::with_capacity(nh);
        for h in 0..nh {
            let g = h / per_group;
            let scores: Vec<f64> = hist
                .iter()
                .map(|(k, _)| {
                    let mut s = 0.0f64;
                    for d in 0..hd {
                        s += q[h * hd + d] as f64 * k[g * hd + d] as f64;
                    }
                    s / (hd as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::MIN, f64::max);
            let lse = m + scores.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            for d in 0..hd {
                let mut acc = 0.0;
                for (s, (_, v)) in scores.iter().zip(hist) {
                    acc += (s - lse).exp() * v[g * hd + d] as f64;
                }
                out.push(acc);
            }
            lses.push(lse);
        }
        (out, lses)
    }

    pub fn error_of(&mut self, o: &TokenOutput) -> f64 {
        let hd = self.src.cfg().head_dim;
        let (expected, _) = self.attend(o.seq, o.position);
        rel_err(&o.output, &expected, hd)
    }

    /// Largest error over a ring call; infinity if tokens are missing.
    pub fn record_error(&mut self, r: &TurnRecord) -> f64 {
        let expected_tokens = match &r.plan {
            PlanRecord::Prefill(p) => p.total_new(),
            PlanRecord::Decode(p) => p.batch_len(),
        };
        if r.outputs.len() != expected_tokens {
            return f64::INFINITY;
        }
        r.outputs
            .iter()
            .map(|o| self.error_of(o))
            .fold(0.0, f64::max)
    }
}

/// Max over heads of `max_d |a-b| / max_d |b|`.
pub fn rel_err(a: &[f64], b: &[f64], hd: usize) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (ra, rb) in a.chunks(hd).zip(b.chunks(hd)) {
        let diff = ra
            .iter()
            .zip(rb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = rb.iter().map(|y| y.abs()).fold(0.0, f64::max);
        let e = if diff == 0.0 { 0.0 } else { diff / scale };
        worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
    }
    worst
}
