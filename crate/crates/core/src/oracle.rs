//! Single-rank reference: replays a conversation unsharded with plain
//! nested loops and compares ring outputs against it.

use std::collections::HashMap;

use crate::embed::TokenSource;
use crate::ring::{PlanRecord, TokenOutput, Transcript, TurnRecord};
use crate::tensor::{SeqId, TokenTag};

/// Dense causal GQA over a sequence's full history, with keys and values
/// generated once per sequence and kept in f64.
pub struct DenseOracle {
    source: TokenSource,
    history: HashMap<SeqId, (Vec<f64>, Vec<f64>)>,
}

impl DenseOracle {
    pub fn new(source: TokenSource) -> Self {
        Self {
            source,
            history: HashMap::new(),
        }
    }

    fn ensure(&mut self, seq: SeqId, upto: u64) {
        let row = self.source.cfg().n_kv_heads * self.source.cfg().head_dim;
        let (ks, vs) = self.history.entry(seq).or_default();
        let mut have = (ks.len() / row) as u64;
        while have <= upto {
            let e = self.source.token(TokenTag {
                seq,
                position: have,
            });
            ks.extend(e.k.iter().map(|&x| x as f64));
            vs.extend(e.v.iter().map(|&x| x as f64));
            have += 1;
        }
    }

    /// Output and log-sum-exp of the token at `position`, attending to
    /// positions `0..=position` of the same sequence.
    pub fn expected(&mut self, seq: SeqId, position: u64) -> TokenOutput {
        self.ensure(seq, position);
        let cfg = *self.source.cfg();
        let (hd, nh, nkv) = (cfg.head_dim, cfg.n_query_heads, cfg.n_kv_heads);
        let q: Vec<f64> = self
            .source
            .token(TokenTag { seq, position })
            .q
            .iter()
            .map(|&x| x as f64)
            .collect();
        let (ks, vs) = &self.history[&seq];
        let n_keys = position as usize + 1;
        let group = nh / nkv;
        let mut output = vec![0.0; nh * hd];
        let mut lse = vec![0.0; nh];
        let mut scores = vec![0.0; n_keys];
        for h in 0..nh {
            let g = h / group;
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let k = &ks[(j * nkv + g) * hd..(j * nkv + g + 1) * hd];
                *s = cfg.scale * qh.iter().zip(k).map(|(a, b)| a * b).sum::<f64>();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let out = &mut output[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter().enumerate() {
                let w = (s - max).exp();
                denom += w;
                let v = &vs[(j * nkv + g) * hd..(j * nkv + g + 1) * hd];
                for d in 0..hd {
                    out[d] += w * v[d];
                }
            }
            for x in out.iter_mut() {
                *x /= denom;
            }
            lse[h] = max + denom.ln();
        }
        TokenOutput {
            seq,
            position,
            output,
            lse,
        }
    }
}

/// Largest per-row relative error between two outputs: for each query head,
/// `max_d |a - b| / max_d |b|`.
pub fn row_relative_error(actual: &[f64], expected: &[f64], head_dim: usize) -> f64 {
    if actual.len() != expected.len() {
        return f64::INFINITY;
    }
    actual
        .chunks(head_dim)
        .zip(expected.chunks(head_dim))
        .map(|(a, b)| {
            let diff = a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
            if diff == 0.0 {
                0.0
            } else if scale == 0.0 || diff.is_nan() {
                f64::INFINITY
            } else {
                diff / scale
            }
        })
        .fold(0.0, f64::max)
}

fn expected_tokens(record: &TurnRecord) -> usize {
    match &record.plan {
        PlanRecord::Prefill(p) => p.total_new(),
        PlanRecord::Decode(p) => p.batch_len(),
    }
}

/// Largest relative error of one ring call. A call that produced the wrong
/// number of tokens scores infinity.
pub fn record_error(oracle: &mut DenseOracle, record: &TurnRecord, head_dim: usize) -> f64 {
    if record.outputs.len() != expected_tokens(record) {
        return f64::INFINITY;
    }
    record
        .outputs
        .iter()
        .map(|o| {
            let e = oracle.expected(o.seq, o.position);
            row_relative_error(&o.output, &e.output, head_dim)
        })
        .fold(0.0, f64::max)
}

/// Per-call maximum relative error of a whole transcript.
pub fn verify_transcript(transcript: &Transcript, source: TokenSource) -> Vec<f64> {
    let head_dim = source.cfg().head_dim;
    let mut oracle = DenseOracle::new(source);
    transcript
        .records
        .iter()
        .map(|r| record_error(&mut oracle, r, head_dim))
        .collect()
}
