//! Ring attention over simulated context-parallel ranks.
//!
//! Three protocols are provided: pass-KV prefill (KV blocks circulate, each
//! rank merges its own query outputs), pass-Q prefill (query blocks
//! circulate, partial outputs return to their owners through an
//! all-to-all) and batched pass-Q decode. All of them mask purely by the
//! token tags carried inside each block, and merge partial outputs in
//! ascending KV-source rank order, which makes pass-KV and pass-Q
//! bit-identical on the same inputs.

mod comm;
mod decode;
mod prefill;
mod session;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{merge_attention, PartialAttention};

pub use decode::{decode_inputs, ring_pass_q_decode};
pub use prefill::{ring_pass_kv_prefill, ring_pass_q_prefill, shard_inputs, RankInputs};
pub use session::{
    PlanRecord, Session, Strategy, TokenOutput, Transcript, Turn, TurnKind, TurnRecord,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RingTopology {
    pub n_ranks: usize,
}

impl RingTopology {
    pub fn new(n_ranks: usize) -> Result<Self> {
        if n_ranks == 0 {
            return Err(Error::Config("a ring needs at least one rank".into()));
        }
        Ok(Self { n_ranks })
    }

    pub fn next(&self, k: usize) -> usize {
        (k + 1) % self.n_ranks
    }

    pub fn prev(&self, k: usize) -> usize {
        (k + self.n_ranks - 1) % self.n_ranks
    }

    /// Original owner of the block rank `k` holds at ring step `j`.
    pub fn source_at(&self, k: usize, j: usize) -> usize {
        (k + self.n_ranks - j % self.n_ranks) % self.n_ranks
    }

    pub fn ring_steps(&self) -> usize {
        self.n_ranks - 1
    }
}

/// How rank workers are scheduled. Results are identical either way.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Executor {
    /// Single thread, lock-step rounds.
    #[default]
    RoundBased,
    /// One OS thread per rank, blocking channels.
    Threaded,
}

/// Deliberate corruption used as a negative control for verification.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Pairs each partial output with the log-sum-exp of the next source.
    MisorderedMerge,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EngineOptions {
    pub executor: Executor,
    pub fault: Option<Fault>,
}

impl EngineOptions {
    pub fn new(executor: Executor) -> Self {
        Self {
            executor,
            fault: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MessageKind {
    #[serde(rename = "KV")]
    Kv,
    #[serde(rename = "Q")]
    Q,
    #[serde(rename = "A2A")]
    A2a,
}

impl MessageKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MessageKind::Kv => "KV",
            MessageKind::Q => "Q",
            MessageKind::A2a => "A2A",
        }
    }
}

/// One ring step (or the closing all-to-all) as seen by every rank.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kind: MessageKind,
    /// Bytes each rank sent during the step.
    pub bytes: Vec<u64>,
    /// Token rows each rank sent during the step.
    pub tokens: Vec<usize>,
    /// Admitted `(query, key)` token pairs each rank computed.
    pub pairs: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub n_ranks: usize,
    pub steps: Vec<StepRecord>,
    /// Point-to-point ring sends issued by each rank.
    pub ring_sends: usize,
    /// All-to-all collectives issued.
    pub all_to_alls: usize,
}

impl StepTrace {
    pub fn ring_bytes_per_rank(&self) -> u64 {
        self.steps
            .iter()
            .filter(|s| s.kind != MessageKind::A2a)
            .map(|s| s.bytes[0])
            .sum()
    }

    pub fn a2a_bytes_per_rank(&self) -> u64 {
        self.steps
            .iter()
            .filter(|s| s.kind == MessageKind::A2a)
            .map(|s| s.bytes[0])
            .sum()
    }

    pub fn total_pairs(&self) -> u64 {
        self.steps.iter().flat_map(|s| &s.pairs).sum()
    }

    /// Writes `step,rank,kind,bytes,pairs` rows.
    pub fn write_csv<W: Write>(&self, writer: &mut csv::Writer<W>) -> Result<()> {
        for s in &self.steps {
            for rank in 0..self.n_ranks {
                writer.write_record([
                    s.step.to_string(),
                    rank.to_string(),
                    s.kind.as_str().to_string(),
                    s.bytes[rank].to_string(),
                    s.pairs[rank].to_string(),
                ])?;
            }
        }
        Ok(())
    }

    pub const CSV_HEADER: [&'static str; 5] = ["step", "rank", "kind", "bytes", "pairs"];

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        self.write_csv(&mut w)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

/// Merges one rank's partials, which must already be sorted by source rank.
pub(crate) fn merge_partials(
    mut parts: Vec<PartialAttention>,
    fault: Option<Fault>,
) -> Result<PartialAttention> {
    if fault == Some(Fault::MisorderedMerge) && parts.len() > 1 {
        let mut lses: Vec<Vec<f64>> = parts
            .iter_mut()
            .map(|p| std::mem::take(&mut p.lse))
            .collect();
        lses.rotate_left(1);
        for (p, l) in parts.iter_mut().zip(lses) {
            p.lse = l;
        }
    }
    merge_attention(&parts)
}
