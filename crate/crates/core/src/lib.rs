//! Context-parallel attention for long-context inference, simulated on a
//! ring of logical ranks.
//!
//! * [`tensor`]: token blocks, GQA attention with log-sum-exp, merging.
//! * [`sharding`]: load-balanced prefill plans and round-robin decode plans.
//! * [`kv_cache`]: per-rank persistent KV storage.
//! * [`ring`]: pass-KV and pass-Q prefill, pass-Q decode, multi-turn sessions.
//! * [`perf`]: analytical cost model and protocol selection.
//! * [`oracle`]: unsharded dense reference.
//! * [`harness`]: scenario files and the operations behind the CLI.

pub mod embed;
pub mod error;
pub mod harness;
pub mod kv_cache;
pub mod oracle;
pub mod perf;
pub mod ring;
pub mod sharding;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GqaConfig, PartialAttention, SeqId, TokenTag};
