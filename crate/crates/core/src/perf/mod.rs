//! Roofline model of context-parallel attention.
//!
//! All quantities are per transformer layer unless a name says otherwise.
//! Units are SI (bytes, seconds, FLOP). Rates refer to one CP rank,
//! which is a whole host.

mod profiles;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use profiles::{process_env, split_profile_spec, HardwareProfile, ModelProfile, ENV_PREFIX};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    PassKv,
    PassQ,
}

impl Protocol {
    pub fn as_str(&self) -> &'static str {
        match self {
            Protocol::PassKv => "pass-kv",
            Protocol::PassQ => "pass-q",
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CommKind {
    Q,
    Kv,
}

/// New and cached token counts of one prefill, summed over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillShape {
    pub new_len: f64,
    pub cached_len: f64,
}

impl PrefillShape {
    pub fn new(new_len: f64, cached_len: f64) -> Result<Self> {
        if !(new_len >= 0.0 && cached_len >= 0.0 && new_len + cached_len >= 1.0) {
            return Err(Error::Config(format!(
                "prefill shape T={new_len}, P={cached_len} needs T, P >= 0 and T + P >= 1"
            )));
        }
        Ok(Self {
            new_len,
            cached_len,
        })
    }

    /// Shape with `T + P = context` and `T / (T + P) = miss_rate`, with `T`
    /// rounded to whole tokens.
    pub fn from_miss_rate(context: u64, miss_rate: f64) -> Result<Self> {
        if !(miss_rate > 0.0 && miss_rate <= 1.0) {
            return Err(Error::Config(format!(
                "miss rate {miss_rate} outside (0, 1]"
            )));
        }
        let t = (context as f64 * miss_rate).round();
        Self::new(t, context as f64 - t)
    }

    pub fn context(&self) -> f64 {
        self.new_len + self.cached_len
    }

    pub fn miss_rate(&self) -> f64 {
        self.new_len / self.context()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub model: ModelProfile,
    pub hardware: HardwareProfile,
    /// CP ranks (hosts) in the ring.
    pub n_nodes: u64,
}

impl CostModel {
    pub fn new(model: ModelProfile, hardware: HardwareProfile, n_nodes: u64) -> Result<Self> {
        let m = Self {
            model,
            hardware,
            n_nodes,
        };
        m.validate()?;
        Ok(m)
    }

    /// Loads `model+hardware` profiles and applies `CTXPAR_*` overrides from
    /// the process environment.
    pub fn from_profile_spec(spec: &str, n_nodes: u64) -> Result<Self> {
        Self::from_profile_spec_with_env(spec, n_nodes, &process_env)
    }

    pub fn from_profile_spec_with_env(
        spec: &str,
        n_nodes: u64,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let (m, h) = split_profile_spec(spec)?;
        let mut model = ModelProfile::load(m)?;
        let mut hardware = HardwareProfile::load(h)?;
        model.apply_overrides(env)?;
        hardware.apply_overrides(env)?;
        Self::new(model, hardware, n_nodes)
    }

    pub fn with_nodes(&self, n_nodes: u64) -> Result<Self> {
        Self::new(self.model.clone(), self.hardware.clone(), n_nodes)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let h = &self.hardware;
        let positive = [
            ("n_query_heads", m.n_query_heads as f64),
            ("n_kv_heads", m.n_kv_heads as f64),
            ("model_dim", m.model_dim as f64),
            ("n_layers", m.n_layers as f64),
            ("param_count", m.param_count),
            ("elem_size", m.elem_size),
            ("peak_compute", h.peak_compute),
            ("bandwidth", h.bandwidth),
            ("achieved_compute", h.achieved_compute.unwrap_or(1.0)),
            ("achieved_bandwidth", h.achieved_bandwidth.unwrap_or(1.0)),
            ("gpus_per_node", h.gpus_per_node as f64),
            ("a2a_per_byte_s", h.a2a_per_byte_s),
            ("n_nodes", self.n_nodes as f64),
        ];
        for (key, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{key} must be positive, got {v}")));
            }
        }
        for (key, v) in [
            ("sendrecv_latency_s", h.sendrecv_latency_s),
            ("a2a_base_s", h.a2a_base_s),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{key} must be non-negative, got {v}"
                )));
            }
        }
        if m.model_dim % m.n_query_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not a multiple of {} query heads",
                m.model_dim, m.n_query_heads
            )));
        }
        Ok(())
    }

    pub fn n(&self) -> f64 {
        self.n_nodes as f64
    }

    pub fn model_dim(&self) -> f64 {
        self.model.model_dim as f64
    }

    pub fn head_dim(&self) -> f64 {
        (self.model.model_dim / self.model.n_query_heads) as f64
    }

    /// `N_KV / N_H`.
    pub fn kv_ratio(&self) -> f64 {
        self.model.n_kv_heads as f64 / self.model.n_query_heads as f64
    }

    /// FLOP/s used for predictions.
    pub fn compute(&self) -> f64 {
        self.hardware
            .achieved_compute
            .unwrap_or(self.hardware.peak_compute)
    }

    /// Link bytes/s used for predictions.
    pub fn bandwidth(&self) -> f64 {
        self.hardware
            .achieved_bandwidth
            .unwrap_or(self.hardware.bandwidth)
    }

    pub fn peak_per_gpu(&self) -> f64 {
        self.hardware.peak_compute / self.hardware.gpus_per_node as f64
    }
}

/// Bytes of the whole Q, or of the whole K and V, for one layer.
pub fn comm_bytes(shape: &PrefillShape, m: &CostModel, kind: CommKind) -> f64 {
    let d = m.model_dim();
    let e = m.model.elem_size;
    match kind {
        CommKind::Q => shape.new_len * d * e,
        CommKind::Kv => 2.0 * shape.context() * d * m.kv_ratio() * e,
    }
}

/// `4 T D (T + P)`, counting every query-key product (no causal discount).
pub fn attention_flops(shape: &PrefillShape, m: &CostModel) -> f64 {
    4.0 * shape.new_len * m.model_dim() * shape.context()
}

/// Causal variant, half of [`attention_flops`].
pub fn causal_attention_flops(shape: &PrefillShape, m: &CostModel) -> f64 {
    2.0 * shape.new_len * m.model_dim() * shape.context()
}

/// Largest miss rate at which Q messages are no larger than KV messages:
/// `2 N_KV / N_H`.
pub fn size_threshold(m: &CostModel) -> f64 {
    2.0 * m.model.n_kv_heads as f64 / m.model.n_query_heads as f64
}

/// New-token count above which pass-KV ring traffic hides under attention:
/// `N C N_KV e / (2 N_H BW)`. Independent of `P`.
pub fn pass_kv_overlap_min_t(m: &CostModel) -> f64 {
    m.n() * m.compute() * m.kv_ratio() * m.model.elem_size / (2.0 * m.bandwidth())
}

/// Context length above which pass-Q ring traffic hides under attention:
/// `N e C / (4 BW)`. Independent of head counts.
pub fn pass_q_overlap_min_ctx(m: &CostModel) -> f64 {
    m.n() * m.model.elem_size * m.compute() / (4.0 * m.bandwidth())
}

/// Point-to-point transfer time of one message.
pub fn sendrecv_time(bytes: f64, m: &CostModel) -> f64 {
    m.hardware.sendrecv_latency_s + bytes / m.bandwidth()
}

/// All-to-all time for `bytes` sent per rank.
pub fn a2a_time(bytes: f64, m: &CostModel) -> f64 {
    m.hardware.a2a_base_s + bytes * m.hardware.a2a_per_byte_s
}

/// Per-ring-step times for one layer, for both protocols.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTimes {
    /// One partial attention: `T/N` queries against `(T+P)/N` keys.
    pub attn_s: f64,
    pub kv_sendrecv_s: f64,
    pub q_sendrecv_s: f64,
    /// The closing all-to-all of pass-Q.
    pub a2a_s: f64,
    pub kv_msg_bytes: f64,
    pub q_msg_bytes: f64,
    pub a2a_bytes: f64,
}

impl StepTimes {
    fn ring_steps(n: f64) -> f64 {
        n - 1.0
    }

    /// Communication of the pass-KV ring loop not hidden by attention.
    pub fn kv_exposed_s(&self, n: f64) -> f64 {
        Self::ring_steps(n) * (self.kv_sendrecv_s - self.attn_s).max(0.0)
    }

    /// Exposed pass-Q ring communication plus the all-to-all.
    pub fn q_exposed_s(&self, n: f64) -> f64 {
        Self::ring_steps(n) * (self.q_sendrecv_s - self.attn_s).max(0.0) + self.a2a_s
    }
}

pub fn predict_step_times(shape: &PrefillShape, m: &CostModel) -> StepTimes {
    let n = m.n();
    let attn_s = attention_flops(shape, m) / (n * n) / m.compute();
    if m.n_nodes == 1 {
        return StepTimes {
            attn_s,
            kv_sendrecv_s: 0.0,
            q_sendrecv_s: 0.0,
            a2a_s: 0.0,
            kv_msg_bytes: 0.0,
            q_msg_bytes: 0.0,
            a2a_bytes: 0.0,
        };
    }
    let kv_msg_bytes = comm_bytes(shape, m, CommKind::Kv) / n;
    let q_msg_bytes = comm_bytes(shape, m, CommKind::Q) / n;
    let a2a_bytes = (n - 1.0) * q_msg_bytes;
    StepTimes {
        attn_s,
        kv_sendrecv_s: sendrecv_time(kv_msg_bytes, m),
        q_sendrecv_s: sendrecv_time(q_msg_bytes, m),
        a2a_s: a2a_time(a2a_bytes, m),
        kv_msg_bytes,
        q_msg_bytes,
        a2a_bytes,
    }
}

/// Picks the ring protocol for a prefill.
///
/// Base mode is the closed-form threshold rule: pass-KV when `T` clears the pass-KV
/// overlap threshold or the miss rate reaches `2 N_KV / N_H`, pass-Q
/// otherwise. Refined mode compares predicted exposed communication: the
/// pass-KV ring loop against the pass-Q ring loop plus its all-to-all. Ties
/// go to pass-KV in both modes.
pub fn choose_strategy(shape: &PrefillShape, m: &CostModel, refined: bool) -> Protocol {
    if refined {
        let t = predict_step_times(shape, m);
        if t.kv_exposed_s(m.n()) <= t.q_exposed_s(m.n()) {
            Protocol::PassKv
        } else {
            Protocol::PassQ
        }
    } else if shape.new_len >= pass_kv_overlap_min_t(m) || shape.miss_rate() >= size_threshold(m) {
        Protocol::PassKv
    } else {
        Protocol::PassQ
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefillLatency {
    /// Attention across all layers, ring communication included.
    pub attention_s: f64,
    /// Linear layers: `2 W T / N` FLOP per rank.
    pub linear_s: f64,
    pub total_s: f64,
}

/// Modeled time to first token of a CP prefill using `protocol`.
///
/// Each layer runs `N` partial attentions back to back; whatever ring
/// traffic does not fit under them (and, for pass-Q, the all-to-all) is
/// added on top.
pub fn predict_prefill_latency(
    shape: &PrefillShape,
    m: &CostModel,
    protocol: Protocol,
) -> PrefillLatency {
    let n = m.n();
    let t = predict_step_times(shape, m);
    let exposed = match protocol {
        Protocol::PassKv => t.kv_exposed_s(n),
        Protocol::PassQ => t.q_exposed_s(n),
    };
    let per_layer = n * t.attn_s + exposed;
    let attention_s = m.model.n_layers as f64 * per_layer;
    let linear_s = 2.0 * m.model.param_count * shape.new_len / (n * m.compute());
    PrefillLatency {
        attention_s,
        linear_s,
        total_s: attention_s + linear_s,
    }
}

/// `tau_1 / tau_N` for a full prefill of `tokens` with pass-KV.
pub fn scaling_ratio(tokens: f64, m: &CostModel) -> Result<f64> {
    let shape = PrefillShape::new(tokens, 0.0)?;
    let one = predict_prefill_latency(&shape, &m.with_nodes(1)?, Protocol::PassKv).total_s;
    let many = predict_prefill_latency(&shape, m, Protocol::PassKv).total_s;
    Ok(one / many)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpCpComm {
    /// Two all-reduces of `T N_H D_H` elements per transformer block.
    pub tp_bytes_per_block: f64,
    /// One pass of `T N_KV D_H` elements per transformer block.
    pub cp_bytes_per_block: f64,
    pub tp_param_bytes_per_rank: f64,
    pub cp_param_bytes_per_rank: f64,
}

/// Per-block communication and parameter residency of tensor parallelism
/// over `n_tp` ranks versus context parallelism, for a full prefill.
/// Parameter residency is reported in parameters.
pub fn tp_vs_cp_comm(m: &CostModel, tokens: f64, n_tp: u64) -> TpCpComm {
    let e = m.model.elem_size;
    let dh = m.head_dim();
    TpCpComm {
        tp_bytes_per_block: 2.0 * tokens * m.model.n_query_heads as f64 * dh * e,
        cp_bytes_per_block: tokens * m.model.n_kv_heads as f64 * dh * e,
        tp_param_bytes_per_rank: m.model.param_count / n_tp.max(1) as f64,
        cp_param_bytes_per_rank: m.model.param_count,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mfu {
    pub total_flops: f64,
    pub achieved_per_gpu: f64,
    pub utilization: f64,
}

/// Model FLOPs utilisation of a full causal prefill of `tokens` that took
/// `latency_s` on `n_gpus` GPUs: `2 W T` linear FLOPs plus `2 T^2 D` causal
/// attention FLOPs per layer.
pub fn mfu(tokens: f64, n_gpus: u64, latency_s: f64, m: &CostModel) -> Result<Mfu> {
    if !(latency_s > 0.0) || n_gpus == 0 {
        return Err(Error::Config(
            "latency must be positive and at least one GPU given".into(),
        ));
    }
    let linear = 2.0 * m.model.param_count * tokens;
    let attention = m.model.n_layers as f64 * 2.0 * tokens * tokens * m.model_dim();
    let total_flops = linear + attention;
    let achieved_per_gpu = total_flops / (latency_s * n_gpus as f64);
    Ok(Mfu {
        total_flops,
        achieved_per_gpu,
        utilization: achieved_per_gpu / m.peak_per_gpu(),
    })
}
