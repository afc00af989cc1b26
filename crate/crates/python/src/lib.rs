//! Python bindings over `ctxpar-core`.

use std::collections::BTreeMap;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ctxpar_core::embed::TokenSource;
use ctxpar_core::harness::{self, Scenario};
use ctxpar_core::oracle::DenseOracle;
use ctxpar_core::perf::{self, CommKind, PrefillShape, Protocol};
use ctxpar_core::ring::{self, EngineOptions, Executor, Strategy, Turn, TurnKind};
use ctxpar_core::sharding::{plan_full_prefill, SequenceSpec};
use ctxpar_core::Error;

fn py_err(e: Error) -> PyErr {
    if e.is_config() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn protocol(name: &str) -> PyResult<Protocol> {
    match name.replace('_', "-").as_str() {
        "pass-kv" => Ok(Protocol::PassKv),
        "pass-q" => Ok(Protocol::PassQ),
        _ => Err(PyValueError::new_err(format!("unknown protocol '{name}'"))),
    }
}

fn executor(name: &str) -> PyResult<Executor> {
    match name.replace('_', "-").as_str() {
        "round-based" => Ok(Executor::RoundBased),
        "threaded" => Ok(Executor::Threaded),
        _ => Err(PyValueError::new_err(format!("unknown executor '{name}'"))),
    }
}

#[pyclass(name = "GqaConfig", frozen)]
#[derive(Clone, Copy)]
struct PyGqaConfig {
    inner: ctxpar_core::GqaConfig,
}

#[pymethods]
impl PyGqaConfig {
    #[new]
    fn new(n_query_heads: usize, n_kv_heads: usize, head_dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: ctxpar_core::GqaConfig::new(n_query_heads, n_kv_heads, head_dim)
                .map_err(py_err)?,
        })
    }

    #[getter]
    fn n_query_heads(&self) -> usize {
        self.inner.n_query_heads
    }

    #[getter]
    fn n_kv_heads(&self) -> usize {
        self.inner.n_kv_heads
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn scale(&self) -> f64 {
        self.inner.scale
    }

    fn __repr__(&self) -> String {
        format!(
            "GqaConfig(n_query_heads={}, n_kv_heads={}, head_dim={})",
            self.inner.n_query_heads, self.inner.n_kv_heads, self.inner.head_dim
        )
    }
}

#[pyclass(name = "CostModel", frozen)]
struct PyCostModel {
    inner: perf::CostModel,
}

impl PyCostModel {
    fn shape(new_len: f64, cached_len: f64) -> PyResult<PrefillShape> {
        PrefillShape::new(new_len, cached_len).map_err(py_err)
    }
}

#[pymethods]
impl PyCostModel {
    /// `profile` is `"<model>+<hardware>"`; `CTXPAR_*` environment
    /// variables override individual constants.
    #[new]
    #[pyo3(signature = (profile = "llama3-405b+gtt-h100", n_nodes = 1))]
    fn new(profile: &str, n_nodes: u64) -> PyResult<Self> {
        Ok(Self {
            inner: perf::CostModel::from_profile_spec(profile, n_nodes).map_err(py_err)?,
        })
    }

    #[getter]
    fn n_nodes(&self) -> u64 {
        self.inner.n_nodes
    }

    fn with_nodes(&self, n_nodes: u64) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.with_nodes(n_nodes).map_err(py_err)?,
        })
    }

    fn size_threshold(&self) -> f64 {
        perf::size_threshold(&self.inner)
    }

    fn pass_kv_overlap_min_t(&self) -> f64 {
        perf::pass_kv_overlap_min_t(&self.inner)
    }

    fn pass_q_overlap_min_ctx(&self) -> f64 {
        perf::pass_q_overlap_min_ctx(&self.inner)
    }

    /// `kind` is `"q"` or `"kv"`.
    fn comm_bytes(&self, new_len: f64, cached_len: f64, kind: &str) -> PyResult<f64> {
        let kind = match kind.to_ascii_lowercase().as_str() {
            "q" => CommKind::Q,
            "kv" => CommKind::Kv,
            _ => return Err(PyValueError::new_err("kind must be 'q' or 'kv'")),
        };
        Ok(perf::comm_bytes(
            &Self::shape(new_len, cached_len)?,
            &self.inner,
            kind,
        ))
    }

    fn attention_flops(&self, new_len: f64, cached_len: f64) -> PyResult<f64> {
        Ok(perf::attention_flops(
            &Self::shape(new_len, cached_len)?,
            &self.inner,
        ))
    }

    #[pyo3(signature = (new_len, cached_len, refined = false))]
    fn choose_strategy(
        &self,
        new_len: f64,
        cached_len: f64,
        refined: bool,
    ) -> PyResult<&'static str> {
        Ok(
            perf::choose_strategy(&Self::shape(new_len, cached_len)?, &self.inner, refined)
                .as_str(),
        )
    }

    fn predict_step_times(
        &self,
        new_len: f64,
        cached_len: f64,
    ) -> PyResult<BTreeMap<&'static str, f64>> {
        let t = perf::predict_step_times(&Self::shape(new_len, cached_len)?, &self.inner);
        let n = self.inner.n();
        Ok(BTreeMap::from([
            ("attn_s", t.attn_s),
            ("kv_sendrecv_s", t.kv_sendrecv_s),
            ("q_sendrecv_s", t.q_sendrecv_s),
            ("a2a_s", t.a2a_s),
            ("kv_exposed_s", t.kv_exposed_s(n)),
            ("q_exposed_s", t.q_exposed_s(n)),
        ]))
    }

    fn predict_prefill_latency(
        &self,
        new_len: f64,
        cached_len: f64,
        protocol_name: &str,
    ) -> PyResult<f64> {
        Ok(perf::predict_prefill_latency(
            &Self::shape(new_len, cached_len)?,
            &self.inner,
            protocol(protocol_name)?,
        )
        .total_s)
    }

    fn scaling_ratio(&self, tokens: f64) -> PyResult<f64> {
        perf::scaling_ratio(tokens, &self.inner).map_err(py_err)
    }

    fn tp_vs_cp_comm(&self, tokens: f64, n_tp: u64) -> BTreeMap<&'static str, f64> {
        let c = perf::tp_vs_cp_comm(&self.inner, tokens, n_tp);
        BTreeMap::from([
            ("tp_bytes_per_block", c.tp_bytes_per_block),
            ("cp_bytes_per_block", c.cp_bytes_per_block),
            ("tp_params_per_rank", c.tp_param_bytes_per_rank),
            ("cp_params_per_rank", c.cp_param_bytes_per_rank),
        ])
    }

    fn mfu(
        &self,
        tokens: f64,
        n_gpus: u64,
        latency_s: f64,
    ) -> PyResult<BTreeMap<&'static str, f64>> {
        let m = perf::mfu(tokens, n_gpus, latency_s, &self.inner).map_err(py_err)?;
        Ok(BTreeMap::from([
            ("total_flops", m.total_flops),
            ("achieved_per_gpu", m.achieved_per_gpu),
            ("utilization", m.utilization),
        ]))
    }
}

/// Query positions held by each rank for a full prefill, padding as `None`.
#[pyfunction]
fn shard_positions(lengths: Vec<usize>, n_ranks: usize) -> PyResult<Vec<Vec<Option<(u32, u64)>>>> {
    let specs: Vec<SequenceSpec> = lengths
        .iter()
        .enumerate()
        .map(|(i, &t)| SequenceSpec::new(i as u32, 0, t))
        .collect();
    let plan = plan_full_prefill(&specs, n_ranks).map_err(py_err)?;
    Ok((0..n_ranks)
        .map(|r| {
            plan.rank_slots(r)
                .into_iter()
                .map(|s| s.map(|t| (t.seq, t.position)))
                .collect()
        })
        .collect())
}

/// One merged token output: `(seq, position, output, lse)`.
type PyTokenOutput = (u32, u64, Vec<f64>, Vec<f64>);

#[pyclass(name = "TurnRecord", frozen, get_all)]
struct PyTurnRecord {
    call: usize,
    kind: String,
    protocol: String,
    ring_bytes_per_rank: u64,
    a2a_bytes_per_rank: u64,
    outputs: Vec<PyTokenOutput>,
}

#[pyclass(name = "Session")]
struct PySession {
    inner: ring::Session,
}

#[pymethods]
impl PySession {
    #[new]
    #[pyo3(signature = (cfg, n_ranks, seed = 0, executor_name = "round-based"))]
    fn new(cfg: PyGqaConfig, n_ranks: usize, seed: u64, executor_name: &str) -> PyResult<Self> {
        let opts = EngineOptions::new(executor(executor_name)?);
        Ok(Self {
            inner: ring::Session::new(cfg.inner, n_ranks, seed, opts).map_err(py_err)?,
        })
    }

    /// Runs one turn. `kind` is `full_prefill`, `partial_prefill` or
    /// `decode`; returns one record per ring call.
    #[pyo3(signature = (kind, lengths = None, seqs = None, steps = 1, strategy = "adaptive"))]
    fn run_turn(
        &mut self,
        kind: &str,
        lengths: Option<Vec<usize>>,
        seqs: Option<Vec<u32>>,
        steps: usize,
        strategy: &str,
    ) -> PyResult<Vec<PyTurnRecord>> {
        let need =
            |l: Option<Vec<usize>>| l.ok_or_else(|| PyValueError::new_err("lengths required"));
        let turn = match kind {
            "full_prefill" => Turn::FullPrefill {
                lengths: need(lengths)?,
            },
            "partial_prefill" => Turn::PartialPrefill {
                seqs,
                lengths: need(lengths)?,
            },
            "decode" => Turn::Decode { seqs, steps },
            _ => return Err(PyValueError::new_err(format!("unknown turn kind '{kind}'"))),
        };
        let strategy: Strategy = strategy.parse().map_err(py_err)?;
        let records = self.inner.run_turn(&turn, strategy).map_err(py_err)?;
        Ok(records
            .into_iter()
            .map(|r| PyTurnRecord {
                call: r.call,
                kind: match r.kind {
                    TurnKind::FullPrefill => "full_prefill",
                    TurnKind::PartialPrefill => "partial_prefill",
                    TurnKind::Decode => "decode",
                }
                .to_string(),
                protocol: r.protocol.as_str().to_string(),
                ring_bytes_per_rank: r.trace.ring_bytes_per_rank(),
                a2a_bytes_per_rank: r.trace.a2a_bytes_per_rank(),
                outputs: r
                    .outputs
                    .into_iter()
                    .map(|o| (o.seq, o.position, o.output, o.lse))
                    .collect(),
            })
            .collect())
    }

    /// Open sequences and their token counts.
    fn sequences(&self) -> BTreeMap<u32, u64> {
        self.inner.sequences().clone()
    }

    /// Tokens of `seq` cached on each rank.
    fn cached_lens(&self, seq: u32) -> Vec<usize> {
        self.inner
            .caches()
            .iter()
            .map(|c| c.cached_len(seq))
            .collect()
    }
}

/// Unsharded reference output of one token: `(output, lse)`.
#[pyfunction]
fn dense_attention(cfg: PyGqaConfig, seed: u64, seq: u32, position: u64) -> (Vec<f64>, Vec<f64>) {
    let mut oracle = DenseOracle::new(TokenSource::new(seed, cfg.inner));
    let e = oracle.expected(seq, position);
    (e.output, e.lse)
}

/// Runs a scenario file and checks it against the dense oracle; returns
/// `(passed, max_relative_error)`.
#[pyfunction]
fn verify_scenario(path: &str) -> PyResult<(bool, f64)> {
    let sc = Scenario::load(path).map_err(py_err)?;
    let report = harness::cmd_verify(&sc, None).map_err(py_err)?;
    Ok((report.pass(), report.max_error()))
}

/// Runs a scenario file and returns its transcript as JSON.
#[pyfunction]
fn run_scenario(path: &str) -> PyResult<String> {
    let sc = Scenario::load(path).map_err(py_err)?;
    harness::run_scenario(&sc, None)
        .and_then(|t| t.to_json())
        .map_err(py_err)
}

#[pymodule]
fn ctxpar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGqaConfig>()?;
    m.add_class::<PyCostModel>()?;
    m.add_class::<PySession>()?;
    m.add_class::<PyTurnRecord>()?;
    m.add_function(wrap_pyfunction!(shard_positions, m)?)?;
    m.add_function(wrap_pyfunction!(dense_attention, m)?)?;
    m.add_function(wrap_pyfunction!(verify_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add("VERIFY_TOLERANCE", harness::VERIFY_TOLERANCE)?;
    Ok(())
}
