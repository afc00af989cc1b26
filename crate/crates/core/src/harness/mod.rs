//! Operations behind the `ctxpar` command line. Everything here returns
//! data; printing and exit codes are left to the binary.

mod scenario;

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::oracle::verify_transcript;
use crate::perf::{
    choose_strategy, mfu, pass_kv_overlap_min_t, predict_prefill_latency, predict_step_times,
    scaling_ratio, tp_vs_cp_comm, CostModel, Mfu, PrefillShape, Protocol,
};
use crate::ring::{
    EngineOptions, Executor, Fault, PlanRecord, Session, Strategy, Transcript, Turn, TurnKind,
};
use crate::tensor::GqaConfig;

pub use scenario::{Overrides, Scenario};

/// Largest accepted relative error against the dense oracle.
pub const VERIFY_TOLERANCE: f64 = 1e-6;

/// Miss rates of the pass-KV / pass-Q comparison at 128K context.
pub const DEFAULT_MISS_RATES: [f64; 14] = [
    0.01, 0.025, 0.0325, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0,
];

fn csv_string(write: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    write(&mut w)?;
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn run_scenario(sc: &Scenario, fault: Option<Fault>) -> Result<Transcript> {
    let opts = EngineOptions {
        executor: sc.executor,
        fault,
    };
    sc.session(opts)?.run_turns(&sc.turns, sc.strategy)
}

pub const TRACE_CSV_HEADER: [&str; 6] = ["call", "step", "rank", "kind", "bytes", "pairs"];

/// Every ring step of every call, one row per rank.
pub fn transcript_trace_csv(t: &Transcript) -> Result<String> {
    csv_string(|w| {
        w.write_record(TRACE_CSV_HEADER)?;
        for r in &t.records {
            for s in &r.trace.steps {
                for rank in 0..r.trace.n_ranks {
                    w.write_record([
                        r.call.to_string(),
                        s.step.to_string(),
                        rank.to_string(),
                        s.kind.as_str().to_string(),
                        s.bytes[rank].to_string(),
                        s.pairs[rank].to_string(),
                    ])?;
                }
            }
        }
        Ok(())
    })
}

#[derive(Serialize)]
struct PlanDump<'a> {
    turn: usize,
    call: usize,
    kind: TurnKind,
    protocol: Protocol,
    plan: &'a PlanRecord,
}

/// Shard and decode plans of every call, as JSON.
pub fn dump_plans(t: &Transcript) -> Result<String> {
    let plans: Vec<PlanDump> = t
        .records
        .iter()
        .map(|r| PlanDump {
            turn: r.turn,
            call: r.call,
            kind: r.kind,
            protocol: r.protocol,
            plan: &r.plan,
        })
        .collect();
    Ok(serde_json::to_string_pretty(&plans)?)
}

pub const CACHE_CSV_HEADER: [&str; 3] = ["seq", "rank", "cached_len"];

/// Tokens each rank caches per sequence at the end of a session.
pub fn cache_csv(session: &Session) -> Result<String> {
    csv_string(|w| {
        w.write_record(CACHE_CSV_HEADER)?;
        for &seq in session.sequences().keys() {
            for (rank, c) in session.caches().iter().enumerate() {
                w.write_record([
                    seq.to_string(),
                    rank.to_string(),
                    c.cached_len(seq).to_string(),
                ])?;
            }
        }
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyRow {
    pub turn: usize,
    pub call: usize,
    pub kind: TurnKind,
    pub protocol: Protocol,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub tolerance: f64,
    pub rows: Vec<VerifyRow>,
}

impl VerifyReport {
    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }

    pub fn max_error(&self) -> f64 {
        self.rows
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub const CSV_HEADER: [&'static str; 6] =
        ["turn", "call", "kind", "protocol", "max_rel_error", "pass"];

    pub fn to_csv(&self) -> Result<String> {
        csv_string(|w| {
            w.write_record(Self::CSV_HEADER)?;
            for r in &self.rows {
                w.write_record([
                    r.turn.to_string(),
                    r.call.to_string(),
                    kind_str(r.kind).to_string(),
                    r.protocol.as_str().to_string(),
                    format!("{:e}", r.max_rel_error),
                    r.pass.to_string(),
                ])?;
            }
            Ok(())
        })
    }

    /// Per-turn summary for terminals.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let mut turn = usize::MAX;
        let mut worst = 0.0f64;
        let mut calls = 0;
        let mut label = String::new();
        let flush = |out: &mut String, turn: usize, label: &str, calls: usize, worst: f64| {
            if turn != usize::MAX {
                let verdict = if worst <= self.tolerance {
                    "PASS"
                } else {
                    "FAIL"
                };
                out.push_str(&format!(
                    "turn {turn:>3} {label:<28} calls {calls:>3}  max rel err {worst:.3e}  {verdict}\n"
                ));
            }
        };
        for r in &self.rows {
            if r.turn != turn {
                flush(&mut out, turn, &label, calls, worst);
                turn = r.turn;
                worst = 0.0;
                calls = 0;
                label = format!("{} ({})", kind_str(r.kind), r.protocol);
            }
            worst = worst.max(r.max_rel_error);
            calls += 1;
        }
        flush(&mut out, turn, &label, calls, worst);
        out.push_str(&format!(
            "{}: max rel err {:.3e} (tolerance {:e})\n",
            if self.pass() { "PASS" } else { "FAIL" },
            self.max_error(),
            self.tolerance
        ));
        out
    }
}

fn kind_str(k: TurnKind) -> &'static str {
    match k {
        TurnKind::FullPrefill => "full_prefill",
        TurnKind::PartialPrefill => "partial_prefill",
        TurnKind::Decode => "decode",
    }
}

/// Runs the scenario and checks every call against the dense oracle.
pub fn cmd_verify(sc: &Scenario, fault: Option<Fault>) -> Result<VerifyReport> {
    let transcript = run_scenario(sc, fault)?;
    let session = sc.session(EngineOptions::default())?;
    let errors = verify_transcript(&transcript, *session.source());
    let rows = transcript
        .records
        .iter()
        .zip(errors)
        .map(|(r, e)| VerifyRow {
            turn: r.turn,
            call: r.call,
            kind: r.kind,
            protocol: r.protocol,
            max_rel_error: e,
            pass: e <= VERIFY_TOLERANCE,
        })
        .collect();
    Ok(VerifyReport {
        tolerance: VERIFY_TOLERANCE,
        rows,
    })
}

/// Desk-scale execution settings for `sweep --execute`.
#[derive(Clone, Copy, Debug)]
pub struct ExecuteSpec {
    pub context: u64,
    pub attention: GqaConfig,
    pub seed: u64,
    pub executor: Executor,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExecMeasure {
    pub context: u64,
    pub new_len: u64,
    pub cached_len: u64,
    pub kv_ring_bytes: u64,
    pub q_ring_bytes: u64,
    pub q_a2a_bytes: u64,
    pub kv_max_pairs: u64,
    pub q_max_pairs: u64,
    pub bit_identical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub miss_rate: f64,
    pub new_len: u64,
    pub cached_len: u64,
    pub pass_kv_ms: f64,
    pub pass_q_ms: f64,
    pub attn_us: f64,
    pub kv_sendrecv_us: f64,
    pub q_sendrecv_us: f64,
    pub a2a_us: f64,
    pub kv_exposed_us: f64,
    pub q_exposed_us: f64,
    pub base_choice: Protocol,
    pub refined_choice: Protocol,
    pub exec: Option<ExecMeasure>,
}

pub const SWEEP_CSV_HEADER: [&str; 22] = [
    "miss_rate",
    "new_len",
    "cached_len",
    "pass_kv_ms",
    "pass_q_ms",
    "attn_us",
    "kv_sendrecv_us",
    "q_sendrecv_us",
    "a2a_us",
    "kv_exposed_us",
    "q_exposed_us",
    "base_choice",
    "refined_choice",
    "exec_context",
    "exec_new_len",
    "exec_cached_len",
    "exec_kv_ring_bytes",
    "exec_q_ring_bytes",
    "exec_q_a2a_bytes",
    "exec_kv_max_pairs",
    "exec_q_max_pairs",
    "exec_bit_identical",
];

fn execute_rate(rate: f64, spec: &ExecuteSpec, n_ranks: usize) -> Result<ExecMeasure> {
    let shape = PrefillShape::from_miss_rate(spec.context, rate)?;
    let t = (shape.new_len as usize).max(1);
    let p = spec.context as usize - t.min(spec.context as usize);
    let mut base = Session::new(
        spec.attention,
        n_ranks,
        spec.seed,
        EngineOptions::new(spec.executor),
    )?;
    let cached = if p > 0 {
        base.run_turn(&Turn::FullPrefill { lengths: vec![p] }, Strategy::PassKv)?;
        true
    } else {
        false
    };
    let turn = if cached {
        Turn::PartialPrefill {
            seqs: None,
            lengths: vec![t],
        }
    } else {
        Turn::FullPrefill { lengths: vec![t] }
    };
    let mut kv = base.clone();
    let mut q = base;
    let kv_rec = kv.run_turn(&turn, Strategy::PassKv)?.remove(0);
    let q_rec = q.run_turn(&turn, Strategy::PassQ)?.remove(0);
    let max_pairs = |r: &crate::ring::TurnRecord| {
        (0..r.trace.n_ranks)
            .map(|k| r.trace.steps.iter().map(|s| s.pairs[k]).sum::<u64>())
            .max()
            .unwrap_or(0)
    };
    Ok(ExecMeasure {
        context: spec.context,
        new_len: t as u64,
        cached_len: p as u64,
        kv_ring_bytes: kv_rec.trace.ring_bytes_per_rank(),
        q_ring_bytes: q_rec.trace.ring_bytes_per_rank(),
        q_a2a_bytes: q_rec.trace.a2a_bytes_per_rank(),
        kv_max_pairs: max_pairs(&kv_rec),
        q_max_pairs: max_pairs(&q_rec),
        bit_identical: kv_rec.outputs == q_rec.outputs,
    })
}

/// Predicted pass-KV and pass-Q TTFT and protocol choices across miss
/// rates at a fixed context; optionally runs both protocols at desk scale.
pub fn cmd_sweep_miss_rate(
    context: u64,
    rates: &[f64],
    model: &CostModel,
    execute: Option<&ExecuteSpec>,
) -> Result<Vec<SweepRow>> {
    rates
        .iter()
        .map(|&rate| {
            let shape = PrefillShape::from_miss_rate(context, rate)?;
            let t = predict_step_times(&shape, model);
            let n = model.n();
            let exec = execute
                .map(|spec| execute_rate(rate, spec, model.n_nodes as usize))
                .transpose()?;
            Ok(SweepRow {
                miss_rate: rate,
                new_len: shape.new_len as u64,
                cached_len: shape.cached_len as u64,
                pass_kv_ms: predict_prefill_latency(&shape, model, Protocol::PassKv).total_s * 1e3,
                pass_q_ms: predict_prefill_latency(&shape, model, Protocol::PassQ).total_s * 1e3,
                attn_us: t.attn_s * 1e6,
                kv_sendrecv_us: t.kv_sendrecv_s * 1e6,
                q_sendrecv_us: t.q_sendrecv_s * 1e6,
                a2a_us: t.a2a_s * 1e6,
                kv_exposed_us: t.kv_exposed_s(n) * 1e6,
                q_exposed_us: t.q_exposed_s(n) * 1e6,
                base_choice: choose_strategy(&shape, model, false),
                refined_choice: choose_strategy(&shape, model, true),
                exec,
            })
        })
        .collect()
}

fn num(x: f64) -> String {
    format!("{x:.6}")
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    csv_string(|w| {
        w.write_record(SWEEP_CSV_HEADER)?;
        for r in rows {
            let mut rec = vec![
                r.miss_rate.to_string(),
                r.new_len.to_string(),
                r.cached_len.to_string(),
                num(r.pass_kv_ms),
                num(r.pass_q_ms),
                num(r.attn_us),
                num(r.kv_sendrecv_us),
                num(r.q_sendrecv_us),
                num(r.a2a_us),
                num(r.kv_exposed_us),
                num(r.q_exposed_us),
                r.base_choice.to_string(),
                r.refined_choice.to_string(),
            ];
            match &r.exec {
                Some(e) => rec.extend([
                    e.context.to_string(),
                    e.new_len.to_string(),
                    e.cached_len.to_string(),
                    e.kv_ring_bytes.to_string(),
                    e.q_ring_bytes.to_string(),
                    e.q_a2a_bytes.to_string(),
                    e.kv_max_pairs.to_string(),
                    e.q_max_pairs.to_string(),
                    e.bit_identical.to_string(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), 9)),
            }
            w.write_record(&rec)?;
        }
        Ok(())
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScalingRow {
    pub tokens: u64,
    pub n_nodes: u64,
    pub latency_s: f64,
    pub scaling_ratio: f64,
    pub kv_overlap_min_t: f64,
    pub overlapped: bool,
    pub tp_bytes_per_block: f64,
    pub cp_bytes_per_block: f64,
}

pub const SCALING_CSV_HEADER: [&str; 8] = [
    "tokens",
    "n_nodes",
    "latency_s",
    "scaling_ratio",
    "kv_overlap_min_t",
    "overlapped",
    "tp_bytes_per_block",
    "cp_bytes_per_block",
];

/// Modeled full-prefill latency and `tau_1 / tau_N` per `(T, N)`. The TP
/// comparison assumes one TP group spans a node.
pub fn cmd_scaling(tokens: &[u64], nodes: &[u64], model: &CostModel) -> Result<Vec<ScalingRow>> {
    let mut rows = Vec::new();
    for &t in tokens {
        for &n in nodes {
            let m = model.with_nodes(n)?;
            let shape = PrefillShape::new(t as f64, 0.0)?;
            let comm = tp_vs_cp_comm(&m, t as f64, m.hardware.gpus_per_node);
            let threshold = pass_kv_overlap_min_t(&m);
            rows.push(ScalingRow {
                tokens: t,
                n_nodes: n,
                latency_s: predict_prefill_latency(&shape, &m, Protocol::PassKv).total_s,
                scaling_ratio: scaling_ratio(t as f64, &m)?,
                kv_overlap_min_t: threshold,
                overlapped: t as f64 >= threshold,
                tp_bytes_per_block: comm.tp_bytes_per_block,
                cp_bytes_per_block: comm.cp_bytes_per_block,
            });
        }
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> Result<String> {
    csv_string(|w| {
        w.write_record(SCALING_CSV_HEADER)?;
        for r in rows {
            w.write_record([
                r.tokens.to_string(),
                r.n_nodes.to_string(),
                num(r.latency_s),
                num(r.scaling_ratio),
                num(r.kv_overlap_min_t),
                r.overlapped.to_string(),
                r.tp_bytes_per_block.to_string(),
                r.cp_bytes_per_block.to_string(),
            ])?;
        }
        Ok(())
    })
}

pub fn cmd_mfu(tokens: f64, n_gpus: u64, latency_s: f64, model: &CostModel) -> Result<Mfu> {
    mfu(tokens, n_gpus, latency_s, model)
}

pub fn render_mfu(m: &Mfu) -> String {
    format!(
        "total FLOPs          {:.4e}\nachieved FLOP/s/GPU  {:.4e}\nutilization          {:.4}\n",
        m.total_flops, m.achieved_per_gpu, m.utilization
    )
}

/// Writes `text` to `path`, or to stdout when `path` is `None`.
pub fn emit(text: &str, path: Option<&std::path::Path>) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_columns_are_stable() {
        let m =
            CostModel::from_profile_spec_with_env("llama3-405b+gtt-h100", 4, &|_| None).unwrap();
        let rows = cmd_sweep_miss_rate(128_000, &[0.01, 1.0], &m, None).unwrap();
        let csv = sweep_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), SWEEP_CSV_HEADER.join(","));
        assert!(lines.all(|l| l.split(',').count() == SWEEP_CSV_HEADER.len()));
        assert_eq!(rows[1].cached_len, 0);
        assert_eq!(rows[1].base_choice, Protocol::PassKv);
    }

    #[test]
    fn executed_sweep_row() {
        let m =
            CostModel::from_profile_spec_with_env("llama3-405b+gtt-h100", 2, &|_| None).unwrap();
        let spec = ExecuteSpec {
            context: 96,
            attention: GqaConfig::new(4, 1, 4).unwrap(),
            seed: 1,
            executor: Executor::RoundBased,
        };
        let rows = cmd_sweep_miss_rate(128_000, &[0.125], &m, Some(&spec)).unwrap();
        let e = rows[0].exec.as_ref().unwrap();
        assert_eq!((e.new_len, e.cached_len), (12, 84));
        assert!(e.bit_identical);
        assert!(e.q_ring_bytes > 0 && e.kv_ring_bytes > 0);
    }
}
