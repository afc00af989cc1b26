use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{
    decode_inputs, ring_pass_kv_prefill, ring_pass_q_decode, ring_pass_q_prefill, shard_inputs,
    EngineOptions, StepTrace,
};
use crate::embed::TokenSource;
use crate::error::{Error, Result};
use crate::kv_cache::RankKvCache;
use crate::perf::{choose_strategy, CostModel, PrefillShape, Protocol};
use crate::sharding::{
    plan_decode, plan_full_prefill, plan_partial_prefill, DecodePlan, SequenceSpec, ShardPlan,
};
use crate::tensor::{GqaConfig, PartialAttention, SeqId};

/// How prefill turns pick a ring protocol. Decode always passes Q.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    PassKv,
    PassQ,
    #[default]
    Adaptive,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('_', "-").as_str() {
            "pass-kv" => Ok(Strategy::PassKv),
            "pass-q" => Ok(Strategy::PassQ),
            "adaptive" => Ok(Strategy::Adaptive),
            _ => Err(Error::Config(format!(
                "unknown strategy '{s}' (expected pass-kv, pass-q or adaptive)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Turn {
    /// Opens one new sequence per entry of `lengths`.
    FullPrefill { lengths: Vec<usize> },
    /// Appends `lengths[i]` tokens to `seqs[i]`. Without `seqs`, every open
    /// sequence in id order; a single length applies to all of them.
    PartialPrefill {
        #[serde(default)]
        seqs: Option<Vec<SeqId>>,
        lengths: Vec<usize>,
    },
    /// `steps` decode iterations over `seqs` (default: every open sequence).
    Decode {
        #[serde(default)]
        seqs: Option<Vec<SeqId>>,
        steps: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    FullPrefill,
    PartialPrefill,
    Decode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PlanRecord {
    Prefill(ShardPlan),
    Decode(DecodePlan),
}

/// Merged attention output of one real token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenOutput {
    pub seq: SeqId,
    pub position: u64,
    /// `[query heads, head_dim]`, row-major.
    pub output: Vec<f64>,
    /// One log-sum-exp per query head.
    pub lse: Vec<f64>,
}

/// One ring invocation. A decode turn of `k` steps yields `k` records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    pub call: usize,
    pub kind: TurnKind,
    pub protocol: Protocol,
    pub plan: PlanRecord,
    /// Sorted by `(seq, position)`.
    pub outputs: Vec<TokenOutput>,
    pub trace: StepTrace,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub n_ranks: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub records: Vec<TurnRecord>,
}

impl Transcript {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Multi-turn conversation state spread over `n_ranks` KV caches.
#[derive(Clone, Debug)]
pub struct Session {
    cfg: GqaConfig,
    source: TokenSource,
    opts: EngineOptions,
    caches: Vec<RankKvCache>,
    seq_lens: BTreeMap<SeqId, u64>,
    next_seq: SeqId,
    decode_iteration: u64,
    calls: usize,
    turns: usize,
    selector: Option<(CostModel, bool)>,
}

impl Session {
    pub fn new(cfg: GqaConfig, n_ranks: usize, seed: u64, opts: EngineOptions) -> Result<Self> {
        cfg.validate()?;
        if n_ranks == 0 {
            return Err(Error::Config("n_ranks must be at least 1".into()));
        }
        Ok(Self {
            cfg,
            source: TokenSource::new(seed, cfg),
            opts,
            caches: vec![RankKvCache::new(cfg.n_kv_heads, cfg.head_dim); n_ranks],
            seq_lens: BTreeMap::new(),
            next_seq: 0,
            decode_iteration: 0,
            calls: 0,
            turns: 0,
            selector: None,
        })
    }

    /// Cost model consulted by [`Strategy::Adaptive`]; its node count is
    /// replaced by this session's rank count. `refined` selects the
    /// exposed-communication comparison instead of the closed-form threshold rule.
    pub fn with_selector(mut self, model: CostModel, refined: bool) -> Result<Self> {
        self.selector = Some((model.with_nodes(self.n_ranks() as u64)?, refined));
        Ok(self)
    }

    pub fn n_ranks(&self) -> usize {
        self.caches.len()
    }

    pub fn cfg(&self) -> &GqaConfig {
        &self.cfg
    }

    pub fn source(&self) -> &TokenSource {
        &self.source
    }

    pub fn caches(&self) -> &[RankKvCache] {
        &self.caches
    }

    /// Token count of every open sequence.
    pub fn sequences(&self) -> &BTreeMap<SeqId, u64> {
        &self.seq_lens
    }

    fn resolve(&self, seqs: &Option<Vec<SeqId>>) -> Result<Vec<SeqId>> {
        match seqs {
            Some(ids) => {
                for id in ids {
                    if !self.seq_lens.contains_key(id) {
                        return Err(Error::UnknownSequence(*id));
                    }
                }
                Ok(ids.clone())
            }
            None => Ok(self.seq_lens.keys().copied().collect()),
        }
    }

    fn pick(&self, plan: &ShardPlan, strategy: Strategy) -> Result<Protocol> {
        Ok(match strategy {
            Strategy::PassKv => Protocol::PassKv,
            Strategy::PassQ => Protocol::PassQ,
            Strategy::Adaptive => {
                let shape = PrefillShape::new(plan.total_new() as f64, plan.total_cached() as f64)?;
                match &self.selector {
                    Some((model, refined)) => choose_strategy(&shape, model, *refined),
                    None => {
                        let model = CostModel::from_profile_spec_with_env(
                            "llama3-405b+gtt-h100",
                            self.n_ranks() as u64,
                            &|_| None,
                        )?;
                        choose_strategy(&shape, &model, false)
                    }
                }
            }
        })
    }

    fn record(
        &mut self,
        kind: TurnKind,
        protocol: Protocol,
        plan: PlanRecord,
        partials: Vec<PartialAttention>,
        trace: StepTrace,
    ) -> TurnRecord {
        let mut outputs = Vec::new();
        for p in &partials {
            let heads = p.output.num_heads();
            for t in 0..p.num_tokens() {
                if let Some(tag) = p.output.tag(t) {
                    outputs.push(TokenOutput {
                        seq: tag.seq,
                        position: tag.position,
                        output: p.output.token(t).to_vec(),
                        lse: p.lse[t * heads..(t + 1) * heads].to_vec(),
                    });
                }
            }
        }
        outputs.sort_by_key(|o| (o.seq, o.position));
        let call = self.calls;
        self.calls += 1;
        TurnRecord {
            turn: self.turns,
            call,
            kind,
            protocol,
            plan,
            outputs,
            trace,
        }
    }

    fn prefill(
        &mut self,
        kind: TurnKind,
        plan: ShardPlan,
        strategy: Strategy,
    ) -> Result<TurnRecord> {
        let protocol = self.pick(&plan, strategy)?;
        let inputs = shard_inputs(&plan, &self.source)?;
        let (partials, trace) = match protocol {
            Protocol::PassKv => {
                ring_pass_kv_prefill(&plan, &mut self.caches, &inputs, &self.cfg, &self.opts)?
            }
            Protocol::PassQ => {
                ring_pass_q_prefill(&plan, &mut self.caches, &inputs, &self.cfg, &self.opts)?
            }
        };
        for s in &plan.sequences {
            *self.seq_lens.entry(s.seq_id).or_insert(0) += s.new_len as u64;
        }
        Ok(self.record(kind, protocol, PlanRecord::Prefill(plan), partials, trace))
    }

    fn decode_step(&mut self, batch: &[SeqId]) -> Result<TurnRecord> {
        let plan = plan_decode(batch, self.n_ranks(), self.decode_iteration)?;
        let inputs = decode_inputs(&plan, &self.source, &self.seq_lens)?;
        let (partials, trace) =
            ring_pass_q_decode(&plan, &mut self.caches, &inputs, &self.cfg, &self.opts)?;
        self.decode_iteration += 1;
        for s in batch {
            *self.seq_lens.get_mut(s).expect("batch was resolved") += 1;
        }
        Ok(self.record(
            TurnKind::Decode,
            Protocol::PassQ,
            PlanRecord::Decode(plan),
            partials,
            trace,
        ))
    }

    /// Plan the next turn without running it. Decode turns plan their first
    /// step only.
    pub fn plan_turn(&self, turn: &Turn) -> Result<PlanRecord> {
        match turn {
            Turn::FullPrefill { lengths } => {
                let specs = self.full_specs(lengths)?;
                Ok(PlanRecord::Prefill(plan_full_prefill(
                    &specs,
                    self.n_ranks(),
                )?))
            }
            Turn::PartialPrefill { seqs, lengths } => {
                let (specs, layout) = self.partial_specs(seqs, lengths)?;
                Ok(PlanRecord::Prefill(plan_partial_prefill(
                    &specs,
                    self.n_ranks(),
                    &layout,
                )?))
            }
            Turn::Decode { seqs, .. } => {
                let batch = self.resolve(seqs)?;
                Ok(PlanRecord::Decode(plan_decode(
                    &batch,
                    self.n_ranks(),
                    self.decode_iteration,
                )?))
            }
        }
    }

    fn full_specs(&self, lengths: &[usize]) -> Result<Vec<SequenceSpec>> {
        if lengths.is_empty() {
            return Err(Error::Config(
                "full_prefill needs at least one length".into(),
            ));
        }
        Ok(lengths
            .iter()
            .enumerate()
            .map(|(i, &t)| SequenceSpec::new(self.next_seq + i as SeqId, 0, t))
            .collect())
    }

    fn partial_specs(
        &self,
        seqs: &Option<Vec<SeqId>>,
        lengths: &[usize],
    ) -> Result<(Vec<SequenceSpec>, Vec<Vec<usize>>)> {
        let ids = self.resolve(seqs)?;
        if ids.is_empty() {
            return Err(Error::Config(
                "partial_prefill needs at least one open sequence".into(),
            ));
        }
        let lengths: Vec<usize> = match lengths.len() {
            1 => vec![lengths[0]; ids.len()],
            n if n == ids.len() => lengths.to_vec(),
            n => {
                return Err(Error::Config(format!(
                    "partial_prefill has {n} lengths for {} sequences",
                    ids.len()
                )))
            }
        };
        let specs = ids
            .iter()
            .zip(&lengths)
            .map(|(&id, &t)| SequenceSpec::new(id, self.seq_lens[&id] as usize, t))
            .collect();
        let layout = ids
            .iter()
            .map(|&id| self.caches.iter().map(|c| c.cached_len(id)).collect())
            .collect();
        Ok((specs, layout))
    }

    pub fn run_turn(&mut self, turn: &Turn, strategy: Strategy) -> Result<Vec<TurnRecord>> {
        let records = match turn {
            Turn::FullPrefill { lengths } => {
                let specs = self.full_specs(lengths)?;
                let plan = plan_full_prefill(&specs, self.n_ranks())?;
                self.next_seq += specs.len() as SeqId;
                vec![self.prefill(TurnKind::FullPrefill, plan, strategy)?]
            }
            Turn::PartialPrefill { seqs, lengths } => {
                let (specs, layout) = self.partial_specs(seqs, lengths)?;
                let plan = plan_partial_prefill(&specs, self.n_ranks(), &layout)?;
                vec![self.prefill(TurnKind::PartialPrefill, plan, strategy)?]
            }
            Turn::Decode { seqs, steps } => {
                let batch = self.resolve(seqs)?;
                (0..*steps)
                    .map(|_| self.decode_step(&batch))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        self.turns += 1;
        Ok(records)
    }

    pub fn run_turns(&mut self, turns: &[Turn], strategy: Strategy) -> Result<Transcript> {
        let mut records = Vec::new();
        for t in turns {
            records.extend(self.run_turn(t, strategy)?);
        }
        Ok(Transcript {
            n_ranks: self.n_ranks(),
            seed: self.source.seed(),
            strategy,
            records,
        })
    }
}
