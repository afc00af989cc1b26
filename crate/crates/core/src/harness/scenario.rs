//! Scenario files.
//!
//! ```toml
//! model = "llama3-405b"      # cost-model profiles, used by adaptive
//! hardware = "gtt-h100"
//! n_ranks = 4
//! seed = 7
//! strategy = "adaptive"      # pass-kv | pass-q | adaptive
//! refined = false            # adaptive: exposed-comm comparison
//! executor = "round-based"   # or "threaded"
//!
//! [attention]                # desk-scale GQA shape of the executed ring
//! n_query_heads = 8
//! n_kv_heads = 2
//! head_dim = 16
//!
//! [[turns]]
//! kind = "full_prefill"
//! lengths = [128, 64]
//!
//! [[turns]]
//! kind = "decode"
//! steps = 16
//!
//! [[turns]]
//! kind = "partial_prefill"
//! seqs = [0]                 # optional, default: every open sequence
//! lengths = [8]
//! repeat = 2                 # optional, default 1
//! ```

use std::ops::Range;
use std::path::Path;

use serde::Deserialize;
use toml::Spanned;

use crate::error::{Error, Result};
use crate::perf::CostModel;
use crate::ring::{EngineOptions, Executor, Session, Strategy, Turn, TurnKind};
use crate::tensor::{GqaConfig, SeqId};

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAttention {
    n_query_heads: usize,
    n_kv_heads: usize,
    head_dim: usize,
}

impl Default for RawAttention {
    fn default() -> Self {
        Self {
            n_query_heads: 8,
            n_kv_heads: 2,
            head_dim: 16,
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    kind: TurnKind,
    #[serde(default)]
    lengths: Option<Vec<usize>>,
    #[serde(default)]
    seqs: Option<Vec<SeqId>>,
    #[serde(default)]
    steps: Option<usize>,
    #[serde(default)]
    repeat: Option<usize>,
}

fn default_model() -> String {
    "llama3-405b".into()
}

fn default_hardware() -> String {
    "gtt-h100".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default = "default_model")]
    model: String,
    #[serde(default = "default_hardware")]
    hardware: String,
    n_ranks: Spanned<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    strategy: Strategy,
    #[serde(default)]
    refined: bool,
    #[serde(default)]
    executor: Executor,
    #[serde(default)]
    attention: Option<Spanned<RawAttention>>,
    turns: Vec<Spanned<RawTurn>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub model: String,
    pub hardware: String,
    pub n_ranks: usize,
    pub seed: u64,
    pub strategy: Strategy,
    pub refined: bool,
    pub executor: Executor,
    pub attention: GqaConfig,
    pub turns: Vec<Turn>,
}

/// Command-line replacements for scenario fields.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub ranks: Option<usize>,
    pub strategy: Option<Strategy>,
    pub seed: Option<u64>,
    pub executor: Option<Executor>,
}

struct Locator<'a> {
    text: &'a str,
    origin: &'a str,
}

impl Locator<'_> {
    fn at(&self, span: Range<usize>, key: &str, message: impl Into<String>) -> Error {
        let line = self.text[..span.start.min(self.text.len())]
            .matches('\n')
            .count()
            + 1;
        Error::Scenario {
            location: format!("{}:{line} ({key})", self.origin),
            message: message.into(),
        }
    }
}

fn convert_turn(raw: &Spanned<RawTurn>, index: usize, loc: &Locator) -> Result<Vec<Turn>> {
    let span = raw.span();
    let t = raw.get_ref();
    let key = |field: &str| format!("turns[{index}].{field}");
    let err = |field: &str, msg: &str| loc.at(span.clone(), &key(field), msg);
    let lengths = || -> Result<Vec<usize>> {
        let l = t
            .lengths
            .clone()
            .ok_or_else(|| err("lengths", "missing for a prefill turn"))?;
        if l.is_empty() || l.contains(&0) {
            return Err(err("lengths", "must be non-empty and positive"));
        }
        Ok(l)
    };
    let turn = match t.kind {
        TurnKind::FullPrefill => {
            if t.seqs.is_some() || t.steps.is_some() {
                return Err(err("kind", "full_prefill takes only lengths and repeat"));
            }
            Turn::FullPrefill {
                lengths: lengths()?,
            }
        }
        TurnKind::PartialPrefill => {
            if t.steps.is_some() {
                return Err(err("steps", "partial_prefill does not take steps"));
            }
            Turn::PartialPrefill {
                seqs: t.seqs.clone(),
                lengths: lengths()?,
            }
        }
        TurnKind::Decode => {
            if t.lengths.is_some() {
                return Err(err("lengths", "decode does not take lengths"));
            }
            let steps = t.steps.unwrap_or(1);
            if steps == 0 {
                return Err(err("steps", "must be at least 1"));
            }
            Turn::Decode {
                seqs: t.seqs.clone(),
                steps,
            }
        }
    };
    let repeat = t.repeat.unwrap_or(1);
    if repeat == 0 {
        return Err(err("repeat", "must be at least 1"));
    }
    Ok(vec![turn; repeat])
}

impl Scenario {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let loc = Locator { text, origin };
        let raw: RawScenario = toml::from_str(text).map_err(|e| match e.span() {
            Some(span) => loc.at(span, "toml", e.message()),
            None => Error::Scenario {
                location: origin.to_string(),
                message: e.message().to_string(),
            },
        })?;
        if *raw.n_ranks.get_ref() == 0 {
            return Err(loc.at(raw.n_ranks.span(), "n_ranks", "must be at least 1"));
        }
        let attention = match &raw.attention {
            Some(a) => {
                let r = a.get_ref();
                GqaConfig::new(r.n_query_heads, r.n_kv_heads, r.head_dim)
                    .map_err(|e| loc.at(a.span(), "attention", e.to_string()))?
            }
            None => {
                let r = RawAttention::default();
                GqaConfig::new(r.n_query_heads, r.n_kv_heads, r.head_dim)?
            }
        };
        if raw.turns.is_empty() {
            return Err(Error::Scenario {
                location: origin.to_string(),
                message: "scenario has no [[turns]]".into(),
            });
        }
        let mut turns = Vec::new();
        for (i, t) in raw.turns.iter().enumerate() {
            turns.extend(convert_turn(t, i, &loc)?);
        }
        Ok(Self {
            model: raw.model,
            hardware: raw.hardware,
            n_ranks: raw.n_ranks.into_inner(),
            seed: raw.seed,
            strategy: raw.strategy,
            refined: raw.refined,
            executor: raw.executor,
            attention,
            turns,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Scenario {
            location: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn apply(mut self, o: &Overrides) -> Result<Self> {
        if let Some(n) = o.ranks {
            if n == 0 {
                return Err(Error::Config("--ranks must be at least 1".into()));
            }
            self.n_ranks = n;
        }
        if let Some(s) = o.strategy {
            self.strategy = s;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(e) = o.executor {
            self.executor = e;
        }
        Ok(self)
    }

    pub fn cost_model(&self) -> Result<CostModel> {
        CostModel::from_profile_spec(
            &format!("{}+{}", self.model, self.hardware),
            self.n_ranks as u64,
        )
    }

    /// Fresh session with the scenario's selector installed.
    pub fn session(&self, opts: EngineOptions) -> Result<Session> {
        Session::new(self.attention, self.n_ranks, self.seed, opts)?
            .with_selector(self.cost_model()?, self.refined)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASIC: &str = r#"
n_ranks = 2
seed = 3
strategy = "pass-q"

[[turns]]
kind = "full_prefill"
lengths = [16]

[[turns]]
kind = "decode"
steps = 4
repeat = 2
"#;

    #[test]
    fn parses_and_expands_repeats() {
        let s = Scenario::parse(BASIC, "basic.toml").unwrap();
        assert_eq!(s.n_ranks, 2);
        assert_eq!(s.strategy, Strategy::PassQ);
        assert_eq!(s.turns.len(), 3);
        assert_eq!(s.attention.n_query_heads, 8);
        assert_eq!(s.model, "llama3-405b");
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = "n_ranks = 2\nbogus = 1\n[[turns]]\nkind = \"decode\"\n";
        match Scenario::parse(text, "s.toml").unwrap_err() {
            Error::Scenario { location, .. } => {
                assert!(location.starts_with("s.toml:"), "{location}")
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_key() {
        let text = "n_ranks = 2\n\n[[turns]]\nkind = \"full_prefill\"\n";
        match Scenario::parse(text, "s.toml").unwrap_err() {
            Error::Scenario { location, .. } => {
                assert!(location.contains("turns[0].lengths"), "{location}");
                assert!(
                    location.starts_with("s.toml:3") || location.starts_with("s.toml:4"),
                    "{location}"
                );
            }
            e => panic!("{e:?}"),
        }
        assert!(Scenario::parse("n_ranks = 0\n[[turns]]\nkind=\"decode\"\n", "z").is_err());
    }

    #[test]
    fn overrides_apply() {
        let s = Scenario::parse(BASIC, "b")
            .unwrap()
            .apply(&Overrides {
                ranks: Some(4),
                seed: Some(9),
                ..Default::default()
            })
            .unwrap();
        assert_eq!((s.n_ranks, s.seed), (4, 9));
    }
}
