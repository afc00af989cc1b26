use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxpar_core::harness::{
    self, cmd_mfu, cmd_scaling, cmd_sweep_miss_rate, cmd_verify, dump_plans, emit, render_mfu,
    run_scenario, scaling_csv, sweep_csv, transcript_trace_csv, ExecuteSpec, Overrides, Scenario,
};
use ctxpar_core::perf::CostModel;
use ctxpar_core::ring::{Executor, Fault, Strategy};
use ctxpar_core::{Error, GqaConfig};

#[derive(Parser)]
#[command(
    name = "ctxpar",
    version,
    about = "Context-parallel ring attention simulator and cost model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    PassKv,
    PassQ,
    Adaptive,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::PassKv => Strategy::PassKv,
            StrategyArg::PassQ => Strategy::PassQ,
            StrategyArg::Adaptive => Strategy::Adaptive,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecutorArg {
    RoundBased,
    Threaded,
}

impl From<ExecutorArg> for Executor {
    fn from(e: ExecutorArg) -> Self {
        match e {
            ExecutorArg::RoundBased => Executor::RoundBased,
            ExecutorArg::Threaded => Executor::Threaded,
        }
    }
}

#[derive(Args)]
struct ScenarioArgs {
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long)]
    ranks: Option<usize>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    executor: Option<ExecutorArg>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario, Error> {
        Scenario::load(&self.scenario)?.apply(&Overrides {
            ranks: self.ranks,
            strategy: self.strategy.map(Into::into),
            seed: self.seed,
            executor: self.executor.map(Into::into),
        })
    }
}

const DEFAULT_PROFILE: &str = "llama3-405b+gtt-h100";

#[derive(Subcommand)]
enum Command {
    /// Execute a scenario on the ring engine.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Print the shard/decode plan of every call as JSON.
        #[arg(long)]
        dump_plan: bool,
        /// Write the per-step trace CSV here.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the full transcript JSON here.
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Execute a scenario and compare every output with the dense oracle.
    Verify {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Per-call report CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Corrupt the merge on purpose; verification must then fail.
        #[arg(long, hide = true)]
        inject_misordered_merge: bool,
    },
    /// Predicted pass-KV vs pass-Q latency across KV-cache miss rates.
    Sweep {
        #[arg(long, default_value = DEFAULT_PROFILE)]
        profile: String,
        #[arg(long, default_value_t = 4)]
        ranks: u64,
        /// T + P.
        #[arg(long, default_value_t = 128_000)]
        context: u64,
        /// Comma-separated miss rates in (0, 1].
        #[arg(long, value_delimiter = ',')]
        rates: Option<Vec<f64>>,
        /// Also run both protocols on the ring engine at desk scale.
        #[arg(long)]
        execute: bool,
        /// Context executed per rate with --execute.
        #[arg(long, default_value_t = 1024)]
        exec_context: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "round-based")]
        executor: ExecutorArg,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Modeled full-prefill latency and scaling ratio per (T, N).
    Scaling {
        #[arg(long, default_value = DEFAULT_PROFILE)]
        profile: String,
        #[arg(long, value_delimiter = ',', default_value = "128000")]
        tokens: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        ranks: Vec<u64>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Model FLOPs utilisation of a measured full prefill.
    Mfu {
        #[arg(long, default_value = DEFAULT_PROFILE)]
        profile: String,
        #[arg(long)]
        tokens: f64,
        #[arg(long)]
        gpus: u64,
        /// Measured prefill latency in seconds.
        #[arg(long)]
        latency: f64,
    },
}

enum Outcome {
    Ok,
    Failed,
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    match cli.command {
        Command::Run {
            scenario,
            dump_plan,
            csv,
            transcript,
        } => {
            let sc = scenario.load()?;
            let t = run_scenario(&sc, None)?;
            if dump_plan {
                emit(&(dump_plans(&t)? + "\n"), None)?;
            }
            if let Some(path) = &transcript {
                emit(&t.to_json()?, Some(path))?;
            }
            match &csv {
                Some(path) => emit(&transcript_trace_csv(&t)?, Some(path))?,
                None if !dump_plan => {
                    for r in &t.records {
                        println!(
                            "call {:>4} turn {:>3} {:?} {} tokens={} ring_bytes/rank={} a2a_bytes/rank={}",
                            r.call,
                            r.turn,
                            r.kind,
                            r.protocol,
                            r.outputs.len(),
                            r.trace.ring_bytes_per_rank(),
                            r.trace.a2a_bytes_per_rank()
                        );
                    }
                }
                None => {}
            }
            Ok(Outcome::Ok)
        }
        Command::Verify {
            scenario,
            csv,
            inject_misordered_merge,
        } => {
            let sc = scenario.load()?;
            let fault = inject_misordered_merge.then_some(Fault::MisorderedMerge);
            let report = cmd_verify(&sc, fault)?;
            print!("{}", report.render());
            if let Some(path) = &csv {
                emit(&report.to_csv()?, Some(path))?;
            }
            Ok(if report.pass() {
                Outcome::Ok
            } else {
                Outcome::Failed
            })
        }
        Command::Sweep {
            profile,
            ranks,
            context,
            rates,
            execute,
            exec_context,
            seed,
            executor,
            csv,
        } => {
            let model = CostModel::from_profile_spec(&profile, ranks)?;
            let rates = rates.unwrap_or_else(|| harness::DEFAULT_MISS_RATES.to_vec());
            let spec = ExecuteSpec {
                context: exec_context,
                attention: desk_attention(&model)?,
                seed,
                executor: executor.into(),
            };
            let rows = cmd_sweep_miss_rate(context, &rates, &model, execute.then_some(&spec))?;
            emit(&sweep_csv(&rows)?, csv.as_deref())?;
            Ok(Outcome::Ok)
        }
        Command::Scaling {
            profile,
            tokens,
            ranks,
            csv,
        } => {
            let model = CostModel::from_profile_spec(&profile, 1)?;
            let rows = cmd_scaling(&tokens, &ranks, &model)?;
            emit(&scaling_csv(&rows)?, csv.as_deref())?;
            Ok(Outcome::Ok)
        }
        Command::Mfu {
            profile,
            tokens,
            gpus,
            latency,
        } => {
            let model = CostModel::from_profile_spec(&profile, 1)?;
            print!("{}", render_mfu(&cmd_mfu(tokens, gpus, latency, &model)?));
            Ok(Outcome::Ok)
        }
    }
}

/// Small GQA shape with the profile's query/KV head ratio.
fn desk_attention(model: &CostModel) -> Result<GqaConfig, Error> {
    let ratio = (model.model.n_query_heads / model.model.n_kv_heads).clamp(1, 16) as usize;
    GqaConfig::new(ratio, 1, 8)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Failed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
