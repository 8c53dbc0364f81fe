use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use stateflow::backend::{HttpConfig, PricingTable, Script};
use stateflow::env::EnvFixture;
use stateflow::eval::{run_suite, run_task, BackendFactory, HttpFactory, ScriptedFactory, Suite, SuiteTask};
use stateflow::fixtures::{check_fixtures, FixtureManifest};
use stateflow::flow::{Assembly, FlowDefinition, RunConfig, RunStatus};
use stateflow::flowdef::{ablate, load_flow, parse_flow, serialize_flow, validate_flow, Rewire};
use stateflow::output::AgentSpec;
use stateflow::reflexion::{default_reflector, run_with_reflexion};

/// Exit codes, one per outcome class.
mod exit {
    pub const OK: u8 = 0;
    pub const INVALID_FLOW: u8 = 1;
    pub const IO_OR_PARSE: u8 = 2;
    pub const MAX_TRANSITIONS: u8 = 3;
    pub const OUTPUT_ERROR: u8 = 4;
    pub const STALLED: u8 = 5;
    pub const INTERACTION_LIMIT: u8 = 6;
    pub const CONFIG: u8 = 7;
}

#[derive(Parser)]
#[command(name = "stateflow", version, about = "Run LLM workflows as state machines")]
struct Cli {
    /// Seed threaded into the run configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a flow file and print its validation report.
    Validate { flow: PathBuf },
    /// Run one task through a flow.
    Run(RunArgs),
    /// Run a suite and write report.json and report.txt.
    Bench(BenchArgs),
    /// Run a suite with reflections carried across trials.
    Reflect(ReflectArgs),
    /// Remove a state from a flow, rewiring the edges that pointed at it.
    Ablate(AblateArgs),
    /// Check the fixture corpus listed in a manifest.
    CheckFixtures {
        #[arg(default_value = "fixtures/MANIFEST.json")]
        manifest: PathBuf,
        /// Repository root the manifest paths are relative to.
        #[arg(long, default_value = ".")]
        root: PathBuf,
    },
}

#[derive(Args)]
struct RunOptions {
    #[arg(long)]
    max_transitions: Option<usize>,
    /// Override every agent's assembly mode: system or sfchat.
    #[arg(long)]
    assembly: Option<Assembly>,
    /// Backend for every task: `http:<model>`. Defaults to each task's script.
    #[arg(long)]
    backend: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    flow: PathBuf,
    /// Environment fixture holding the task.
    #[arg(long)]
    env: PathBuf,
    #[arg(long)]
    task: String,
    /// `scripted:<path>` or `http:<model>`.
    #[arg(long)]
    backend: String,
    #[arg(long, default_value_t = 30)]
    max_transitions: usize,
    #[arg(long)]
    assembly: Option<Assembly>,
    /// Write the JSONL trace here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    pricing: Option<PathBuf>,
    #[arg(long)]
    max_interactions: Option<usize>,
    #[arg(long)]
    halt_on_stall: bool,
}

#[derive(Args)]
struct BenchArgs {
    suite: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[command(flatten)]
    options: RunOptions,
}

#[derive(Args)]
struct ReflectArgs {
    suite: PathBuf,
    #[arg(long, default_value_t = 6)]
    trials: usize,
    /// Agent definition (JSON) for the reflector.
    #[arg(long)]
    reflector: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    #[command(flatten)]
    options: RunOptions,
}

#[derive(Args)]
struct AblateArgs {
    flow: PathBuf,
    #[arg(long)]
    remove: String,
    /// Rewire list as JSON, or `@file` to read it from a file.
    #[arg(long, default_value = "[]")]
    rewire: String,
    /// Output path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    error: anyhow::Error,
}

type CmdResult = Result<u8, Failure>;

trait Code<T> {
    fn code(self, code: u8) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Code<T> for Result<T, E> {
    fn code(self, code: u8) -> Result<T, Failure> {
        self.map_err(|e| Failure {
            code,
            error: e.into(),
        })
    }
}

fn fail<T>(code: u8, error: anyhow::Error) -> Result<T, Failure> {
    Err(Failure { code, error })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = cli.seed;
    let result = match cli.command {
        Command::Validate { flow } => cmd_validate(&flow),
        Command::Run(args) => cmd_run(args, seed),
        Command::Bench(args) => cmd_bench(args, seed),
        Command::Reflect(args) => cmd_reflect(args, seed),
        Command::Ablate(args) => cmd_ablate(args),
        Command::CheckFixtures { manifest, root } => cmd_check_fixtures(&manifest, &root),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn load_valid_flow(path: &Path) -> Result<FlowDefinition, Failure> {
    let flow = load_flow(path).code(exit::IO_OR_PARSE)?;
    let report = validate_flow(&flow);
    if !report.is_runnable() {
        return fail(exit::INVALID_FLOW, anyhow!("{}: {report}", path.display()));
    }
    Ok(flow)
}

fn cmd_validate(path: &Path) -> CmdResult {
    let flow = load_flow(path).code(exit::IO_OR_PARSE)?;
    let report = validate_flow(&flow);
    println!("{}: {report}", path.display());
    Ok(if report.is_runnable() { exit::OK } else { exit::INVALID_FLOW })
}

fn status_code(status: RunStatus) -> u8 {
    match status {
        RunStatus::ReachedFinal => exit::OK,
        RunStatus::MaxTransitionsExceeded => exit::MAX_TRANSITIONS,
        RunStatus::OutputFunctionError => exit::OUTPUT_ERROR,
        RunStatus::Stalled => exit::STALLED,
        RunStatus::InteractionLimit => exit::INTERACTION_LIMIT,
    }
}

fn http_factory(spec: &str) -> Result<Option<HttpFactory>, Failure> {
    match spec.split_once(':') {
        Some(("http", model)) => {
            let config = HttpConfig::from_env((!model.is_empty()).then_some(model)).code(exit::CONFIG)?;
            Ok(Some(HttpFactory { config }))
        }
        _ => Ok(None),
    }
}

fn cmd_run(args: RunArgs, seed: Option<u64>) -> CmdResult {
    let flow = load_valid_flow(&args.flow)?;
    let env = Arc::new(EnvFixture::load(&args.env).code(exit::IO_OR_PARSE)?);
    let pricing = args
        .pricing
        .as_deref()
        .map(PricingTable::load)
        .transpose()
        .code(exit::IO_OR_PARSE)?;
    let (script, http) = match args.backend.split_once(':') {
        Some(("scripted", path)) => {
            let script = Script::load(Path::new(path)).code(exit::IO_OR_PARSE)?;
            (Some(Arc::new(script)), None)
        }
        Some(("http", _)) => (None, http_factory(&args.backend)?),
        _ => {
            return fail(
                exit::CONFIG,
                anyhow!("backend must be `scripted:<path>` or `http:<model>`, got `{}`", args.backend),
            )
        }
    };
    let task = SuiteTask::from_fixture(env.clone(), &args.task, script).code(exit::CONFIG)?;
    if args.max_transitions == 0 {
        return fail(exit::CONFIG, anyhow!("--max-transitions must be at least 1"));
    }
    let config = RunConfig {
        max_transitions: args.max_transitions,
        record_trace: true,
        seed,
        assembly_override: args.assembly,
        halt_on_stall: args.halt_on_stall,
        max_interactions: args.max_interactions,
    };
    let factory: &dyn BackendFactory = match &http {
        Some(h) => h,
        None => &ScriptedFactory,
    };
    let outcome = run_task(&flow, &task, factory, &config, pricing.as_ref(), None);
    let Some(result) = outcome.run else {
        let reason = outcome.metrics.error.unwrap_or_else(|| "run did not start".into());
        return fail(exit::CONFIG, anyhow!(reason));
    };
    if let Some(path) = &args.trace {
        let file = fs::File::create(path)
            .with_context(|| format!("cannot create {}", path.display()))
            .code(exit::IO_OR_PARSE)?;
        result
            .trace
            .write_jsonl(std::io::BufWriter::new(file))
            .context("writing trace")
            .code(exit::IO_OR_PARSE)?;
    }
    let m = &outcome.metrics;
    println!("task:        {}", m.task);
    println!("status:      {}", result.status);
    println!("exit state:  {}", result.exit_state);
    println!("transitions: {}", result.transitions_taken);
    println!("turns:       {} ({} failed)", m.turns, m.commands_failed);
    println!("reward:      {:.3}", m.reward);
    println!("tokens:      {} prompt, {} completion", m.prompt_tokens, m.completion_tokens);
    if pricing.is_some() {
        println!("cost:        ${:.4}", m.cost);
    }
    if let Some(e) = &result.error {
        println!("error:       {e}");
    }
    Ok(status_code(result.status))
}

fn base_config(options: &RunOptions, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut config = RunConfig {
        seed,
        assembly_override: options.assembly,
        ..Default::default()
    };
    if let Some(m) = options.max_transitions {
        if m == 0 {
            return fail(exit::CONFIG, anyhow!("--max-transitions must be at least 1"));
        }
        config.max_transitions = m;
    }
    Ok(config)
}

fn load_suite(path: &Path) -> Result<Suite, Failure> {
    let suite = Suite::load(path).code(exit::IO_OR_PARSE)?;
    let report = validate_flow(&suite.flow);
    if !report.is_runnable() {
        return fail(exit::INVALID_FLOW, anyhow!("{}: {report}", suite.flow_path.display()));
    }
    Ok(suite)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).code(exit::IO_OR_PARSE)?;
    fs::write(path, text + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
        .code(exit::IO_OR_PARSE)
}

fn factory_for(options: &RunOptions) -> Result<Box<dyn BackendFactory>, Failure> {
    match options.backend.as_deref() {
        None => Ok(Box::new(ScriptedFactory)),
        Some(spec) => match http_factory(spec)? {
            Some(f) => Ok(Box::new(f)),
            None => fail(exit::CONFIG, anyhow!("--backend must be `http:<model>`, got `{spec}`")),
        },
    }
}

fn cmd_bench(args: BenchArgs, seed: Option<u64>) -> CmdResult {
    let suite = load_suite(&args.suite)?;
    let config = base_config(&args.options, seed)?;
    let factory = factory_for(&args.options)?;
    let run = run_suite(&suite, factory.as_ref(), &config, args.parallel.max(1));
    fs::create_dir_all(&args.out).code(exit::IO_OR_PARSE)?;
    write_json(&args.out.join("report.json"), &run.report)?;
    let table = run.report.to_table();
    fs::write(args.out.join("report.txt"), &table).code(exit::IO_OR_PARSE)?;
    print!("{table}");
    Ok(exit::OK)
}

fn cmd_reflect(args: ReflectArgs, seed: Option<u64>) -> CmdResult {
    let suite = load_suite(&args.suite)?;
    let config = base_config(&args.options, seed)?;
    let factory = factory_for(&args.options)?;
    let reflector = match &args.reflector {
        None => default_reflector(),
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("cannot read {}", path.display()))
                .code(exit::IO_OR_PARSE)?;
            let mut agent: AgentSpec = serde_json::from_str(&text)
                .with_context(|| format!("invalid reflector {}", path.display()))
                .code(exit::IO_OR_PARSE)?;
            agent
                .resolve_prompts(path.parent().unwrap_or(Path::new(".")))
                .code(exit::IO_OR_PARSE)?;
            agent
        }
    };
    let report = run_with_reflexion(
        &suite,
        factory.as_ref(),
        &reflector,
        &config,
        args.trials,
        args.parallel.max(1),
    );
    fs::create_dir_all(&args.out).code(exit::IO_OR_PARSE)?;
    write_json(&args.out.join("report.json"), &report)?;
    println!("trial  cumulative SR  solved  cumulative cost");
    for (i, sr) in report.cumulative_success_rate.iter().enumerate() {
        println!(
            "{:>5}  {:>12.2}%  {:>6}  {:>15.4}",
            i + 1,
            sr * 100.0,
            report.cumulative_solved[i],
            report.cumulative_cost[i]
        );
    }
    Ok(exit::OK)
}

fn cmd_ablate(args: AblateArgs) -> CmdResult {
    let text = fs::read_to_string(&args.flow)
        .with_context(|| format!("cannot read {}", args.flow.display()))
        .code(exit::IO_OR_PARSE)?;
    let flow = parse_flow(&text).code(exit::IO_OR_PARSE)?;
    let rewire_text = match args.rewire.strip_prefix('@') {
        Some(path) => fs::read_to_string(path)
            .with_context(|| format!("cannot read {path}"))
            .code(exit::IO_OR_PARSE)?,
        None => args.rewire.clone(),
    };
    let rewires: Vec<Rewire> = serde_json::from_str(&rewire_text)
        .context("invalid rewire list")
        .code(exit::IO_OR_PARSE)?;
    let ablated = ablate(&flow, &args.remove, &rewires).code(exit::INVALID_FLOW)?;
    let out = serialize_flow(&ablated);
    match &args.out {
        Some(path) => {
            fs::write(path, out)
                .with_context(|| format!("cannot write {}", path.display()))
                .code(exit::IO_OR_PARSE)?;
            eprintln!(
                "wrote {} ({} states): {}",
                path.display(),
                ablated.states.len(),
                validate_flow(&ablated)
            );
        }
        None => print!("{out}"),
    }
    Ok(exit::OK)
}

fn cmd_check_fixtures(manifest: &Path, root: &Path) -> CmdResult {
    let m = FixtureManifest::load(manifest).map_err(|e| anyhow!(e)).code(exit::IO_OR_PARSE)?;
    let report = check_fixtures(root, &m);
    for p in &report.problems {
        println!("FAIL {p}");
    }
    println!("{} fixtures checked, {} problems", report.checked, report.problems.len());
    Ok(if report.is_clean() { exit::OK } else { exit::INVALID_FLOW })
}
