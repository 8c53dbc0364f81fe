//! Batch evaluation: run a flow over a task suite and compute success rate,
//! reward, turns, error rate, tokens and cost per task and in aggregate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    cost_by_reply_model, HttpBackend, HttpConfig, LlmBackend, PricingTable, Script, ScriptedBackend,
};
use crate::env::{EnvFixture, EnvKind, TaskSpec};
use crate::flow::{
    run_flow, FlowDefinition, MessageKind, RunConfig, RunResult, RunStatus, StateId, TaskInput,
};
use crate::flowdef::{load_flow, LoadError};
use crate::output::OutputBindings;
use crate::transition::{classify_observation, ObservationClass};

/// Interaction cap used when a suite does not set one.
pub fn default_max_interactions(kind: EnvKind) -> usize {
    match kind {
        EnvKind::ToySql => 10,
        EnvKind::ToyHouse => 50,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteEntry {
    /// Environment fixture path, relative to the suite file.
    pub env: String,
    pub task: String,
    /// Scripted executor backend, bound as `default`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
    /// Scripted reflector backend for iterative refinement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reflector_script: Option<String>,
}

/// The `suites/*.json` document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    /// Flow path, relative to the suite file.
    pub flow: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pricing: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_transitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_interactions: Option<usize>,
    /// Defaults to on for household tasks and off otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub halt_on_stall: Option<bool>,
    pub tasks: Vec<SuiteEntry>,
}

/// A task ready to run: its spec, environment fixture and scripts.
#[derive(Debug, Clone)]
pub struct SuiteTask {
    pub spec: TaskSpec,
    pub env: Arc<EnvFixture>,
    pub script: Option<Arc<Script>>,
    pub reflector_script: Option<Arc<Script>>,
}

impl SuiteTask {
    /// One task of an environment fixture, outside any suite file.
    pub fn from_fixture(
        env: Arc<EnvFixture>,
        task_id: &str,
        script: Option<Arc<Script>>,
    ) -> Result<Self, crate::env::FixtureError> {
        Ok(SuiteTask {
            spec: env.task(task_id)?,
            env,
            script,
            reflector_script: None,
        })
    }

    /// Unique within a suite: environment name and task id.
    pub fn key(&self) -> String {
        format!("{}/{}", self.env.name(), self.spec.id)
    }
}

/// Run-wide settings shared by every task of a suite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SuiteSettings {
    pub max_transitions: Option<usize>,
    pub max_interactions: Option<usize>,
    pub halt_on_stall: Option<bool>,
}

impl SuiteSettings {
    /// The run configuration for one task.
    pub fn config_for(&self, base: &RunConfig, kind: EnvKind) -> RunConfig {
        let mut config = base.clone();
        if let Some(m) = self.max_transitions {
            config.max_transitions = m;
        }
        config.max_interactions = Some(self.max_interactions.unwrap_or(default_max_interactions(kind)));
        config.halt_on_stall = self.halt_on_stall.unwrap_or(kind == EnvKind::ToyHouse);
        config
    }
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub name: String,
    pub flow: FlowDefinition,
    pub flow_path: PathBuf,
    pub pricing: Option<PricingTable>,
    pub settings: SuiteSettings,
    pub tasks: Vec<SuiteTask>,
}

#[derive(Debug, Error)]
pub enum SuiteError {
    #[error("cannot read `{path}`: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid suite `{path}`: {reason}")]
    Invalid { path: String, reason: String },
    #[error(transparent)]
    Flow(#[from] LoadError),
    #[error(transparent)]
    Fixture(#[from] crate::env::FixtureError),
}

impl Suite {
    pub fn load(path: &Path) -> Result<Suite, SuiteError> {
        let text = std::fs::read_to_string(path).map_err(|e| SuiteError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let file: SuiteFile = serde_json::from_str(&text).map_err(|e| SuiteError::Invalid {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_file(file, path.parent().unwrap_or(Path::new(".")))
    }

    /// Resolves every path in `file` relative to `base`.
    pub fn from_file(file: SuiteFile, base: &Path) -> Result<Suite, SuiteError> {
        let flow_path = base.join(&file.flow);
        let flow = load_flow(&flow_path)?;
        let invalid = |path: &Path, reason: String| SuiteError::Invalid {
            path: path.display().to_string(),
            reason,
        };
        let pricing = match &file.pricing {
            Some(p) => {
                let p = base.join(p);
                Some(PricingTable::load(&p).map_err(|e| invalid(&p, e.to_string()))?)
            }
            None => None,
        };
        let mut envs: BTreeMap<PathBuf, Arc<EnvFixture>> = BTreeMap::new();
        let mut scripts: BTreeMap<PathBuf, Arc<Script>> = BTreeMap::new();
        let mut load_script = |rel: &Option<String>| -> Result<Option<Arc<Script>>, SuiteError> {
            let Some(rel) = rel else { return Ok(None) };
            let p = base.join(rel);
            if let Some(s) = scripts.get(&p) {
                return Ok(Some(s.clone()));
            }
            let script = Arc::new(Script::load(&p).map_err(|e| invalid(&p, e.to_string()))?);
            scripts.insert(p, script.clone());
            Ok(Some(script))
        };
        let mut tasks = Vec::with_capacity(file.tasks.len());
        for entry in &file.tasks {
            let env_path = base.join(&entry.env);
            let env = match envs.get(&env_path) {
                Some(e) => e.clone(),
                None => {
                    let e = Arc::new(EnvFixture::load(&env_path)?);
                    envs.insert(env_path, e.clone());
                    e
                }
            };
            tasks.push(SuiteTask {
                spec: env.task(&entry.task)?,
                env,
                script: load_script(&entry.script)?,
                reflector_script: load_script(&entry.reflector_script)?,
            });
        }
        Ok(Suite {
            name: file.name,
            flow,
            flow_path,
            pricing,
            settings: SuiteSettings {
                max_transitions: file.max_transitions,
                max_interactions: file.max_interactions,
                halt_on_stall: file.halt_on_stall,
            },
            tasks,
        })
    }
}

pub type NamedBackends = Vec<(String, Box<dyn LlmBackend>)>;

/// Creates the model backends for one task run. Called once per run so
/// every run gets fresh instances.
pub trait BackendFactory: Sync {
    /// Backends to bind, by name.
    fn executor(&self, task: &SuiteTask) -> Result<NamedBackends, String>;

    fn reflector(&self, task: &SuiteTask) -> Result<Box<dyn LlmBackend>, String>;
}

/// Binds each task's own scripts.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedFactory;

impl BackendFactory for ScriptedFactory {
    fn executor(&self, task: &SuiteTask) -> Result<NamedBackends, String> {
        let script = task
            .script
            .clone()
            .ok_or_else(|| format!("task `{}` has no script", task.key()))?;
        Ok(vec![("default".to_string(), Box::new(ScriptedBackend::new(script)))])
    }

    fn reflector(&self, task: &SuiteTask) -> Result<Box<dyn LlmBackend>, String> {
        let script = task
            .reflector_script
            .clone()
            .ok_or_else(|| format!("task `{}` has no reflector script", task.key()))?;
        Ok(Box::new(ScriptedBackend::new(script)))
    }
}

/// Binds an OpenAI-compatible endpoint as both executor and reflector.
#[derive(Debug, Clone)]
pub struct HttpFactory {
    pub config: HttpConfig,
}

impl BackendFactory for HttpFactory {
    fn executor(&self, _task: &SuiteTask) -> Result<NamedBackends, String> {
        Ok(vec![("default".to_string(), Box::new(HttpBackend::new(self.config.clone())))])
    }

    fn reflector(&self, _task: &SuiteTask) -> Result<Box<dyn LlmBackend>, String> {
        Ok(Box::new(HttpBackend::new(self.config.clone())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub reward: f64,
    pub success: bool,
    /// Environment interactions: observations produced by the task's
    /// environment tool.
    pub turns: usize,
    pub commands_issued: usize,
    pub commands_failed: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost: f64,
    pub exit_state: Option<StateId>,
    pub states_visited: Vec<StateId>,
    pub status: Option<RunStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TaskMetrics {
    fn failed(task: &SuiteTask, error: String) -> Self {
        TaskMetrics {
            task: task.key(),
            reward: 0.0,
            success: false,
            turns: 0,
            commands_issued: 0,
            commands_failed: 0,
            prompt_tokens: 0,
            completion_tokens: 0,
            cost: 0.0,
            exit_state: None,
            states_visited: Vec::new(),
            status: None,
            difficulty: task.spec.difficulty.clone(),
            task_type: task.spec.task_type.clone(),
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub tasks: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tasks: usize,
    pub success_rate: f64,
    pub mean_reward: f64,
    pub mean_turns: f64,
    /// Failed commands over all commands executed by environments.
    pub error_rate: f64,
    pub total_cost: f64,
    pub mean_prompt_tokens: f64,
    pub mean_completion_tokens: f64,
    pub by_difficulty: BTreeMap<String, GroupStats>,
    pub by_task_type: BTreeMap<String, GroupStats>,
    /// Exit state of every failed task, counted.
    pub failed_exit_states: BTreeMap<String, usize>,
}

fn mean(total: f64, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        total / n as f64
    }
}

fn group_by(tasks: &[TaskMetrics], key: impl Fn(&TaskMetrics) -> Option<&str>) -> BTreeMap<String, GroupStats> {
    let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in tasks {
        if let Some(k) = key(t) {
            let e = counts.entry(k.to_string()).or_default();
            e.0 += 1;
            e.1 += t.success as usize;
        }
    }
    counts
        .into_iter()
        .map(|(k, (n, ok))| {
            (
                k,
                GroupStats {
                    tasks: n,
                    success_rate: mean(ok as f64, n),
                },
            )
        })
        .collect()
}

/// Recomputes every aggregate from the per-task entries.
pub fn aggregate(tasks: &[TaskMetrics]) -> Aggregates {
    let n = tasks.len();
    let issued: usize = tasks.iter().map(|t| t.commands_issued).sum();
    let failed: usize = tasks.iter().map(|t| t.commands_failed).sum();
    let mut failed_exit_states = BTreeMap::new();
    for t in tasks.iter().filter(|t| !t.success) {
        let state = t.exit_state.as_ref().map_or("<none>", |s| s.as_str());
        *failed_exit_states.entry(state.to_string()).or_insert(0) += 1;
    }
    Aggregates {
        tasks: n,
        success_rate: mean(tasks.iter().filter(|t| t.success).count() as f64, n),
        mean_reward: mean(tasks.iter().map(|t| t.reward).sum(), n),
        mean_turns: mean(tasks.iter().map(|t| t.turns as f64).sum(), n),
        error_rate: mean(failed as f64, issued),
        total_cost: tasks.iter().map(|t| t.cost).sum(),
        mean_prompt_tokens: mean(tasks.iter().map(|t| t.prompt_tokens as f64).sum(), n),
        mean_completion_tokens: mean(tasks.iter().map(|t| t.completion_tokens as f64).sum(), n),
        by_difficulty: group_by(tasks, |t| t.difficulty.as_deref()),
        by_task_type: group_by(tasks, |t| t.task_type.as_deref()),
        failed_exit_states,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub flow: String,
    pub tasks: Vec<TaskMetrics>,
    pub aggregates: Aggregates,
}

impl SuiteReport {
    pub fn new(suite: impl Into<String>, flow: impl Into<String>, tasks: Vec<TaskMetrics>) -> Self {
        let aggregates = aggregate(&tasks);
        SuiteReport {
            suite: suite.into(),
            flow: flow.into(),
            tasks,
            aggregates,
        }
    }

    /// Plain-text table: one row per task and a summary row.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite {} / flow {}", self.suite, self.flow);
        let _ = writeln!(
            out,
            "{:<28} {:>6} {:>7} {:>6} {:>6} {:>9} {:>9} {:>10}  exit",
            "task", "reward", "success", "turns", "errors", "p-tokens", "c-tokens", "cost"
        );
        for t in &self.tasks {
            let _ = writeln!(
                out,
                "{:<28} {:>6.3} {:>7} {:>6} {:>6} {:>9} {:>9} {:>10.4}  {}",
                t.task,
                t.reward,
                if t.success { "yes" } else { "no" },
                t.turns,
                t.commands_failed,
                t.prompt_tokens,
                t.completion_tokens,
                t.cost,
                t.exit_state.as_ref().map_or("-", |s| s.as_str())
            );
        }
        let a = &self.aggregates;
        let _ = writeln!(
            out,
            "SR {:.2}%  reward {:.3}  turns {:.2}  error {:.2}%  cost ${:.4}  p-tokens {:.1}  c-tokens {:.1}",
            a.success_rate * 100.0,
            a.mean_reward,
            a.mean_turns,
            a.error_rate * 100.0,
            a.total_cost,
            a.mean_prompt_tokens,
            a.mean_completion_tokens
        );
        for (label, groups) in [("difficulty", &a.by_difficulty), ("task type", &a.by_task_type)] {
            for (k, g) in groups {
                let _ = writeln!(out, "  {label} {k}: SR {:.2}% over {}", g.success_rate * 100.0, g.tasks);
            }
        }
        if !a.failed_exit_states.is_empty() {
            let parts: Vec<String> = a.failed_exit_states.iter().map(|(k, v)| format!("{k}:{v}")).collect();
            let _ = writeln!(out, "  failed tasks by exit state: {}", parts.join(" "));
        }
        out
    }
}

/// One task run: its metrics and, when the run started, the full result.
#[derive(Debug, Clone)]
pub struct TaskOutcome {
    pub metrics: TaskMetrics,
    pub run: Option<RunResult>,
}

/// Turns and failed commands counted from a finished run.
pub fn interaction_counts(result: &RunResult, tool: &str, markers: &[String]) -> (usize, usize) {
    let observations: Vec<&str> = result
        .history
        .iter()
        .filter(|m| m.kind == MessageKind::Observation && m.producer == tool)
        .map(|m| m.content.as_str())
        .collect();
    let failed = observations
        .iter()
        .filter(|o| classify_observation(o, markers) == ObservationClass::Error)
        .count();
    (observations.len(), failed)
}

/// Runs one task with fresh environment and backends.
pub fn run_task(
    flow: &FlowDefinition,
    task: &SuiteTask,
    factory: &dyn BackendFactory,
    config: &RunConfig,
    pricing: Option<&PricingTable>,
    preamble: Option<String>,
) -> TaskOutcome {
    let tool_name = task.spec.environment.tool_name();
    let tool = match task.env.make_tool(&task.spec.id) {
        Ok(t) => t,
        Err(e) => return failed_outcome(task, e.to_string()),
    };
    let mut bindings = OutputBindings::new();
    bindings.tools.insert(tool_name.to_string(), tool);
    match factory.executor(task) {
        Ok(backends) => bindings.backends.extend(backends),
        Err(e) => return failed_outcome(task, e),
    }
    let input = TaskInput {
        text: task.spec.question.clone(),
        task_type: task.spec.task_type.clone(),
        preamble,
    };
    let result = match run_flow(flow, input, &mut bindings, config) {
        Ok(r) => r,
        Err(e) => return failed_outcome(task, e.to_string()),
    };
    let reward = bindings.tool(tool_name).and_then(|t| t.reward()).unwrap_or(0.0);
    let (turns, failed) = interaction_counts(&result, tool_name, &flow.error_markers);
    let mut error = result.error.clone();
    let cost = match pricing.map(|p| cost_by_reply_model(&result.replies, p)) {
        Some(Ok(c)) => c,
        Some(Err(e)) => {
            error.get_or_insert_with(|| e.to_string());
            0.0
        }
        None => 0.0,
    };
    let metrics = TaskMetrics {
        task: task.key(),
        reward,
        success: reward == 1.0,
        turns,
        commands_issued: turns,
        commands_failed: failed,
        prompt_tokens: result.prompt_tokens(),
        completion_tokens: result.completion_tokens(),
        cost,
        exit_state: Some(result.exit_state.clone()),
        states_visited: result.visited.clone(),
        status: Some(result.status),
        difficulty: task.spec.difficulty.clone(),
        task_type: task.spec.task_type.clone(),
        error,
    };
    TaskOutcome {
        metrics,
        run: Some(result),
    }
}

fn failed_outcome(task: &SuiteTask, error: String) -> TaskOutcome {
    TaskOutcome {
        metrics: TaskMetrics::failed(task, error),
        run: None,
    }
}

/// Maps `f` over `items` on up to `parallelism` threads, keeping order.
pub(crate) fn parallel_map<T: Sync, R: Send>(
    items: &[T],
    parallelism: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    if parallelism <= 1 {
        return items.iter().map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
        Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
        Err(_) => items.iter().map(f).collect(),
    }
}

/// A suite run: the report plus every task's outcome, in suite order.
#[derive(Debug, Clone)]
pub struct SuiteRun {
    pub report: SuiteReport,
    pub outcomes: Vec<TaskOutcome>,
}

/// Runs every task of the suite, up to `parallelism` at a time.
pub fn run_suite(
    suite: &Suite,
    factory: &dyn BackendFactory,
    base: &RunConfig,
    parallelism: usize,
) -> SuiteRun {
    let outcomes = parallel_map(&suite.tasks, parallelism, |task| {
        let config = suite.settings.config_for(base, task.spec.environment);
        run_task(&suite.flow, task, factory, &config, suite.pricing.as_ref(), None)
    });
    let report = SuiteReport::new(
        suite.name.clone(),
        suite.flow.metadata.name.clone(),
        outcomes.iter().map(|o| o.metrics.clone()).collect(),
    );
    SuiteRun { report, outcomes }
}
