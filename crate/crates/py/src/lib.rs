//! Python bindings for the StateFlow engine.
//!
//! Structured results (reports, validation findings) cross the boundary as
//! plain dicts and lists decoded from their JSON form.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use stateflow::backend::Script;
use stateflow::env::EnvFixture;
use stateflow::eval::{run_suite as run_suite_impl, run_task as run_task_impl, ScriptedFactory, Suite, SuiteTask};
use stateflow::fixtures::{check_fixtures as check_fixtures_impl, FixtureManifest};
use stateflow::flow::{FlowDefinition, RunConfig};
use stateflow::flowdef::{ablate, load_flow, parse_flow, serialize_flow, topology, validate_flow, Rewire};
use stateflow::reflexion::{default_reflector, run_with_reflexion};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn os_err(e: impl std::fmt::Display) -> PyErr {
    PyOSError::new_err(e.to_string())
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(value_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn config(max_transitions: Option<usize>, assembly: Option<&str>) -> PyResult<RunConfig> {
    let mut c = RunConfig::default();
    if let Some(m) = max_transitions {
        if m == 0 {
            return Err(PyValueError::new_err("max_transitions must be at least 1"));
        }
        c.max_transitions = m;
    }
    c.assembly_override = assembly.map(|a| a.parse()).transpose().map_err(value_err)?;
    Ok(c)
}

fn load_suite(path: &str) -> PyResult<Suite> {
    Suite::load(Path::new(path)).map_err(os_err)
}

/// A flow definition: states, transition rules and output functions.
#[pyclass(name = "Flow", module = "stateflow_py", frozen)]
pub struct PyFlow {
    inner: FlowDefinition,
}

#[pymethods]
impl PyFlow {
    /// Loads a flow file, resolving prompt references relative to it.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_flow(&path).map(|inner| PyFlow { inner }).map_err(os_err)
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        parse_flow(text).map(|inner| PyFlow { inner }).map_err(value_err)
    }

    fn to_json(&self) -> String {
        serialize_flow(&self.inner)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.metadata.name.clone()
    }

    #[getter]
    fn initial(&self) -> String {
        self.inner.initial.to_string()
    }

    #[getter]
    fn finals(&self) -> Vec<String> {
        self.inner.finals.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn states(&self) -> Vec<String> {
        self.inner.states.iter().map(|s| s.id.to_string()).collect()
    }

    /// Returns `{"errors": [...], "warnings": [...]}`.
    fn validate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &validate_flow(&self.inner))
    }

    fn is_runnable(&self) -> bool {
        validate_flow(&self.inner).is_runnable()
    }

    /// Every edge as `(from, "rule i" | "default", to)`.
    fn topology(&self) -> Vec<(String, String, String)> {
        topology(&self.inner).into_iter().collect()
    }

    /// Removes a state; `rewires` is the JSON rewire list.
    fn ablate(&self, remove: &str, rewires: &str) -> PyResult<Self> {
        let rewires: Vec<Rewire> = serde_json::from_str(rewires).map_err(value_err)?;
        ablate(&self.inner, remove, &rewires)
            .map(|inner| PyFlow { inner })
            .map_err(value_err)
    }

    fn __len__(&self) -> usize {
        self.inner.states.len()
    }

    fn __repr__(&self) -> String {
        format!("Flow({:?}, {} states)", self.inner.metadata.name, self.inner.states.len())
    }
}

/// Runs one environment task with a scripted backend.
///
/// Returns a dict with the task metrics, the run status, exit state,
/// visited states and the JSONL trace.
#[pyfunction]
#[pyo3(signature = (flow, env, task, script, max_transitions=None, assembly=None))]
fn run_task<'py>(
    py: Python<'py>,
    flow: &PyFlow,
    env: PathBuf,
    task: &str,
    script: PathBuf,
    max_transitions: Option<usize>,
    assembly: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let fixture = Arc::new(EnvFixture::load(&env).map_err(os_err)?);
    let script = Arc::new(Script::load(&script).map_err(os_err)?);
    let task = SuiteTask::from_fixture(fixture, task, Some(script)).map_err(value_err)?;
    let mut c = config(max_transitions, assembly)?;
    c.record_trace = true;
    let outcome = py.detach(|| run_task_impl(&flow.inner, &task, &ScriptedFactory, &c, None, None));
    let run = outcome
        .run
        .ok_or_else(|| value_err(outcome.metrics.error.clone().unwrap_or_else(|| "run did not start".into())))?;
    let summary = serde_json::json!({
        "metrics": outcome.metrics,
        "status": run.status.to_string(),
        "exit_state": run.exit_state.to_string(),
        "transitions_taken": run.transitions_taken,
        "visited": run.visited.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        "error": run.error.as_ref().map(|e| e.to_string()),
        "trace": run.trace.to_jsonl(),
    });
    to_py(py, &summary)
}

/// Runs a suite file with each task's scripts and returns the report.
#[pyfunction]
#[pyo3(signature = (suite, parallelism=1, max_transitions=None, assembly=None))]
fn run_suite<'py>(
    py: Python<'py>,
    suite: &str,
    parallelism: usize,
    max_transitions: Option<usize>,
    assembly: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let suite = load_suite(suite)?;
    let c = config(max_transitions, assembly)?;
    let run = py.detach(|| run_suite_impl(&suite, &ScriptedFactory, &c, parallelism.max(1)));
    to_py(py, &run.report)
}

/// Repeats a suite with reflection between trials and returns the
/// iteration report.
#[pyfunction]
#[pyo3(signature = (suite, trials=6, parallelism=1))]
fn reflect<'py>(py: Python<'py>, suite: &str, trials: usize, parallelism: usize) -> PyResult<Bound<'py, PyAny>> {
    let suite = load_suite(suite)?;
    let report = py.detach(|| {
        run_with_reflexion(
            &suite,
            &ScriptedFactory,
            &default_reflector(),
            &RunConfig::default(),
            trials,
            parallelism.max(1),
        )
    });
    to_py(py, &report)
}

/// Checks every manifest entry under `root`; returns the problems found.
#[pyfunction]
#[pyo3(signature = (root, manifest=None))]
fn check_fixtures(root: PathBuf, manifest: Option<PathBuf>) -> PyResult<Vec<String>> {
    let manifest = manifest.unwrap_or_else(|| root.join("fixtures/MANIFEST.json"));
    let m = FixtureManifest::load(&manifest).map_err(os_err)?;
    let report = check_fixtures_impl(&root, &m);
    Ok(report.problems.iter().map(|p| p.to_string()).collect())
}

#[pymodule]
fn stateflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFlow>()?;
    m.add_function(wrap_pyfunction!(run_task, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(reflect, m)?)?;
    m.add_function(wrap_pyfunction!(check_fixtures, m)?)?;
    Ok(())
}
