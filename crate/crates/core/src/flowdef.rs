//! The JSON flow-definition format, the static validator and the state
//! ablation used to derive reduced flows.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{FlowDefinition, FlowMetadata, StateId, StateSpec, DEFAULT_ERROR_MARKERS};
use crate::output::{OutputKind, PromptError, TemplateSpec};
use crate::transition::{check_pattern, Predicate};

fn default_markers() -> Vec<String> {
    DEFAULT_ERROR_MARKERS.iter().map(|s| s.to_string()).collect()
}

/// Serialized form of a flow. Key order here is the key order on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowDocument {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub initial: StateId,
    pub finals: Vec<StateId>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub templates: BTreeMap<String, TemplateSpec>,
    #[serde(default = "default_markers")]
    pub error_markers: Vec<String>,
    pub states: Vec<StateSpec>,
}

impl From<FlowDocument> for FlowDefinition {
    fn from(doc: FlowDocument) -> Self {
        FlowDefinition {
            metadata: FlowMetadata {
                name: doc.name,
                version: doc.version,
                description: doc.description,
            },
            states: doc.states,
            initial: doc.initial,
            finals: doc.finals,
            templates: doc.templates,
            error_markers: doc.error_markers,
        }
    }
}

impl From<&FlowDefinition> for FlowDocument {
    fn from(flow: &FlowDefinition) -> Self {
        FlowDocument {
            name: flow.metadata.name.clone(),
            version: flow.metadata.version.clone(),
            description: flow.metadata.description.clone(),
            initial: flow.initial.clone(),
            finals: flow.finals.clone(),
            templates: flow.templates.clone(),
            error_markers: flow.error_markers.clone(),
            states: flow.states.clone(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FlowParseError {
    #[error("syntax error at line {line}, column {col}: {msg}")]
    SyntaxError { line: usize, col: usize, msg: String },
    #[error("unknown field at line {line}, column {col}: {msg}")]
    UnknownField { line: usize, col: usize, msg: String },
    #[error("duplicate state `{0}`")]
    DuplicateState(String),
    #[error("schema error at line {line}, column {col}: {msg}")]
    Schema { line: usize, col: usize, msg: String },
}

impl FlowParseError {
    fn from_json(err: serde_json::Error) -> Self {
        let (line, col) = (err.line(), err.column());
        let full = err.to_string();
        let msg = match full.rfind(" at line ") {
            Some(i) => full[..i].to_string(),
            None => full,
        };
        match err.classify() {
            serde_json::error::Category::Syntax | serde_json::error::Category::Eof => {
                FlowParseError::SyntaxError { line, col, msg }
            }
            _ if msg.starts_with("unknown field") => FlowParseError::UnknownField { line, col, msg },
            _ => FlowParseError::Schema { line, col, msg },
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read `{path}`: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        source: FlowParseError,
    },
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Parses a flow document. Prompt file references are left unresolved.
pub fn parse_flow(text: &str) -> Result<FlowDefinition, FlowParseError> {
    let doc: FlowDocument = serde_json::from_str(text).map_err(FlowParseError::from_json)?;
    let mut seen = BTreeSet::new();
    for state in &doc.states {
        if !seen.insert(state.id.as_str()) {
            return Err(FlowParseError::DuplicateState(state.id.to_string()));
        }
    }
    Ok(doc.into())
}

/// Pretty JSON with a trailing newline.
pub fn serialize_flow(flow: &FlowDefinition) -> String {
    let mut text = serde_json::to_string_pretty(&FlowDocument::from(flow)).expect("flow documents always serialize");
    text.push('\n');
    text
}

/// Loads prompt files for every agent, relative to `base`.
pub fn resolve_prompts(flow: &mut FlowDefinition, base: &Path) -> Result<(), PromptError> {
    for state in &mut flow.states {
        for output in &mut state.outputs {
            if let Some(agent) = &mut output.agent {
                agent.resolve_prompts(base)?;
            }
        }
    }
    Ok(())
}

/// Reads, parses and resolves prompt files relative to the document's
/// directory.
pub fn load_flow(path: &Path) -> Result<FlowDefinition, LoadError> {
    let text = std::fs::read_to_string(path).map_err(|source| LoadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut flow = parse_flow(&text).map_err(|source| LoadError::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    resolve_prompts(&mut flow, base)?;
    Ok(flow)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Code {
    DuplicateState,
    InvalidStateId,
    InitialNotInStates,
    FinalsEmpty,
    FinalsNotSubset,
    DanglingTarget,
    NonFinalMissingDefault,
    FinalHasRules,
    InvalidRegex,
    InvalidJudge,
    MalformedOutput,
    UnreachableState,
    NoPathToFinal,
    EmptyOutputsOnNonTerminal,
}

impl Code {
    pub const ALL: [Code; 14] = [
        Code::DuplicateState,
        Code::InvalidStateId,
        Code::InitialNotInStates,
        Code::FinalsEmpty,
        Code::FinalsNotSubset,
        Code::DanglingTarget,
        Code::NonFinalMissingDefault,
        Code::FinalHasRules,
        Code::InvalidRegex,
        Code::InvalidJudge,
        Code::MalformedOutput,
        Code::UnreachableState,
        Code::NoPathToFinal,
        Code::EmptyOutputsOnNonTerminal,
    ];

    pub fn is_warning(self) -> bool {
        matches!(
            self,
            Code::UnreachableState | Code::NoPathToFinal | Code::EmptyOutputsOnNonTerminal
        )
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: Code,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<StateId>,
    pub detail: String,
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.state {
            Some(s) => write!(f, "{} [{}]: {}", self.code, s, self.detail),
            None => write!(f, "{}: {}", self.code, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub errors: Vec<Finding>,
    pub warnings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_runnable(&self) -> bool {
        self.errors.is_empty()
    }

    /// Every distinct code reported, errors and warnings alike.
    pub fn codes(&self) -> BTreeSet<Code> {
        self.errors.iter().chain(&self.warnings).map(|f| f.code).collect()
    }

    fn report(&mut self, code: Code, state: Option<&StateId>, detail: impl Into<String>) {
        let finding = Finding {
            code,
            state: state.cloned(),
            detail: detail.into(),
        };
        if code.is_warning() {
            self.warnings.push(finding);
        } else {
            self.errors.push(finding);
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "{} error(s), {} warning(s)", self.errors.len(), self.warnings.len())
    }
}

/// Outgoing edges of a state: every rule target (all judge candidates
/// included) and the default.
fn successors(state: &StateSpec) -> Vec<&StateId> {
    let mut out: Vec<&StateId> = state.rules.iter().flat_map(|r| r.targets()).collect();
    out.extend(state.default.as_ref());
    out
}

fn reach<'a>(start: &[&'a str], next: impl Fn(&'a str) -> Vec<&'a str>) -> BTreeSet<&'a str> {
    let mut seen: BTreeSet<&str> = start.iter().copied().collect();
    let mut queue: VecDeque<&str> = start.iter().copied().collect();
    while let Some(s) = queue.pop_front() {
        for n in next(s) {
            if seen.insert(n) {
                queue.push_back(n);
            }
        }
    }
    seen
}

fn check_predicate(
    report: &mut ValidationReport,
    state: &StateSpec,
    rule_index: usize,
    predicate: &Predicate,
    target: &StateId,
    names: &BTreeSet<&str>,
) {
    for pattern in predicate.regex_patterns() {
        if let Err(e) = check_pattern(pattern) {
            report.report(
                Code::InvalidRegex,
                Some(&state.id),
                format!("rule {rule_index}: pattern `{pattern}` does not compile: {e}"),
            );
        }
    }
    if predicate.has_nested_judge() {
        report.report(
            Code::InvalidJudge,
            Some(&state.id),
            format!("rule {rule_index}: a judge cannot be nested inside All"),
        );
    }
    let Some(judge) = predicate.judge() else {
        return;
    };
    let mut problems = Vec::new();
    let mut problem = |detail: String| problems.push(detail);
    if judge.candidates.is_empty() {
        problem("judge has no candidates".into());
    }
    if !judge.candidates.contains(target) {
        problem(format!("target `{target}` is not a judge candidate"));
    }
    let fallback_ok = judge.candidates.contains(&judge.fallback) || state.default.as_ref() == Some(&judge.fallback);
    if !fallback_ok {
        problem(format!(
            "fallback `{}` is neither a candidate nor the state default",
            judge.fallback
        ));
    }
    if judge.instruction.trim().is_empty() {
        problem("judge instruction is empty".into());
    }
    let mut seen = BTreeSet::new();
    for c in &judge.candidates {
        if !seen.insert(c) {
            problem(format!("candidate `{c}` listed twice"));
        }
    }
    for detail in problems {
        report.report(Code::InvalidJudge, Some(&state.id), format!("rule {rule_index}: {detail}"));
    }
    for c in &judge.candidates {
        if !names.contains(c.as_str()) {
            report.report(
                Code::DanglingTarget,
                Some(&state.id),
                format!("rule {rule_index}: judge candidate `{c}` is not a state"),
            );
        }
    }
}

/// Static checks. A flow with no errors can be run; warnings flag likely
/// mistakes that are still legal.
pub fn validate_flow(flow: &FlowDefinition) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut names = BTreeSet::new();
    for state in &flow.states {
        if !names.insert(state.id.as_str()) {
            report.report(Code::DuplicateState, Some(&state.id), "state declared more than once");
        }
        if !state.id.is_well_formed() {
            report.report(
                Code::InvalidStateId,
                Some(&state.id),
                format!("`{}` is not a valid state name", state.id),
            );
        }
    }
    if !names.contains(flow.initial.as_str()) {
        report.report(
            Code::InitialNotInStates,
            None,
            format!("initial state `{}` is not declared", flow.initial),
        );
    }
    if flow.finals.is_empty() {
        report.report(Code::FinalsEmpty, None, "no final states");
    }
    for f in &flow.finals {
        if !names.contains(f.as_str()) {
            report.report(Code::FinalsNotSubset, None, format!("final state `{f}` is not declared"));
        }
    }

    for state in &flow.states {
        let is_final = flow.is_final(state.id.as_str());
        if is_final {
            if !state.rules.is_empty() || state.default.is_some() {
                report.report(Code::FinalHasRules, Some(&state.id), "final states take no transitions");
            }
        } else if state.default.is_none() {
            report.report(Code::NonFinalMissingDefault, Some(&state.id), "non-final state has no default");
        }
        for (i, rule) in state.rules.iter().enumerate() {
            if !names.contains(rule.target.as_str()) {
                report.report(
                    Code::DanglingTarget,
                    Some(&state.id),
                    format!("rule {i} targets unknown state `{}`", rule.target),
                );
            }
            check_predicate(&mut report, state, i, &rule.when, &rule.target, &names);
        }
        if let Some(d) = &state.default {
            if !names.contains(d.as_str()) {
                report.report(
                    Code::DanglingTarget,
                    Some(&state.id),
                    format!("default targets unknown state `{d}`"),
                );
            }
        }
        for output in &state.outputs {
            if let Some(problem) = output.shape_problem() {
                report.report(
                    Code::MalformedOutput,
                    Some(&state.id),
                    format!("output `{}`: {problem}", output.name),
                );
                continue;
            }
            let template = match output.kind {
                OutputKind::Agent => output.agent.as_ref().and_then(|a| a.template.as_ref()),
                OutputKind::Tool => output.tool.as_ref().and_then(|t| t.template.as_ref()),
                OutputKind::Prompter => None,
            };
            if let Some(name) = template {
                if flow.template(name).is_none() {
                    report.report(
                        Code::MalformedOutput,
                        Some(&state.id),
                        format!("output `{}` uses unknown template `{name}`", output.name),
                    );
                }
            }
        }
        if !is_final && state.outputs.is_empty() {
            report.report(
                Code::EmptyOutputsOnNonTerminal,
                Some(&state.id),
                "non-final state produces no output",
            );
        }
    }

    if names.contains(flow.initial.as_str()) {
        let by_name: BTreeMap<&str, &StateSpec> = flow.states.iter().map(|s| (s.id.as_str(), s)).collect();
        let forward = |s: &str| -> Vec<&str> {
            by_name
                .get(s)
                .map(|st| successors(st).into_iter().map(|t| t.as_str()).collect())
                .unwrap_or_default()
        };
        let reachable = reach(&[flow.initial.as_str()], forward);
        for state in &flow.states {
            if !reachable.contains(state.id.as_str()) {
                report.report(
                    Code::UnreachableState,
                    Some(&state.id),
                    format!("not reachable from `{}`", flow.initial),
                );
            }
        }
        let mut preds: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for state in &flow.states {
            for t in successors(state) {
                preds.entry(t.as_str()).or_default().push(state.id.as_str());
            }
        }
        let finals: Vec<&str> = flow.finals.iter().map(|f| f.as_str()).collect();
        let co_reachable = reach(&finals, |s| preds.get(s).cloned().unwrap_or_default());
        for state in &flow.states {
            let id = state.id.as_str();
            if reachable.contains(id) && !co_reachable.contains(id) {
                report.report(Code::NoPathToFinal, Some(&state.id), "no final state is reachable from here");
            }
        }
    }
    report
}

/// One outgoing edge of a state: a rule by index, or the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeRef {
    Rule(usize),
    Default,
}

impl fmt::Display for EdgeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeRef::Rule(i) => write!(f, "rule {i}"),
            EdgeRef::Default => f.write_str("default"),
        }
    }
}

impl Serialize for EdgeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            EdgeRef::Rule(i) => s.serialize_u64(*i as u64),
            EdgeRef::Default => s.serialize_str("default"),
        }
    }
}

impl<'de> Deserialize<'de> for EdgeRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(i) => Ok(EdgeRef::Rule(i)),
            Repr::Text(t) if t == "default" => Ok(EdgeRef::Default),
            Repr::Text(t) => Err(serde::de::Error::custom(format!(
                "edge must be a rule index or \"default\", got `{t}`"
            ))),
        }
    }
}

/// Redirects one edge that pointed at the removed state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rewire {
    pub from: StateId,
    pub edge: EdgeRef,
    pub to: StateId,
}

impl Rewire {
    pub fn new(from: impl Into<String>, edge: EdgeRef, to: impl Into<String>) -> Self {
        Rewire {
            from: StateId::new(from),
            edge,
            to: StateId::new(to),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AblateError {
    #[error("state `{0}` does not exist")]
    UnknownState(String),
    #[error("cannot remove `{0}`: it is the initial state or a final state")]
    CannotRemoveInitialOrFinal(String),
    #[error("edges into the removed state are not rewired: {}", .0.join(", "))]
    IncompleteRewire(Vec<String>),
    #[error("`{from}` {edge} does not lead to the removed state")]
    UnknownEdge { from: String, edge: EdgeRef },
    #[error("rewire target `{0}` is not a remaining state")]
    InvalidTarget(String),
    #[error("edge `{from}` {edge} is rewired more than once")]
    DuplicateRewire { from: String, edge: EdgeRef },
    #[error("ablated flow is invalid: {}", .0.iter().map(|f| f.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Finding>),
}

/// Edges of the remaining states that lead into `removed`.
pub fn inbound_edges(flow: &FlowDefinition, removed: &str) -> Vec<(StateId, EdgeRef)> {
    let mut out = Vec::new();
    for state in flow.states.iter().filter(|s| s.id.as_str() != removed) {
        for (i, rule) in state.rules.iter().enumerate() {
            if rule.targets().iter().any(|t| t.as_str() == removed) {
                out.push((state.id.clone(), EdgeRef::Rule(i)));
            }
        }
        if state.default.as_ref().is_some_and(|d| d.as_str() == removed) {
            out.push((state.id.clone(), EdgeRef::Default));
        }
    }
    out
}

/// Removes a state and redirects every edge that led into it. The result
/// must validate without errors.
pub fn ablate(flow: &FlowDefinition, remove: &str, rewires: &[Rewire]) -> Result<FlowDefinition, AblateError> {
    if flow.state(remove).is_none() {
        return Err(AblateError::UnknownState(remove.to_string()));
    }
    if flow.initial.as_str() == remove || flow.is_final(remove) {
        return Err(AblateError::CannotRemoveInitialOrFinal(remove.to_string()));
    }
    let inbound: BTreeSet<(StateId, EdgeRef)> = inbound_edges(flow, remove).into_iter().collect();
    let mut plan: BTreeMap<(StateId, EdgeRef), StateId> = BTreeMap::new();
    for r in rewires {
        let key = (r.from.clone(), r.edge);
        if !inbound.contains(&key) {
            return Err(AblateError::UnknownEdge {
                from: r.from.to_string(),
                edge: r.edge,
            });
        }
        if r.to.as_str() == remove || flow.state(r.to.as_str()).is_none() {
            return Err(AblateError::InvalidTarget(r.to.to_string()));
        }
        if plan.insert(key, r.to.clone()).is_some() {
            return Err(AblateError::DuplicateRewire {
                from: r.from.to_string(),
                edge: r.edge,
            });
        }
    }
    let missing: Vec<String> = inbound
        .iter()
        .filter(|k| !plan.contains_key(*k))
        .map(|(s, e)| format!("{s} {e}"))
        .collect();
    if !missing.is_empty() {
        return Err(AblateError::IncompleteRewire(missing));
    }

    let mut out = flow.clone();
    out.states.retain(|s| s.id.as_str() != remove);
    for ((from, edge), to) in plan {
        let state = out.state_mut(from.as_str()).expect("inbound edges come from remaining states");
        match edge {
            EdgeRef::Default => state.default = Some(to),
            EdgeRef::Rule(i) => {
                let rule = &mut state.rules[i];
                let swap = |s: &mut StateId| {
                    if s.as_str() == remove {
                        *s = to.clone();
                    }
                };
                swap(&mut rule.target);
                if let Predicate::LlmJudge(judge) = &mut rule.when {
                    judge.candidates.iter_mut().for_each(swap);
                    swap(&mut judge.fallback);
                    let mut seen = BTreeSet::new();
                    judge.candidates.retain(|c| seen.insert(c.clone()));
                }
            }
        }
    }
    out.metadata.name = format!("{}_no_{}", flow.metadata.name, remove.to_lowercase());
    out.metadata.description = format!("{} with state {} removed", flow.metadata.name, remove);
    let report = validate_flow(&out);
    if !report.is_runnable() {
        return Err(AblateError::Invalid(report.errors));
    }
    Ok(out)
}

/// The flow's edge set as (from, edge, to) triples, for comparing
/// topologies independent of prompts.
pub fn topology(flow: &FlowDefinition) -> BTreeSet<(String, String, String)> {
    let mut out = BTreeSet::new();
    for state in &flow.states {
        for (i, rule) in state.rules.iter().enumerate() {
            for t in rule.targets() {
                out.insert((state.id.to_string(), format!("rule {i}"), t.to_string()));
            }
        }
        if let Some(d) = &state.default {
            out.insert((state.id.to_string(), "default".into(), d.to_string()));
        }
    }
    out
}
