//! Output functions: the things a state runs on entry. Each one reads the
//! context history and yields exactly one new message.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, BackendReply, LlmBackend, PromptPayload, Turn};
use crate::flow::{ContextHistory, MessageKind};

/// Producer tag on instructions appended to the history in SF_Chat mode.
pub const PRODUCER_SF_CHAT: &str = "sf-chat-instruction";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Assembly {
    /// Instruction goes in the agent's own system message; the history is
    /// rendered as one completion-style user transcript.
    #[default]
    #[serde(rename = "system")]
    SystemMessage,
    /// Instruction is appended to the history as a user message and the
    /// history is rendered as a conversation.
    #[serde(rename = "sfchat")]
    SfChat,
}

impl std::str::FromStr for Assembly {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "system" => Ok(Assembly::SystemMessage),
            "sfchat" => Ok(Assembly::SfChat),
            other => Err(format!("unknown assembly mode `{other}` (expected system|sfchat)")),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("prompt file `{0}` has not been resolved")]
    Unresolved(String),
    #[error("cannot read prompt file `{path}`: {reason}")]
    Unreadable { path: String, reason: String },
}

/// Prompt text given inline, by a file reference relative to the flow
/// document, or as parts concatenated with newlines.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptText {
    Inline(String),
    File {
        file: String,
        #[serde(skip)]
        resolved: Option<String>,
    },
    Parts(Vec<PromptText>),
}

impl PartialEq for PromptText {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (PromptText::Inline(a), PromptText::Inline(b)) => a == b,
            (PromptText::File { file: a, .. }, PromptText::File { file: b, .. }) => a == b,
            (PromptText::Parts(a), PromptText::Parts(b)) => a == b,
            _ => false,
        }
    }
}

impl From<&str> for PromptText {
    fn from(s: &str) -> Self {
        PromptText::Inline(s.to_string())
    }
}

impl From<String> for PromptText {
    fn from(s: String) -> Self {
        PromptText::Inline(s)
    }
}

impl PromptText {
    pub fn file(path: impl Into<String>) -> Self {
        PromptText::File {
            file: path.into(),
            resolved: None,
        }
    }

    pub fn text(&self) -> Result<String, PromptError> {
        match self {
            PromptText::Inline(s) => Ok(s.clone()),
            PromptText::File { file, resolved } => resolved
                .clone()
                .ok_or_else(|| PromptError::Unresolved(file.clone())),
            PromptText::Parts(parts) => {
                let texts = parts.iter().map(|p| p.text()).collect::<Result<Vec<_>, _>>()?;
                Ok(texts.join("\n"))
            }
        }
    }

    /// Loads every file reference relative to `base`.
    pub fn resolve(&mut self, base: &Path) -> Result<(), PromptError> {
        match self {
            PromptText::Inline(_) => Ok(()),
            PromptText::File { file, resolved } => {
                let path = base.join(&*file);
                let text = std::fs::read_to_string(&path).map_err(|e| PromptError::Unreadable {
                    path: path.display().to_string(),
                    reason: e.to_string(),
                })?;
                *resolved = Some(text.trim_end_matches('\n').to_string());
                Ok(())
            }
            PromptText::Parts(parts) => parts.iter_mut().try_for_each(|p| p.resolve(base)),
        }
    }

    /// File references, for fixture checks.
    pub fn files(&self) -> Vec<&str> {
        match self {
            PromptText::Inline(_) => vec![],
            PromptText::File { file, .. } => vec![file.as_str()],
            PromptText::Parts(parts) => parts.iter().flat_map(|p| p.files()).collect(),
        }
    }

    pub fn is_blank(&self) -> bool {
        match self {
            PromptText::Inline(s) => s.trim().is_empty(),
            PromptText::File { file, .. } => file.trim().is_empty(),
            PromptText::Parts(parts) => parts.iter().all(|p| p.is_blank()),
        }
    }
}

/// A response-format contract: the field labels an agent is told to use.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thought: Option<String>,
    pub action: String,
    /// Command wrapper such as `execute` in `execute[...]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wrapper: Option<String>,
}

impl TemplateSpec {
    pub fn builtin(name: &str) -> Option<TemplateSpec> {
        let (thought, wrapper) = match name {
            "thought_action" => (true, false),
            "thought_action_execute" => (true, true),
            "action_only" => (false, false),
            _ => return None,
        };
        Some(TemplateSpec {
            thought: thought.then(|| "Thought".to_string()),
            action: "Action".to_string(),
            wrapper: wrapper.then(|| "execute".to_string()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ExtractedAction {
    pub thought: Option<String>,
    pub action: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no `{label}:` field found in response")]
pub struct NoActionFound {
    pub label: String,
}

fn field_regex(label: &str) -> Regex {
    Regex::new(&format!(r"(?m)^[ \t]*{}(?:[ \t]+\d+)?[ \t]*:[ \t]*", regex::escape(label)))
        .expect("field regex is valid")
}

/// Pulls the committed action (and optional thought) out of a model
/// response. The last action field wins; a wrapper such as `execute[...]`
/// is peeled off, possibly spanning lines.
pub fn extract_action(response: &str, template: &TemplateSpec) -> Result<ExtractedAction, NoActionFound> {
    let not_found = || NoActionFound {
        label: template.action.clone(),
    };
    let action_re = field_regex(&template.action);
    let m = action_re.find_iter(response).last().ok_or_else(not_found)?;
    let rest = &response[m.end()..];
    let action = match &template.wrapper {
        Some(wrapper) => match wrapped_payload(rest, wrapper) {
            Some(inner) => inner,
            None => first_line(rest),
        },
        None => first_line(rest),
    };
    let action = action.trim().to_string();
    if action.is_empty() {
        return Err(not_found());
    }
    let thought = template.thought.as_ref().and_then(|label| {
        let head = &response[..m.start()];
        field_regex(label)
            .find_iter(head)
            .last()
            .map(|t| first_line(&head[t.end()..]).trim().to_string())
            .filter(|t| !t.is_empty())
    });
    Ok(ExtractedAction { thought, action })
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or("").to_string()
}

/// `execute[ ... ]` with bracket balancing; nested wrappers are peeled too.
fn wrapped_payload(text: &str, wrapper: &str) -> Option<String> {
    let open = format!("{wrapper}[");
    let mut current = text.trim_start().to_string();
    let mut peeled = false;
    while current.to_ascii_lowercase().starts_with(&open.to_ascii_lowercase()) {
        let body = &current[open.len()..];
        let mut depth = 1usize;
        let mut end = None;
        for (i, c) in body.char_indices() {
            match c {
                '[' => depth += 1,
                ']' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(i);
                        break;
                    }
                }
                _ => {}
            }
        }
        current = match end {
            Some(i) => body[..i].trim().to_string(),
            None => body.lines().next().unwrap_or("").trim().to_string(),
        };
        peeled = true;
    }
    peeled.then_some(current)
}

/// A tool call: either a fixed input or an argument extracted from the last
/// model response with a named template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolCall {
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
}

fn default_backend() -> String {
    "default".to_string()
}

/// An LLM agent: one instruction, how its context is assembled, the
/// response format it is asked for, and the backend it calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub instruction: PromptText,
    /// Instruction overrides keyed by task type.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub variants: BTreeMap<String, PromptText>,
    #[serde(default)]
    pub assembly: Assembly,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default = "default_backend")]
    pub backend: String,
    /// Store the response (its action field when a template is set) as a
    /// run variable under this name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capture: Option<String>,
}

impl AgentSpec {
    pub fn new(instruction: impl Into<PromptText>) -> Self {
        AgentSpec {
            instruction: instruction.into(),
            variants: BTreeMap::new(),
            assembly: Assembly::SystemMessage,
            template: None,
            backend: default_backend(),
            capture: None,
        }
    }

    pub fn with_assembly(mut self, assembly: Assembly) -> Self {
        self.assembly = assembly;
        self
    }

    pub fn with_template(mut self, template: impl Into<String>) -> Self {
        self.template = Some(template.into());
        self
    }

    pub fn with_backend(mut self, backend: impl Into<String>) -> Self {
        self.backend = backend.into();
        self
    }

    pub fn instruction_for(&self, task_type: Option<&str>) -> Result<String, PromptError> {
        match task_type.and_then(|t| self.variants.get(t)) {
            Some(variant) => variant.text(),
            None => self.instruction.text(),
        }
    }

    fn prompts_mut(&mut self) -> impl Iterator<Item = &mut PromptText> {
        std::iter::once(&mut self.instruction).chain(self.variants.values_mut())
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptText> {
        std::iter::once(&self.instruction).chain(self.variants.values())
    }

    pub fn resolve_prompts(&mut self, base: &Path) -> Result<(), PromptError> {
        self.prompts_mut().try_for_each(|p| p.resolve(base))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputKind {
    Agent,
    Tool,
    Prompter,
}

/// One output function. Exactly one of `agent`/`tool`/`prompter` is set,
/// matching `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputFunctionSpec {
    pub name: String,
    pub kind: OutputKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent: Option<AgentSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool: Option<ToolCall>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompter: Option<String>,
}

impl OutputFunctionSpec {
    pub fn agent(name: impl Into<String>, agent: AgentSpec) -> Self {
        OutputFunctionSpec {
            name: name.into(),
            kind: OutputKind::Agent,
            agent: Some(agent),
            tool: None,
            prompter: None,
        }
    }

    pub fn tool(name: impl Into<String>, tool: impl Into<String>, template: impl Into<String>) -> Self {
        OutputFunctionSpec {
            name: name.into(),
            kind: OutputKind::Tool,
            agent: None,
            tool: Some(ToolCall {
                tool: tool.into(),
                template: Some(template.into()),
                input: None,
            }),
            prompter: None,
        }
    }

    pub fn fixed_tool(name: impl Into<String>, tool: impl Into<String>, input: impl Into<String>) -> Self {
        OutputFunctionSpec {
            name: name.into(),
            kind: OutputKind::Tool,
            agent: None,
            tool: Some(ToolCall {
                tool: tool.into(),
                template: None,
                input: Some(input.into()),
            }),
            prompter: None,
        }
    }

    pub fn prompter(name: impl Into<String>, text: impl Into<String>) -> Self {
        OutputFunctionSpec {
            name: name.into(),
            kind: OutputKind::Prompter,
            agent: None,
            tool: None,
            prompter: Some(text.into()),
        }
    }

    /// Problems with the payload/kind pairing, if any.
    pub fn shape_problem(&self) -> Option<String> {
        let present = [
            (OutputKind::Agent, self.agent.is_some()),
            (OutputKind::Tool, self.tool.is_some()),
            (OutputKind::Prompter, self.prompter.is_some()),
        ];
        let count = present.iter().filter(|(_, p)| *p).count();
        if count != 1 {
            return Some(format!("expected exactly one payload, found {count}"));
        }
        if !present.iter().any(|(k, p)| *p && *k == self.kind) {
            return Some(format!("payload does not match kind {:?}", self.kind));
        }
        if let Some(agent) = &self.agent {
            if agent.instruction.is_blank() {
                return Some("agent instruction is empty".into());
            }
        }
        if let Some(tool) = &self.tool {
            if tool.template.is_some() == tool.input.is_some() {
                return Some("tool call needs exactly one of `template` or `input`".into());
            }
        }
        None
    }
}

/// What a tool returns for one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToolOutput {
    pub observation: String,
    /// The environment considers the task finished.
    pub done: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("tool failure: {0}")]
pub struct ToolError(pub String);

/// An external tool or environment callable from a state.
pub trait Tool: Send {
    fn call(&mut self, input: &str) -> Result<ToolOutput, ToolError>;

    /// Task reward in [0, 1] for environments that define one.
    fn reward(&self) -> Option<f64> {
        None
    }
}

/// Run-time implementations for the names a flow references.
#[derive(Default)]
pub struct OutputBindings {
    pub backends: BTreeMap<String, Box<dyn LlmBackend>>,
    pub tools: BTreeMap<String, Box<dyn Tool>>,
}

impl OutputBindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_backend(mut self, name: impl Into<String>, backend: impl LlmBackend + 'static) -> Self {
        self.backends.insert(name.into(), Box::new(backend));
        self
    }

    pub fn with_tool(mut self, name: impl Into<String>, tool: impl Tool + 'static) -> Self {
        self.tools.insert(name.into(), Box::new(tool));
        self
    }

    pub fn tool(&self, name: &str) -> Option<&dyn Tool> {
        self.tools.get(name).map(|t| t.as_ref())
    }
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("tool `{0}` is not bound")]
    ToolNotFound(String),
    #[error("backend `{0}` is not bound")]
    BackendNotFound(String),
    #[error("unknown response template `{0}`")]
    UnknownTemplate(String),
    #[error("backend call failed: {0}")]
    Backend(#[from] BackendError),
    #[error("argument extraction failed: {0}")]
    ArgumentExtractionFailed(String),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

/// Per-run context needed by output functions besides the history.
#[derive(Debug, Clone, Copy)]
pub struct InvokeContext<'a> {
    pub templates: &'a BTreeMap<String, TemplateSpec>,
    pub task_type: Option<&'a str>,
    pub assembly_override: Option<Assembly>,
}

impl<'a> InvokeContext<'a> {
    pub fn template(&self, name: &str) -> Result<TemplateSpec, OutputError> {
        self.templates
            .get(name)
            .cloned()
            .or_else(|| TemplateSpec::builtin(name))
            .ok_or_else(|| OutputError::UnknownTemplate(name.to_string()))
    }
}

/// A message before the engine stamps it with step and state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageDraft {
    pub kind: MessageKind,
    pub content: String,
    pub producer: String,
}

/// The result of one output-function call.
#[derive(Debug, Clone)]
pub struct Invocation {
    /// SF_Chat instruction appended ahead of the response.
    pub prelude: Option<MessageDraft>,
    pub message: MessageDraft,
    pub reply: Option<BackendReply>,
    pub done: bool,
    pub captured: Option<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub payload: PromptPayload,
    /// Instruction to append to the history (SF_Chat only).
    pub appended_instruction: Option<String>,
}

/// One history message as it appears in a completion-style transcript.
pub fn render_message(kind: MessageKind, content: &str) -> String {
    match kind {
        MessageKind::Observation => format!("Observation: {content}"),
        _ => content.to_string(),
    }
}

pub fn render_transcript(history: &ContextHistory) -> String {
    history
        .iter()
        .map(|m| render_message(m.kind, &m.content))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Builds the backend payload for an agent.
pub fn assemble_context(
    agent: &AgentSpec,
    history: &ContextHistory,
    ctx: &InvokeContext<'_>,
) -> Result<Assembled, PromptError> {
    let instruction = agent.instruction_for(ctx.task_type)?;
    let mode = ctx.assembly_override.unwrap_or(agent.assembly);
    let assembled = match mode {
        Assembly::SystemMessage => Assembled {
            payload: PromptPayload {
                system: Some(instruction),
                turns: vec![Turn::user(render_transcript(history))],
                params: Default::default(),
            },
            appended_instruction: None,
        },
        Assembly::SfChat => {
            let mut turns: Vec<Turn> = history
                .iter()
                .map(|m| {
                    let text = render_message(m.kind, &m.content);
                    match m.kind {
                        MessageKind::ModelResponse => Turn::assistant(text),
                        _ => Turn::user(text),
                    }
                })
                .collect();
            turns.push(Turn::user(instruction.clone()));
            Assembled {
                payload: PromptPayload {
                    system: None,
                    turns,
                    params: Default::default(),
                },
                appended_instruction: Some(instruction),
            }
        }
    };
    Ok(assembled)
}

/// Runs one output function against the history.
pub fn invoke(
    spec: &OutputFunctionSpec,
    history: &ContextHistory,
    bindings: &mut OutputBindings,
    ctx: &InvokeContext<'_>,
) -> Result<Invocation, OutputError> {
    if let Some(text) = &spec.prompter {
        return Ok(Invocation {
            prelude: None,
            message: MessageDraft {
                kind: MessageKind::Prompt,
                content: text.clone(),
                producer: spec.name.clone(),
            },
            reply: None,
            done: false,
            captured: None,
        });
    }
    if let Some(call) = &spec.tool {
        let input = match (&call.input, &call.template) {
            (Some(fixed), _) => fixed.clone(),
            (None, Some(template)) => {
                let template = ctx.template(template)?;
                let last = history.last_of(MessageKind::ModelResponse).ok_or_else(|| {
                    OutputError::ArgumentExtractionFailed("no model response in history".into())
                })?;
                extract_action(&last.content, &template)
                    .map_err(|e| OutputError::ArgumentExtractionFailed(e.to_string()))?
                    .action
            }
            (None, None) => {
                return Err(OutputError::ArgumentExtractionFailed(
                    "tool call has neither input nor template".into(),
                ))
            }
        };
        let tool = bindings
            .tools
            .get_mut(&call.tool)
            .ok_or_else(|| OutputError::ToolNotFound(call.tool.clone()))?;
        let output = tool.call(&input)?;
        return Ok(Invocation {
            prelude: None,
            message: MessageDraft {
                kind: MessageKind::Observation,
                content: output.observation,
                producer: call.tool.clone(),
            },
            reply: None,
            done: output.done,
            captured: None,
        });
    }
    let agent = spec
        .agent
        .as_ref()
        .ok_or_else(|| OutputError::ArgumentExtractionFailed(format!("`{}` has no payload", spec.name)))?;
    let template = agent.template.as_deref().map(|t| ctx.template(t)).transpose()?;
    let assembled = assemble_context(agent, history, ctx)?;
    let backend = bindings
        .backends
        .get_mut(&agent.backend)
        .ok_or_else(|| OutputError::BackendNotFound(agent.backend.clone()))?;
    let reply = backend.complete(&assembled.payload)?;
    let captured = agent.capture.as_ref().map(|key| {
        let value = template
            .as_ref()
            .and_then(|t| extract_action(&reply.content, t).ok())
            .map(|a| a.action)
            .unwrap_or_else(|| first_line(reply.content.trim()).trim().to_string());
        (key.clone(), value)
    });
    Ok(Invocation {
        prelude: assembled.appended_instruction.map(|text| MessageDraft {
            kind: MessageKind::Prompt,
            content: text,
            producer: PRODUCER_SF_CHAT.to_string(),
        }),
        message: MessageDraft {
            kind: MessageKind::ModelResponse,
            content: reply.content.clone(),
            producer: spec.name.clone(),
        },
        reply: Some(reply),
        done: false,
        captured,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Role, Script, ScriptEntry, ScriptedBackend};
    use crate::flow::{Message, StateId};

    fn tae() -> TemplateSpec {
        TemplateSpec::builtin("thought_action_execute").unwrap()
    }

    fn msg(kind: MessageKind, content: &str) -> Message {
        Message {
            kind,
            content: content.into(),
            producer: "t".into(),
            step: 0,
            state: StateId::from("S"),
        }
    }

    fn ctx(templates: &BTreeMap<String, TemplateSpec>) -> InvokeContext<'_> {
        InvokeContext {
            templates,
            task_type: None,
            assembly_override: None,
        }
    }

    #[test]
    fn extract_thought_and_execute() {
        let got = extract_action("Thought: t\nAction: execute[DESC highschooler]", &tae()).unwrap();
        assert_eq!(got.thought.as_deref(), Some("t"));
        assert_eq!(got.action, "DESC highschooler");
    }

    #[test]
    fn extract_bare_submit() {
        let got = extract_action("Action: submit", &tae()).unwrap();
        assert_eq!(got.thought, None);
        assert_eq!(got.action, "submit");
    }

    #[test]
    fn extract_nothing() {
        assert!(extract_action("no action here", &tae()).is_err());
        assert!(extract_action("Action:   ", &tae()).is_err());
    }

    #[test]
    fn last_action_wins() {
        let text = "Action: execute[SHOW TABLES]\nThought: wait\nAction: execute[DESC t]";
        let got = extract_action(text, &tae()).unwrap();
        assert_eq!(got.action, "DESC t");
        assert_eq!(got.thought.as_deref(), Some("wait"));
    }

    #[test]
    fn numbered_labels_and_nested_wrappers() {
        let got = extract_action("Thought 2: x\nAction 2: execute[SHOW TABLES]", &tae()).unwrap();
        assert_eq!(got.action, "SHOW TABLES");
        let got = extract_action("Action: execute[execute[SELECT 1 FROM t]]", &tae()).unwrap();
        assert_eq!(got.action, "SELECT 1 FROM t");
        let got = extract_action("Action: execute[SELECT a\nFROM t\nWHERE x = 1]", &tae()).unwrap();
        assert_eq!(got.action, "SELECT a\nFROM t\nWHERE x = 1");
    }

    #[test]
    fn action_only_template() {
        let t = TemplateSpec::builtin("action_only").unwrap();
        let got = extract_action("Thought: go\nAction: go to cabinet 1", &t).unwrap();
        assert_eq!(got.action, "go to cabinet 1");
        assert_eq!(got.thought, None);
    }

    #[test]
    fn prompter_passthrough() {
        let templates = BTreeMap::new();
        let spec = OutputFunctionSpec::prompter("pre", "SHOW TABLES preamble");
        let mut b = OutputBindings::new();
        let h: ContextHistory = vec![msg(MessageKind::Task, "q")].into_iter().collect();
        let inv = invoke(&spec, &h, &mut b, &ctx(&templates)).unwrap();
        assert_eq!(inv.message.kind, MessageKind::Prompt);
        assert_eq!(inv.message.content, "SHOW TABLES preamble");
        assert!(inv.prelude.is_none());
    }

    #[test]
    fn system_mode_payload() {
        let templates = BTreeMap::new();
        let agent = AgentSpec::new("T_i");
        let h: ContextHistory = vec![msg(MessageKind::Task, "Q")].into_iter().collect();
        let a = assemble_context(&agent, &h, &ctx(&templates)).unwrap();
        assert_eq!(a.payload.system.as_deref(), Some("T_i"));
        assert_eq!(a.payload.turns, vec![Turn::user("Q")]);
        assert!(a.appended_instruction.is_none());
    }

    #[test]
    fn sfchat_mode_payload() {
        let templates = BTreeMap::new();
        let agent = AgentSpec::new("T_i").with_assembly(Assembly::SfChat);
        let h: ContextHistory = vec![
            msg(MessageKind::Task, "Q"),
            msg(MessageKind::ModelResponse, "Action: execute[SHOW TABLES]"),
            msg(MessageKind::Observation, "[('t',)]"),
        ]
        .into_iter()
        .collect();
        let a = assemble_context(&agent, &h, &ctx(&templates)).unwrap();
        assert!(a.payload.system.is_none());
        let roles: Vec<Role> = a.payload.turns.iter().map(|t| t.role).collect();
        assert_eq!(roles, vec![Role::User, Role::Assistant, Role::User, Role::User]);
        assert_eq!(a.payload.turns[2].content, "Observation: [('t',)]");
        assert_eq!(a.payload.turns[3].content, "T_i");
        assert_eq!(a.appended_instruction.as_deref(), Some("T_i"));
    }

    #[test]
    fn variant_instruction_by_task_type() {
        let mut agent = AgentSpec::new("generic");
        agent.variants.insert("heat".into(), "heat it".into());
        assert_eq!(agent.instruction_for(Some("heat")).unwrap(), "heat it");
        assert_eq!(agent.instruction_for(Some("cool")).unwrap(), "generic");
        assert_eq!(agent.instruction_for(None).unwrap(), "generic");
    }

    #[test]
    fn agent_returns_scripted_reply_and_captures() {
        let templates = BTreeMap::new();
        let mut agent = AgentSpec::new("Verify");
        agent.capture = Some("target".into());
        let spec = OutputFunctionSpec::agent("verify", agent);
        let mut b = OutputBindings::new().with_backend(
            "default",
            ScriptedBackend::new(Script::new(vec![ScriptEntry::any("  soapbar \nmore", (3, 1))])),
        );
        let h: ContextHistory = vec![msg(MessageKind::Task, "Q")].into_iter().collect();
        let inv = invoke(&spec, &h, &mut b, &ctx(&templates)).unwrap();
        assert_eq!(inv.message.kind, MessageKind::ModelResponse);
        assert_eq!(inv.message.content, "  soapbar \nmore");
        assert_eq!(inv.captured, Some(("target".into(), "soapbar".into())));
        assert_eq!(inv.reply.unwrap().prompt_tokens, 3);
    }

    #[test]
    fn tool_needs_a_model_response() {
        struct Echo;
        impl Tool for Echo {
            fn call(&mut self, input: &str) -> Result<ToolOutput, ToolError> {
                Ok(ToolOutput {
                    observation: input.to_string(),
                    done: false,
                })
            }
        }
        let templates = BTreeMap::new();
        let spec = OutputFunctionSpec::tool("exec", "echo", "thought_action_execute");
        let mut b = OutputBindings::new().with_tool("echo", Echo);
        let h: ContextHistory = vec![msg(MessageKind::Task, "Q")].into_iter().collect();
        assert!(matches!(
            invoke(&spec, &h, &mut b, &ctx(&templates)),
            Err(OutputError::ArgumentExtractionFailed(_))
        ));
        let h: ContextHistory = vec![
            msg(MessageKind::Task, "Q"),
            msg(MessageKind::ModelResponse, "Action: execute[ls]"),
            msg(MessageKind::Prompt, "Action: execute[rm]"),
        ]
        .into_iter()
        .collect();
        let inv = invoke(&spec, &h, &mut b, &ctx(&templates)).unwrap();
        assert_eq!(inv.message.content, "ls");
        assert_eq!(inv.message.producer, "echo");

        let missing = OutputFunctionSpec::tool("exec", "nope", "thought_action_execute");
        assert!(matches!(
            invoke(&missing, &h, &mut b, &ctx(&templates)),
            Err(OutputError::ToolNotFound(_))
        ));
    }

    #[test]
    fn shape_checks() {
        assert!(OutputFunctionSpec::prompter("p", "x").shape_problem().is_none());
        let mut bad = OutputFunctionSpec::prompter("p", "x");
        bad.kind = OutputKind::Agent;
        assert!(bad.shape_problem().is_some());
        let mut two = OutputFunctionSpec::prompter("p", "x");
        two.agent = Some(AgentSpec::new("y"));
        assert!(two.shape_problem().is_some());
    }
}
