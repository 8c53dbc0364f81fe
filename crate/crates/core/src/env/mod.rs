//! Simulated interactive environments exposed as tools, task specs, and the
//! helpers that sit between model output and an environment.

pub mod house;
pub mod sql;

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{ContextHistory, MessageKind};
use crate::output::{Tool, ToolError, ToolOutput};
use house::{Goal, Household, Receptacle};
use sql::{iou, Row, SqlResult, Table, ToySqlDb};

pub const TOOL_SQL: &str = "toy-sql";
pub const TOOL_HOUSE: &str = "toy-house";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EnvKind {
    #[serde(rename = "toy-sql")]
    ToySql,
    #[serde(rename = "toy-house")]
    ToyHouse,
}

impl EnvKind {
    pub fn tool_name(self) -> &'static str {
        match self {
            EnvKind::ToySql => TOOL_SQL,
            EnvKind::ToyHouse => TOOL_HOUSE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    Rows(Vec<Row>),
    Goal(Goal),
}

/// One task: the question or goal text plus what counts as solving it.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub environment: EnvKind,
    pub question: String,
    pub gold: Gold,
    pub task_type: Option<String>,
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqlTask {
    pub id: String,
    pub question: String,
    pub gold: Vec<Row>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

/// `envs/sql/*.json`: a database and the tasks asked against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqlFixture {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
    pub tables: Vec<Table>,
    #[serde(default)]
    pub tasks: Vec<SqlTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseTask {
    pub id: String,
    pub goal_text: String,
    pub task_type: String,
    pub goal: Goal,
    /// Layout override for this task; defaults to the fixture layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub receptacles: Option<Vec<Receptacle>>,
}

/// `envs/house/*.json`: a household layout and goal-bearing tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseFixture {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub provenance: String,
    pub receptacles: Vec<Receptacle>,
    #[serde(default)]
    pub tasks: Vec<HouseTask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum EnvFixture {
    #[serde(rename = "toy-sql")]
    Sql(SqlFixture),
    #[serde(rename = "toy-house")]
    House(HouseFixture),
}

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("cannot read {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid fixture {path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error("fixture `{fixture}` has no task `{task}`")]
    UnknownTask { fixture: String, task: String },
}

impl EnvFixture {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let fixture: EnvFixture = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let EnvFixture::Sql(s) = &fixture {
            s.database().map_err(|e| e.to_string())?;
        }
        Ok(fixture)
    }

    pub fn load(path: &Path) -> Result<Self, FixtureError> {
        let text = std::fs::read_to_string(path).map_err(|e| FixtureError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_json(&text).map_err(|reason| FixtureError::Invalid {
            path: path.display().to_string(),
            reason,
        })
    }

    pub fn name(&self) -> &str {
        match self {
            EnvFixture::Sql(s) => &s.name,
            EnvFixture::House(h) => &h.name,
        }
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            EnvFixture::Sql(_) => EnvKind::ToySql,
            EnvFixture::House(_) => EnvKind::ToyHouse,
        }
    }

    pub fn task_ids(&self) -> Vec<&str> {
        match self {
            EnvFixture::Sql(s) => s.tasks.iter().map(|t| t.id.as_str()).collect(),
            EnvFixture::House(h) => h.tasks.iter().map(|t| t.id.as_str()).collect(),
        }
    }

    pub fn task(&self, id: &str) -> Result<TaskSpec, FixtureError> {
        let unknown = || FixtureError::UnknownTask {
            fixture: self.name().to_string(),
            task: id.to_string(),
        };
        match self {
            EnvFixture::Sql(s) => {
                let t = s.tasks.iter().find(|t| t.id == id).ok_or_else(unknown)?;
                Ok(TaskSpec {
                    id: t.id.clone(),
                    environment: EnvKind::ToySql,
                    question: t.question.clone(),
                    gold: Gold::Rows(t.gold.clone()),
                    task_type: None,
                    difficulty: t.difficulty.clone(),
                })
            }
            EnvFixture::House(h) => {
                let t = h.tasks.iter().find(|t| t.id == id).ok_or_else(unknown)?;
                Ok(TaskSpec {
                    id: t.id.clone(),
                    environment: EnvKind::ToyHouse,
                    question: t.goal_text.clone(),
                    gold: Gold::Goal(t.goal.clone()),
                    task_type: Some(t.task_type.clone()),
                    difficulty: None,
                })
            }
        }
    }

    /// A fresh environment instance for one task.
    pub fn make_tool(&self, task_id: &str) -> Result<Box<dyn Tool>, FixtureError> {
        let task = self.task(task_id)?;
        match (self, task.gold) {
            (EnvFixture::Sql(s), Gold::Rows(gold)) => {
                let db = s.database().map_err(|e| FixtureError::Invalid {
                    path: s.name.clone(),
                    reason: e.to_string(),
                })?;
                Ok(Box::new(SqlTool::new(db, gold)))
            }
            (EnvFixture::House(h), Gold::Goal(goal)) => {
                let t = h.tasks.iter().find(|t| t.id == task_id).expect("task exists");
                let layout = t.receptacles.clone().unwrap_or_else(|| h.receptacles.clone());
                Ok(Box::new(HouseTool::new(Household::new(layout, goal))))
            }
            _ => unreachable!("gold kind follows fixture kind"),
        }
    }
}

impl SqlFixture {
    pub fn database(&self) -> Result<ToySqlDb, sql::DbError> {
        ToySqlDb::new(self.name.clone(), self.tables.clone())
    }
}

/// The SQL database as a tool. `submit` ends the task; the latest execution
/// output before it is what gets scored.
pub struct SqlTool {
    db: ToySqlDb,
    gold: Vec<Row>,
    latest: Option<SqlResult>,
    submitted: bool,
}

impl SqlTool {
    pub fn new(db: ToySqlDb, gold: Vec<Row>) -> Self {
        SqlTool {
            db,
            gold,
            latest: None,
            submitted: false,
        }
    }

    pub fn latest(&self) -> Option<&SqlResult> {
        self.latest.as_ref()
    }

    pub fn submitted(&self) -> bool {
        self.submitted
    }
}

impl Tool for SqlTool {
    fn call(&mut self, input: &str) -> Result<ToolOutput, ToolError> {
        if self.submitted {
            return Ok(ToolOutput {
                observation: "Task already submitted.".into(),
                done: true,
            });
        }
        if input.trim().eq_ignore_ascii_case("submit") {
            self.submitted = true;
            return Ok(ToolOutput {
                observation: "Submitted.".into(),
                done: true,
            });
        }
        let result = self.db.execute(input);
        let observation = result.render();
        self.latest = Some(result);
        Ok(ToolOutput {
            observation,
            done: false,
        })
    }

    fn reward(&self) -> Option<f64> {
        Some(self.latest.as_ref().map_or(0.0, |r| iou(r, &self.gold)))
    }
}

/// The household as a tool. Raw actions are first mapped onto the closest
/// currently valid action.
pub struct HouseTool {
    house: Household,
    done: bool,
}

impl HouseTool {
    pub fn new(house: Household) -> Self {
        HouseTool { house, done: false }
    }

    pub fn house(&self) -> &Household {
        &self.house
    }
}

impl Tool for HouseTool {
    fn call(&mut self, input: &str) -> Result<ToolOutput, ToolError> {
        let valid = self.house.valid_actions();
        let action = match map_action_scored(input, &valid) {
            Some((i, score)) if score > 0.0 => valid[i].clone(),
            _ => input.trim().to_string(),
        };
        let step = self.house.step(&action);
        self.done |= step.done;
        Ok(ToolOutput {
            observation: step.observation,
            done: self.done,
        })
    }

    fn reward(&self) -> Option<f64> {
        Some(if self.done { 1.0 } else { 0.0 })
    }
}

fn tokens(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Unigram precision of `raw` against `candidate`, with clipped counts and
/// a brevity penalty.
pub fn similarity(raw: &str, candidate: &str) -> f64 {
    let hyp = tokens(raw);
    let reference = tokens(candidate);
    if hyp.is_empty() {
        return 0.0;
    }
    let mut available: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    for t in &reference {
        *available.entry(t.as_str()).or_default() += 1;
    }
    let mut matched = 0usize;
    for t in &hyp {
        if let Some(n) = available.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                matched += 1;
            }
        }
    }
    let c = hyp.len() as f64;
    let r = reference.len() as f64;
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    bp * matched as f64 / c
}

/// Index and score of the best candidate; exact matches win outright and
/// ties go to the earliest candidate.
pub fn map_action_scored(raw: &str, valid: &[String]) -> Option<(usize, f64)> {
    let trimmed = raw.trim();
    if let Some(i) = valid.iter().position(|v| v == trimmed) {
        return Some((i, 1.0));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in valid.iter().enumerate() {
        let s = similarity(trimmed, v);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best
}

/// Maps free-form model output onto the most similar valid action.
///
/// # Panics
/// If `valid` is empty.
pub fn map_action<'a>(raw: &str, valid: &'a [String]) -> &'a str {
    let (i, _) = map_action_scored(raw, valid).expect("valid actions must be non-empty");
    &valid[i]
}

/// The last three model responses are identical up to whitespace.
pub fn detect_stall(history: &ContextHistory) -> bool {
    let normalize = |s: &str| s.split_whitespace().collect::<Vec<_>>().join(" ");
    let last: Vec<String> = history
        .iter()
        .rev()
        .filter(|m| m.kind == MessageKind::ModelResponse)
        .take(3)
        .map(|m| normalize(&m.content))
        .collect();
    last.len() == 3 && last[0] == last[1] && last[1] == last[2]
}
