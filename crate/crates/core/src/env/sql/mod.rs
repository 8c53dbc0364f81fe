//! A small in-memory SQL database answering the handful of statement shapes
//! an interactive SQL agent issues: `SHOW TABLES`, `DESC`, and single-join
//! `SELECT`s with conjunctive filters, one sort key, a limit and aggregates.

mod eval;
mod lexer;
mod parser;

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parser::{
    parse, AggFn, CmpOp, ColumnRef, Condition, Expr, Join, OrderBy, Select, SelectItem, Statement,
    SyntaxError, TableRef,
};

pub const ERROR_PREFIX: &str = "Error executing query:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Float(f64),
    Text(String),
    Null,
}

impl Value {
    fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Int(n) => Some(*n as f64),
            Value::Float(x) => Some(*x),
            _ => None,
        }
    }

    /// SQL comparison: numbers compare numerically, text compares bytewise,
    /// anything else (including NULL) is incomparable.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Int(a), Value::Int(b)) => Some(a.cmp(b)),
            (Value::Text(a), Value::Text(b)) => Some(a.cmp(b)),
            _ => match (self.as_f64(), other.as_f64()) {
                (Some(a), Some(b)) => a.partial_cmp(&b),
                _ => None,
            },
        }
    }

    fn rank(&self) -> u8 {
        match self {
            Value::Null => 0,
            Value::Int(_) | Value::Float(_) => 1,
            Value::Text(_) => 2,
        }
    }

    /// Total order used for sorting: NULL first, then numbers, then text.
    pub fn sort_cmp(&self, other: &Value) -> Ordering {
        self.rank()
            .cmp(&other.rank())
            .then_with(|| match (self, other) {
                (Value::Int(a), Value::Int(b)) => a.cmp(b),
                (Value::Text(a), Value::Text(b)) => a.cmp(b),
                _ => match (self.as_f64(), other.as_f64()) {
                    (Some(a), Some(b)) => a.total_cmp(&b),
                    _ => Ordering::Equal,
                },
            })
    }

    /// Python-style literal, as the observations render results.
    pub fn repr(&self) -> String {
        match self {
            Value::Int(n) => n.to_string(),
            Value::Float(x) => float_repr(*x),
            Value::Text(s) => text_repr(s),
            Value::Null => "None".to_string(),
        }
    }
}

fn float_repr(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let s = format!("{x:?}");
    match s.find('e') {
        Some(i) if !s[i + 1..].starts_with('-') => format!("{}e+{}", &s[..i], &s[i + 1..]),
        _ => s,
    }
}

fn text_repr(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') { '"' } else { '\'' };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

pub type Row = Vec<Value>;

pub fn render_row(row: &[Value]) -> String {
    let mut out = String::from("(");
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        out.push_str(&v.repr());
    }
    if row.len() == 1 {
        out.push(',');
    }
    out.push(')');
    out
}

pub fn render_rows(rows: &[Row]) -> String {
    let mut out = String::from("[");
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            out.push_str(", ");
        }
        let _ = write!(out, "{}", render_row(row));
    }
    out.push(']');
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum SqlResult {
    Rows(Vec<Row>),
    Ack(String),
    Error(String),
}

impl SqlResult {
    pub fn error(reason: impl AsRef<str>) -> Self {
        SqlResult::Error(format!("{ERROR_PREFIX} {}", reason.as_ref()))
    }

    pub fn render(&self) -> String {
        match self {
            SqlResult::Rows(rows) => render_rows(rows),
            SqlResult::Ack(s) | SqlResult::Error(s) => s.clone(),
        }
    }

    pub fn rows(&self) -> Option<&[Row]> {
        match self {
            SqlResult::Rows(r) => Some(r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColumnType {
    Int,
    Float,
    Text,
}

impl ColumnType {
    fn name(self) -> &'static str {
        match self {
            ColumnType::Int => "int",
            ColumnType::Float => "float",
            ColumnType::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Column {
    pub name: String,
    #[serde(rename = "type")]
    pub ty: ColumnType,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub primary: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Table {
    pub name: String,
    pub columns: Vec<Column>,
    pub rows: Vec<Row>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[(&str, ColumnType)]) -> Self {
        Table {
            name: name.into(),
            columns: columns
                .iter()
                .map(|(n, t)| Column {
                    name: n.to_string(),
                    ty: *t,
                    primary: false,
                })
                .collect(),
            rows: Vec::new(),
        }
    }

    pub fn with_row(mut self, row: Row) -> Self {
        self.rows.push(row);
        self
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name.eq_ignore_ascii_case(name))
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DbError {
    #[error("duplicate table `{0}`")]
    DuplicateTable(String),
    #[error("table `{table}` has duplicate column `{column}`")]
    DuplicateColumn { table: String, column: String },
    #[error("table `{table}` row {row} has {got} values, expected {expected}")]
    Arity {
        table: String,
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("table `{table}` row {row} column `{column}` does not hold a {ty}")]
    Type {
        table: String,
        row: usize,
        column: String,
        ty: &'static str,
    },
}

/// Named collection of tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySqlDb {
    pub name: String,
    pub tables: Vec<Table>,
}

impl ToySqlDb {
    /// Builds a database, checking names, arity and column types. Integer
    /// values in float columns are widened.
    pub fn new(name: impl Into<String>, tables: Vec<Table>) -> Result<Self, DbError> {
        let mut tables = tables;
        let mut seen = std::collections::BTreeSet::new();
        for table in &mut tables {
            if !seen.insert(table.name.to_ascii_lowercase()) {
                return Err(DbError::DuplicateTable(table.name.clone()));
            }
            let mut cols = std::collections::BTreeSet::new();
            for c in &table.columns {
                if !cols.insert(c.name.to_ascii_lowercase()) {
                    return Err(DbError::DuplicateColumn {
                        table: table.name.clone(),
                        column: c.name.clone(),
                    });
                }
            }
            for (r, row) in table.rows.iter_mut().enumerate() {
                if row.len() != table.columns.len() {
                    return Err(DbError::Arity {
                        table: table.name.clone(),
                        row: r,
                        got: row.len(),
                        expected: table.columns.len(),
                    });
                }
                for (value, column) in row.iter_mut().zip(&table.columns) {
                    let ok = match (column.ty, &*value) {
                        (_, Value::Null) => true,
                        (ColumnType::Int, Value::Int(_)) => true,
                        (ColumnType::Float, Value::Float(_)) => true,
                        (ColumnType::Float, Value::Int(n)) => {
                            *value = Value::Float(*n as f64);
                            true
                        }
                        (ColumnType::Text, Value::Text(_)) => true,
                        _ => false,
                    };
                    if !ok {
                        return Err(DbError::Type {
                            table: table.name.clone(),
                            row: r,
                            column: column.name.clone(),
                            ty: column.ty.name(),
                        });
                    }
                }
            }
        }
        Ok(ToySqlDb {
            name: name.into(),
            tables,
        })
    }

    pub fn table(&self, name: &str) -> Option<&Table> {
        self.tables.iter().find(|t| t.name.eq_ignore_ascii_case(name))
    }

    /// Runs one statement. Every failure is an `Error` result whose text
    /// starts with `Error executing query:`.
    pub fn execute(&self, command: &str) -> SqlResult {
        let command = command.trim();
        match parse(command) {
            Ok(stmt) => self.run(&stmt),
            Err(SyntaxError(pos)) => SqlResult::error(format!(
                "You have an error in your SQL syntax; check the manual that corresponds to your \
                 MySQL server version for the right syntax to use near '{}' at line 1",
                near(command, pos)
            )),
        }
    }

    pub fn run(&self, stmt: &Statement) -> SqlResult {
        match stmt {
            Statement::ShowTables => {
                let mut names: Vec<&str> = self.tables.iter().map(|t| t.name.as_str()).collect();
                names.sort();
                SqlResult::Rows(names.into_iter().map(|n| vec![Value::Text(n.to_string())]).collect())
            }
            Statement::Describe(name) => match self.table(name) {
                Some(t) => SqlResult::Rows(
                    t.columns
                        .iter()
                        .map(|c| {
                            let text = |s: &str| Value::Text(s.to_string());
                            vec![
                                text(&c.name),
                                text(c.ty.name()),
                                text(if c.primary { "NO" } else { "YES" }),
                                text(if c.primary { "PRI" } else { "" }),
                                Value::Null,
                                text(if c.primary && c.ty == ColumnType::Int { "auto_increment" } else { "" }),
                            ]
                        })
                        .collect(),
                ),
                None => self.missing_table(name),
            },
            Statement::Select(select) => match eval::select(self, select) {
                Ok(rows) => SqlResult::Rows(rows),
                Err(reason) => SqlResult::error(reason),
            },
        }
    }

    fn missing_table(&self, name: &str) -> SqlResult {
        SqlResult::error(format!("Table '{}.{}' doesn't exist", self.name, name))
    }
}

fn near(src: &str, pos: usize) -> String {
    let rest = src.get(pos..).unwrap_or("");
    rest.chars().take(80).collect()
}

/// Multiset intersection-over-union of a result against gold rows. Non-row
/// results score 0; two empty row sets are equal and score 1.
pub fn iou(latest: &SqlResult, gold: &[Row]) -> f64 {
    let Some(rows) = latest.rows() else {
        return 0.0;
    };
    let count = |rows: &[Row]| {
        let mut m: BTreeMap<String, usize> = BTreeMap::new();
        for r in rows {
            *m.entry(render_row(r)).or_default() += 1;
        }
        m
    };
    let a = count(rows);
    let b = count(gold);
    let mut inter = 0usize;
    let mut union = 0usize;
    for key in a.keys().chain(b.keys().filter(|k| !a.contains_key(*k))) {
        let x = a.get(key).copied().unwrap_or(0);
        let y = b.get(key).copied().unwrap_or(0);
        inter += x.min(y);
        union += x.max(y);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ColumnType::*;

    fn text(s: &str) -> Value {
        Value::Text(s.into())
    }

    fn network() -> ToySqlDb {
        ToySqlDb::new(
            "network_1",
            vec![
                Table::new("highschooler", &[("ID", Int), ("name", Text), ("grade", Int)])
                    .with_row(vec![Value::Int(1510), text("Jordan"), Value::Int(9)])
                    .with_row(vec![Value::Int(1689), text("Gabriel"), Value::Int(9)])
                    .with_row(vec![Value::Int(1381), text("Tiffany"), Value::Int(9)])
                    .with_row(vec![Value::Int(1709), text("Cassandra"), Value::Int(9)]),
                Table::new("friend", &[("student_id", Int), ("friend_id", Int)])
                    .with_row(vec![Value::Int(1510), Value::Int(1381)])
                    .with_row(vec![Value::Int(1510), Value::Int(1689)]),
                Table::new("likes", &[("student_id", Int), ("liked_id", Int)])
                    .with_row(vec![Value::Int(1689), Value::Int(1709)]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn show_tables() {
        assert_eq!(
            network().execute("SHOW TABLES").render(),
            "[('friend',), ('highschooler',), ('likes',)]"
        );
    }

    #[test]
    fn missing_table_message() {
        assert_eq!(
            network().execute("SELECT name, grade FROM high_schoolers").render(),
            "Error executing query: Table 'network_1.high_schoolers' doesn't exist"
        );
    }

    #[test]
    fn unknown_column_message() {
        assert_eq!(
            network().execute("SELECT nam FROM highschooler").render(),
            "Error executing query: Unknown column 'nam' in 'field list'"
        );
    }

    #[test]
    fn count_star() {
        let db = ToySqlDb::new(
            "d",
            vec![Table::new("t", &[("a", Int)])
                .with_row(vec![Value::Int(1)])
                .with_row(vec![Value::Int(2)])
                .with_row(vec![Value::Int(3)])],
        )
        .unwrap();
        assert_eq!(db.execute("SELECT COUNT(*) FROM t"), SqlResult::Rows(vec![vec![Value::Int(3)]]));
        assert_eq!(db.execute("SELECT COUNT(*) FROM t").render(), "[(3,)]");
    }

    #[test]
    fn describe_rows() {
        let mut db = network();
        db.tables[1].columns[0].primary = true;
        assert_eq!(
            db.execute("DESC highschooler").render(),
            "[('ID', 'int', 'YES', '', None, ''), ('name', 'text', 'YES', '', None, ''), \
             ('grade', 'int', 'YES', '', None, '')]"
        );
        assert!(db.execute("DESC friend").render().starts_with("[('student_id', 'int', 'NO', 'PRI', None, 'auto_increment')"));
        assert!(db.execute("DESC nope").render().contains("doesn't exist"));
    }

    #[test]
    fn syntax_error_points_near() {
        let r = network().execute("SELECT name FROM highschooler GROUP BY name");
        assert!(r.render().starts_with("Error executing query: You have an error in your SQL syntax"));
        assert!(r.render().contains("near 'GROUP BY name' at line 1"));
    }

    #[test]
    fn reprs() {
        assert_eq!(render_row(&[text("it's")]), "(\"it's\",)");
        assert_eq!(render_row(&[Value::Float(3.0), Value::Float(2.5), Value::Null]), "(3.0, 2.5, None)");
        assert_eq!(float_repr(1e20), "1e+20");
        assert_eq!(render_rows(&[]), "[]");
    }

    #[test]
    fn iou_examples() {
        let rows = |v: &[i64]| v.iter().map(|n| vec![Value::Int(*n)]).collect::<Vec<_>>();
        let gold = rows(&[1, 2]);
        assert_eq!(iou(&SqlResult::Rows(gold.clone()), &gold), 1.0);
        assert_eq!(iou(&SqlResult::error("x"), &gold), 0.0);
        assert!((iou(&SqlResult::Rows(rows(&[1, 2])), &rows(&[2, 3])) - 1.0 / 3.0).abs() < 1e-12);
        assert!((iou(&SqlResult::Rows(rows(&[1, 1])), &rows(&[1])) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_tables() {
        assert!(matches!(
            ToySqlDb::new("d", vec![Table::new("t", &[("a", Int)]).with_row(vec![])]),
            Err(DbError::Arity { .. })
        ));
        assert!(matches!(
            ToySqlDb::new("d", vec![Table::new("t", &[("a", Int)]).with_row(vec![text("x")])]),
            Err(DbError::Type { .. })
        ));
        assert!(matches!(
            ToySqlDb::new("d", vec![Table::new("t", &[]), Table::new("T", &[])]),
            Err(DbError::DuplicateTable(_))
        ));
    }
}
