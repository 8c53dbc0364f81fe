use std::fmt;

use super::lexer::{lex, Tok, Token};
use super::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum Statement {
    ShowTables,
    Describe(String),
    Select(Box<Select>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Select {
    pub items: Vec<SelectItem>,
    pub from: TableRef,
    pub join: Option<Join>,
    /// Conjunction of simple comparisons.
    pub filters: Vec<Condition>,
    pub order_by: Option<OrderBy>,
    pub limit: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableRef {
    pub name: String,
    pub alias: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Join {
    pub table: TableRef,
    pub left: ColumnRef,
    pub right: ColumnRef,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnRef {
    pub table: Option<String>,
    pub column: String,
}

impl ColumnRef {
    pub fn bare(column: impl Into<String>) -> Self {
        ColumnRef {
            table: None,
            column: column.into(),
        }
    }

    pub fn qualified(table: impl Into<String>, column: impl Into<String>) -> Self {
        ColumnRef {
            table: Some(table.into()),
            column: column.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggFn {
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Star,
    Column(ColumnRef),
    /// `None` argument means `*` (only valid for COUNT).
    Aggregate(AggFn, Option<ColumnRef>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectItem {
    pub expr: Expr,
    pub alias: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub column: ColumnRef,
    pub op: CmpOp,
    pub value: Value,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrderBy {
    pub column: ColumnRef,
    pub descending: bool,
}

const RESERVED: &[&str] = &[
    "SELECT", "FROM", "WHERE", "AND", "OR", "JOIN", "INNER", "LEFT", "ON", "ORDER", "GROUP", "BY", "ASC",
    "DESC", "LIMIT", "AS", "SHOW", "TABLES", "DESCRIBE", "HAVING",
];

fn is_reserved(word: &str) -> bool {
    RESERVED.iter().any(|r| r.eq_ignore_ascii_case(word))
}

/// Byte offset where parsing failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntaxError(pub usize);

struct Parser {
    tokens: Vec<Token>,
    at: usize,
    end: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.tokens.get(self.at).map(|t| &t.tok)
    }

    fn pos(&self) -> usize {
        self.tokens.get(self.at).map_or(self.end, |t| t.pos)
    }

    fn fail<T>(&self) -> Result<T, SyntaxError> {
        Err(SyntaxError(self.pos()))
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.tokens.get(self.at).map(|t| t.tok.clone());
        self.at += 1;
        t
    }

    fn peek_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Word(w)) if w.eq_ignore_ascii_case(kw))
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.peek_kw(kw) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn expect_kw(&mut self, kw: &str) -> Result<(), SyntaxError> {
        if self.eat_kw(kw) {
            Ok(())
        } else {
            self.fail()
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if self.peek() == Some(tok) {
            self.at += 1;
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String, SyntaxError> {
        match self.peek() {
            Some(Tok::Word(w)) if !is_reserved(w) => {
                let w = w.clone();
                self.at += 1;
                Ok(w)
            }
            Some(Tok::Quoted(w)) => {
                let w = w.clone();
                self.at += 1;
                Ok(w)
            }
            _ => self.fail(),
        }
    }

    fn column_ref(&mut self) -> Result<ColumnRef, SyntaxError> {
        let first = self.ident()?;
        if self.eat(&Tok::Dot) {
            let column = self.ident()?;
            Ok(ColumnRef::qualified(first, column))
        } else {
            Ok(ColumnRef::bare(first))
        }
    }

    fn alias(&mut self) -> Result<Option<String>, SyntaxError> {
        if self.eat_kw("AS") {
            return match self.peek() {
                Some(Tok::Str(s)) => {
                    let s = s.clone();
                    self.at += 1;
                    Ok(Some(s))
                }
                _ => self.ident().map(Some),
            };
        }
        match self.peek() {
            Some(Tok::Word(w)) if !is_reserved(w) => self.ident().map(Some),
            Some(Tok::Quoted(_)) => self.ident().map(Some),
            _ => Ok(None),
        }
    }

    fn item(&mut self) -> Result<SelectItem, SyntaxError> {
        if self.eat(&Tok::Star) {
            return Ok(SelectItem {
                expr: Expr::Star,
                alias: None,
            });
        }
        let func = match self.peek() {
            Some(Tok::Word(w)) if matches!(self.tokens.get(self.at + 1).map(|t| &t.tok), Some(Tok::LParen)) => {
                match w.to_ascii_uppercase().as_str() {
                    "COUNT" => Some(AggFn::Count),
                    "SUM" => Some(AggFn::Sum),
                    "AVG" => Some(AggFn::Avg),
                    "MIN" => Some(AggFn::Min),
                    "MAX" => Some(AggFn::Max),
                    _ => return self.fail(),
                }
            }
            _ => None,
        };
        let expr = match func {
            Some(f) => {
                self.at += 2;
                let arg = if self.peek() == Some(&Tok::Star) {
                    if f != AggFn::Count {
                        return self.fail();
                    }
                    self.at += 1;
                    None
                } else {
                    Some(self.column_ref()?)
                };
                if !self.eat(&Tok::RParen) {
                    return self.fail();
                }
                Expr::Aggregate(f, arg)
            }
            None => Expr::Column(self.column_ref()?),
        };
        let alias = self.alias()?;
        Ok(SelectItem { expr, alias })
    }

    fn table_ref(&mut self) -> Result<TableRef, SyntaxError> {
        let name = self.ident()?;
        let alias = self.alias()?;
        Ok(TableRef { name, alias })
    }

    fn literal(&mut self) -> Result<Value, SyntaxError> {
        let negative = self.eat(&Tok::Minus);
        match (self.bump(), negative) {
            (Some(Tok::Int(n)), neg) => Ok(Value::Int(if neg { -n } else { n })),
            (Some(Tok::Float(x)), neg) => Ok(Value::Float(if neg { -x } else { x })),
            (Some(Tok::Str(s)), false) => Ok(Value::Text(s)),
            _ => {
                self.at -= 1;
                self.fail()
            }
        }
    }

    fn condition(&mut self) -> Result<Condition, SyntaxError> {
        let column = self.column_ref()?;
        let op = match self.peek() {
            Some(Tok::Op(op)) => match *op {
                "=" => CmpOp::Eq,
                "!=" => CmpOp::Ne,
                "<" => CmpOp::Lt,
                ">" => CmpOp::Gt,
                "<=" => CmpOp::Le,
                ">=" => CmpOp::Ge,
                _ => return self.fail(),
            },
            _ => return self.fail(),
        };
        self.at += 1;
        let value = self.literal()?;
        Ok(Condition { column, op, value })
    }

    fn select(&mut self) -> Result<Select, SyntaxError> {
        let mut items = vec![self.item()?];
        while self.eat(&Tok::Comma) {
            items.push(self.item()?);
        }
        self.expect_kw("FROM")?;
        let from = self.table_ref()?;
        let join = if self.peek_kw("JOIN") || self.peek_kw("INNER") {
            self.eat_kw("INNER");
            self.expect_kw("JOIN")?;
            let table = self.table_ref()?;
            self.expect_kw("ON")?;
            let left = self.column_ref()?;
            if !self.eat(&Tok::Op("=")) {
                return self.fail();
            }
            let right = self.column_ref()?;
            Some(Join { table, left, right })
        } else {
            None
        };
        let mut filters = Vec::new();
        if self.eat_kw("WHERE") {
            filters.push(self.condition()?);
            while self.eat_kw("AND") {
                filters.push(self.condition()?);
            }
        }
        let order_by = if self.eat_kw("ORDER") {
            self.expect_kw("BY")?;
            let column = self.column_ref()?;
            let descending = if self.eat_kw("DESC") {
                true
            } else {
                self.eat_kw("ASC");
                false
            };
            Some(OrderBy { column, descending })
        } else {
            None
        };
        let limit = if self.eat_kw("LIMIT") {
            match self.bump() {
                Some(Tok::Int(n)) if n >= 0 => Some(n as u64),
                _ => {
                    self.at -= 1;
                    return self.fail();
                }
            }
        } else {
            None
        };
        Ok(Select {
            items,
            from,
            join,
            filters,
            order_by,
            limit,
        })
    }

    fn statement(&mut self) -> Result<Statement, SyntaxError> {
        let stmt = if self.eat_kw("SHOW") {
            self.expect_kw("TABLES")?;
            Statement::ShowTables
        } else if self.eat_kw("DESC") || self.eat_kw("DESCRIBE") {
            Statement::Describe(self.ident()?)
        } else if self.eat_kw("SELECT") {
            Statement::Select(Box::new(self.select()?))
        } else {
            return self.fail();
        };
        self.eat(&Tok::Semi);
        if self.at < self.tokens.len() {
            return self.fail();
        }
        Ok(stmt)
    }
}

pub fn parse(src: &str) -> Result<Statement, SyntaxError> {
    let tokens = lex(src).map_err(|e| SyntaxError(e.0))?;
    let mut p = Parser {
        tokens,
        at: 0,
        end: src.len(),
    };
    p.statement()
}

fn quote_ident(f: &mut fmt::Formatter<'_>, name: &str) -> fmt::Result {
    let plain = name.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
        && !is_reserved(name);
    if plain {
        f.write_str(name)
    } else {
        write!(f, "`{name}`")
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(t) = &self.table {
            quote_ident(f, t)?;
            f.write_str(".")?;
        }
        quote_ident(f, &self.column)
    }
}

impl fmt::Display for AggFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggFn::Count => "COUNT",
            AggFn::Sum => "SUM",
            AggFn::Avg => "AVG",
            AggFn::Min => "MIN",
            AggFn::Max => "MAX",
        })
    }
}

impl fmt::Display for CmpOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Ge => ">=",
        })
    }
}

impl fmt::Display for TableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        quote_ident(f, &self.name)?;
        if let Some(a) = &self.alias {
            f.write_str(" AS ")?;
            quote_ident(f, a)?;
        }
        Ok(())
    }
}

fn sql_literal(v: &Value) -> String {
    match v {
        Value::Text(s) => format!("'{}'", s.replace('\'', "''")),
        Value::Null => "NULL".into(),
        Value::Int(n) => n.to_string(),
        Value::Float(x) => format!("{x:?}"),
    }
}

impl fmt::Display for Statement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Statement::ShowTables => f.write_str("SHOW TABLES"),
            Statement::Describe(t) => {
                f.write_str("DESC ")?;
                quote_ident(f, t)
            }
            Statement::Select(s) => {
                f.write_str("SELECT ")?;
                for (i, item) in s.items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    match &item.expr {
                        Expr::Star => f.write_str("*")?,
                        Expr::Column(c) => write!(f, "{c}")?,
                        Expr::Aggregate(func, None) => write!(f, "{func}(*)")?,
                        Expr::Aggregate(func, Some(c)) => write!(f, "{func}({c})")?,
                    }
                    if let Some(a) = &item.alias {
                        f.write_str(" AS ")?;
                        quote_ident(f, a)?;
                    }
                }
                write!(f, " FROM {}", s.from)?;
                if let Some(j) = &s.join {
                    write!(f, " JOIN {} ON {} = {}", j.table, j.left, j.right)?;
                }
                for (i, c) in s.filters.iter().enumerate() {
                    let kw = if i == 0 { " WHERE " } else { " AND " };
                    write!(f, "{kw}{} {} {}", c.column, c.op, sql_literal(&c.value))?;
                }
                if let Some(o) = &s.order_by {
                    write!(f, " ORDER BY {} {}", o.column, if o.descending { "DESC" } else { "ASC" })?;
                }
                if let Some(n) = s.limit {
                    write!(f, " LIMIT {n}")?;
                }
                Ok(())
            }
        }
    }
}
