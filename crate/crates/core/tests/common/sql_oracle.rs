//! Random query generator and a nested-loop reference evaluator, working on
//! the raw fixture JSON.

use std::cmp::Ordering;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::Value as Json;

use stateflow::env::sql::Value;

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn from_json(v: &Json) -> Cell {
        match v {
            Json::Null => Cell::Null,
            Json::Number(n) if n.is_i64() => Cell::Int(n.as_i64().unwrap()),
            Json::Number(n) => Cell::Float(n.as_f64().unwrap()),
            Json::String(s) => Cell::Text(s.clone()),
            other => panic!("unexpected cell {other}"),
        }
    }

    fn num(&self) -> Option<f64> {
        match self {
            Cell::Int(n) => Some(*n as f64),
            Cell::Float(x) => Some(*x),
            _ => None,
        }
    }

    fn sql(&self) -> String {
        match self {
            Cell::Int(n) => n.to_string(),
            Cell::Float(x) => format!("{x:?}"),
            Cell::Text(s) => format!("'{}'", s.replace('\'', "''")),
            Cell::Null => "NULL".into(),
        }
    }

    pub fn matches(&self, v: &Value) -> bool {
        match (self, v) {
            (Cell::Null, Value::Null) => true,
            (Cell::Int(a), Value::Int(b)) => a == b,
            (Cell::Text(a), Value::Text(b)) => a == b,
            (Cell::Float(a), Value::Float(b)) => (a - b).abs() <= 1e-9 * a.abs().max(1.0),
            _ => false,
        }
    }
}

/// SQL comparison: `None` when the operands are incomparable.
fn sql_cmp(a: &Cell, b: &Cell) -> Option<Ordering> {
    match (a, b) {
        (Cell::Text(x), Cell::Text(y)) => Some(x.as_bytes().cmp(y.as_bytes())),
        (Cell::Int(x), Cell::Int(y)) => Some(x.cmp(y)),
        _ => a.num()?.partial_cmp(&b.num()?),
    }
}

/// Sorting order: NULL, then numbers, then text.
fn sort_cmp(a: &Cell, b: &Cell) -> Ordering {
    let rank = |c: &Cell| match c {
        Cell::Null => 0,
        Cell::Int(_) | Cell::Float(_) => 1,
        Cell::Text(_) => 2,
    };
    rank(a).cmp(&rank(b)).then_with(|| sql_cmp(a, b).unwrap_or(Ordering::Equal))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    Eq,
    Ne,
    Lt,
    Gt,
    Le,
    Ge,
}

impl Op {
    const ALL: [Op; 6] = [Op::Eq, Op::Ne, Op::Lt, Op::Gt, Op::Le, Op::Ge];

    fn sql(self) -> &'static str {
        match self {
            Op::Eq => "=",
            Op::Ne => "!=",
            Op::Lt => "<",
            Op::Gt => ">",
            Op::Le => "<=",
            Op::Ge => ">=",
        }
    }

    fn holds(self, a: &Cell, b: &Cell) -> bool {
        let Some(o) = sql_cmp(a, b) else { return false };
        match self {
            Op::Eq => o.is_eq(),
            Op::Ne => o.is_ne(),
            Op::Lt => o.is_lt(),
            Op::Gt => o.is_gt(),
            Op::Le => o.is_le(),
            Op::Ge => o.is_ge(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Agg {
    CountStar,
    Count,
    Sum,
    Avg,
    Min,
    Max,
}

#[derive(Debug, Clone)]
pub struct OTable {
    pub name: String,
    pub columns: Vec<(String, String)>,
    pub rows: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone)]
pub struct ODb {
    pub name: String,
    pub tables: Vec<OTable>,
}

impl ODb {
    pub fn from_json(doc: &Json) -> ODb {
        let tables = doc["tables"]
            .as_array()
            .unwrap()
            .iter()
            .map(|t| OTable {
                name: t["name"].as_str().unwrap().to_string(),
                columns: t["columns"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|c| (c["name"].as_str().unwrap().to_string(), c["type"].as_str().unwrap().to_string()))
                    .collect(),
                rows: t["rows"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|r| r.as_array().unwrap().iter().map(Cell::from_json).collect())
                    .collect(),
            })
            .collect();
        ODb {
            name: doc["name"].as_str().unwrap().to_string(),
            tables,
        }
    }

    fn table(&self, name: &str) -> usize {
        self.tables.iter().position(|t| t.name == name).unwrap()
    }
}

/// Column reference: which of the query's tables (0 or 1) and column index.
type Col = (usize, usize);

#[derive(Debug, Clone)]
pub enum Projection {
    Star,
    Columns(Vec<Col>),
    Aggregates(Vec<(Agg, Option<Col>)>),
}

#[derive(Debug, Clone)]
pub struct Query {
    /// Indexes into `ODb::tables`; one or two.
    pub tables: Vec<usize>,
    pub join: Option<(Col, Col)>,
    pub projection: Projection,
    pub filters: Vec<(Col, Op, Cell)>,
    /// Order column and whether descending. Always part of the projection.
    pub order: Option<(Col, bool)>,
    pub limit: Option<u64>,
}

const ALIASES: [&str; 2] = ["T1", "T2"];

impl Query {
    fn col_sql(&self, db: &ODb, (t, c): Col) -> String {
        format!("{}.{}", ALIASES[t], db.tables[self.tables[t]].columns[c].0)
    }

    pub fn to_sql(&self, db: &ODb) -> String {
        let items = match &self.projection {
            Projection::Star => "*".to_string(),
            Projection::Columns(cols) => cols.iter().map(|c| self.col_sql(db, *c)).collect::<Vec<_>>().join(", "),
            Projection::Aggregates(aggs) => aggs
                .iter()
                .map(|(f, c)| {
                    let arg = c.map_or("*".to_string(), |c| self.col_sql(db, c));
                    let name = match f {
                        Agg::CountStar | Agg::Count => "COUNT",
                        Agg::Sum => "SUM",
                        Agg::Avg => "AVG",
                        Agg::Min => "MIN",
                        Agg::Max => "MAX",
                    };
                    format!("{name}({arg})")
                })
                .collect::<Vec<_>>()
                .join(", "),
        };
        let mut sql = format!("SELECT {items} FROM {} AS T1", db.tables[self.tables[0]].name);
        if let Some((l, r)) = self.join {
            sql += &format!(
                " JOIN {} AS T2 ON {} = {}",
                db.tables[self.tables[1]].name,
                self.col_sql(db, l),
                self.col_sql(db, r)
            );
        }
        for (i, (c, op, lit)) in self.filters.iter().enumerate() {
            sql += if i == 0 { " WHERE " } else { " AND " };
            sql += &format!("{} {} {}", self.col_sql(db, *c), op.sql(), lit.sql());
        }
        if let Some((c, desc)) = self.order {
            sql += &format!(" ORDER BY {}{}", self.col_sql(db, c), if desc { " DESC" } else { "" });
        }
        if let Some(n) = self.limit {
            sql += &format!(" LIMIT {n}");
        }
        sql
    }

    /// Output columns as (table, column) pairs, in order.
    fn output_columns(&self, db: &ODb) -> Vec<Col> {
        match &self.projection {
            Projection::Star => (0..self.tables.len())
                .flat_map(|t| (0..db.tables[self.tables[t]].columns.len()).map(move |c| (t, c)))
                .collect(),
            Projection::Columns(cols) => cols.clone(),
            Projection::Aggregates(_) => Vec::new(),
        }
    }

    /// Position of the order column in the output, when ordered.
    pub fn order_position(&self, db: &ODb) -> Option<usize> {
        let (c, _) = self.order?;
        self.output_columns(db).iter().position(|x| *x == c)
    }
}

fn aggregate(f: Agg, col: Option<usize>, rows: &[Vec<Cell>]) -> Cell {
    let Some(c) = col else {
        return Cell::Int(rows.len() as i64);
    };
    let vals: Vec<&Cell> = rows.iter().map(|r| &r[c]).filter(|v| **v != Cell::Null).collect();
    match f {
        Agg::CountStar | Agg::Count => Cell::Int(vals.len() as i64),
        Agg::Sum | Agg::Avg if vals.is_empty() => Cell::Null,
        Agg::Sum if vals.iter().all(|v| matches!(v, Cell::Int(_))) => {
            Cell::Int(vals.iter().map(|v| if let Cell::Int(n) = v { *n } else { 0 }).sum())
        }
        Agg::Sum => Cell::Float(vals.iter().map(|v| v.num().unwrap()).sum()),
        Agg::Avg => Cell::Float(vals.iter().map(|v| v.num().unwrap()).sum::<f64>() / vals.len() as f64),
        Agg::Min | Agg::Max => {
            let mut best: Option<&Cell> = None;
            for v in vals {
                best = match best {
                    None => Some(v),
                    Some(b) => {
                        let o = sort_cmp(v, b);
                        let better = if f == Agg::Min { o.is_lt() } else { o.is_gt() };
                        Some(if better { v } else { b })
                    }
                };
            }
            best.cloned().unwrap_or(Cell::Null)
        }
    }
}

/// Evaluates the query by brute force. For ordered queries rows come back
/// fully sorted but not truncated; the caller handles ties at the cut.
pub fn evaluate(db: &ODb, q: &Query) -> Vec<Vec<Cell>> {
    let widths: Vec<usize> = q.tables.iter().map(|t| db.tables[*t].columns.len()).collect();
    let flat = |(t, c): Col| if t == 0 { c } else { widths[0] + c };
    let mut rows: Vec<Vec<Cell>> = Vec::new();
    let left = &db.tables[q.tables[0]].rows;
    match q.join {
        None => rows.extend(left.iter().cloned()),
        Some((l, r)) => {
            let right = &db.tables[q.tables[1]].rows;
            for a in left {
                for b in right {
                    let row: Vec<Cell> = a.iter().chain(b).cloned().collect();
                    if Op::Eq.holds(&row[flat(l)], &row[flat(r)]) {
                        rows.push(row);
                    }
                }
            }
        }
    }
    rows.retain(|row| q.filters.iter().all(|(c, op, lit)| op.holds(&row[flat(*c)], lit)));
    if let Projection::Aggregates(aggs) = &q.projection {
        if q.limit == Some(0) {
            return Vec::new();
        }
        return vec![aggs.iter().map(|(f, c)| aggregate(*f, c.map(flat), &rows)).collect()];
    }
    if let Some((c, desc)) = q.order {
        let i = flat(c);
        rows.sort_by(|a, b| {
            let o = sort_cmp(&a[i], &b[i]);
            if desc {
                o.reverse()
            } else {
                o
            }
        });
    }
    let cols: Vec<usize> = q.output_columns(db).into_iter().map(flat).collect();
    rows.into_iter().map(|r| cols.iter().map(|&c| r[c].clone()).collect()).collect()
}

fn render(row: &[Cell]) -> String {
    format!("{row:?}")
}

fn row_matches(expected: &[Cell], got: &[Value]) -> bool {
    expected.len() == got.len() && expected.iter().zip(got).all(|(e, g)| e.matches(g))
}

/// Removes one row matching `got` from `pool`; false if none does.
fn take_match(pool: &mut Vec<&[Cell]>, got: &[Value]) -> bool {
    match pool.iter().position(|e| row_matches(e, got)) {
        Some(i) => {
            pool.swap_remove(i);
            true
        }
        None => false,
    }
}

/// Checks the engine's rows against the oracle's. `Err` explains the
/// first disagreement.
pub fn agree(db: &ODb, q: &Query, expected: &[Vec<Cell>], got: &[Vec<Value>]) -> Result<(), String> {
    let fail = |why: &str| {
        Err(format!(
            "{why}\n  sql: {}\n  expected: {:?}\n  got: {:?}",
            q.to_sql(db),
            expected.iter().map(|r| render(r)).collect::<Vec<_>>(),
            got
        ))
    };
    if let Projection::Aggregates(_) = q.projection {
        if expected.len() != got.len() || !expected.iter().zip(got).all(|(e, g)| row_matches(e, g)) {
            return fail("aggregate mismatch");
        }
        return Ok(());
    }
    let keep = q.limit.map_or(expected.len(), |n| (n as usize).min(expected.len()));
    if got.len() != keep {
        return fail("row count mismatch");
    }
    match q.order_position(db) {
        None if keep == expected.len() => {
            let mut pool: Vec<&[Cell]> = expected.iter().map(|r| r.as_slice()).collect();
            if !got.iter().all(|g| take_match(&mut pool, g)) {
                return fail("row multiset mismatch");
            }
        }
        None => {
            let mut pool: Vec<&[Cell]> = expected.iter().map(|r| r.as_slice()).collect();
            if !got.iter().all(|g| take_match(&mut pool, g)) {
                return fail("limited rows are not a subset of the full result");
            }
        }
        Some(k) => {
            for (e, g) in expected.iter().zip(got) {
                if !e[k].matches(&g[k]) {
                    return fail("order key sequence mismatch");
                }
            }
            let boundary = expected.get(keep.wrapping_sub(1)).map(|r| r[k].clone());
            let cut_splits_ties = keep < expected.len() && boundary.as_ref() == Some(&expected[keep][k]);
            let mut pool: Vec<&[Cell]> = if cut_splits_ties {
                let b = boundary.unwrap();
                expected[..keep]
                    .iter()
                    .filter(|r| r[k] != b)
                    .chain(expected.iter().filter(|r| r[k] == b))
                    .map(|r| r.as_slice())
                    .collect()
            } else {
                expected[..keep].iter().map(|r| r.as_slice()).collect()
            };
            if !got.iter().all(|g| take_match(&mut pool, g)) {
                return fail("ordered rows mismatch");
            }
        }
    }
    Ok(())
}

/// Join pairs that make sense for each fixture database.
fn join_pairs(db: &str) -> &'static [(&'static str, &'static str, &'static str, &'static str)] {
    match db {
        "network_1" => &[
            ("friend", "student_id", "highschooler", "ID"),
            ("friend", "friend_id", "highschooler", "ID"),
            ("highschooler", "ID", "likes", "liked_id"),
            ("likes", "student_id", "highschooler", "ID"),
            ("friend", "student_id", "likes", "student_id"),
        ],
        "concert_singer" => &[
            ("concert", "stadium_id", "stadium", "stadium_id"),
            ("stadium", "stadium_id", "concert", "stadium_id"),
            ("singer", "singer_id", "concert", "concert_id"),
        ],
        "pets_1" => &[
            ("student", "stuid", "has_pet", "stuid"),
            ("has_pet", "petid", "pets", "petid"),
            ("student", "age", "pets", "pet_age"),
        ],
        _ => &[],
    }
}

fn literal(rng: &mut StdRng, db: &ODb, table: usize, col: usize) -> Cell {
    let t = &db.tables[table];
    let base = t.rows.choose(rng).map(|r| r[col].clone()).unwrap_or(Cell::Null);
    if rng.gen_bool(0.7) {
        return base;
    }
    match base {
        Cell::Int(n) => Cell::Int(n + rng.gen_range(-3..=3)),
        Cell::Float(x) => Cell::Float(x + rng.gen_range(-5..=5) as f64 * 0.5),
        Cell::Text(_) => Cell::Text(["A", "M", "zz", "Park", "Tracy"].choose(rng).unwrap().to_string()),
        Cell::Null => Cell::Int(0),
    }
}

fn is_numeric(db: &ODb, q: &Query, (t, c): Col) -> bool {
    db.tables[q.tables[t]].columns[c].1 != "text"
}

pub fn random_query(rng: &mut StdRng, db: &ODb) -> Query {
    let mut q = Query {
        tables: Vec::new(),
        join: None,
        projection: Projection::Star,
        filters: Vec::new(),
        order: None,
        limit: None,
    };
    let pairs = join_pairs(&db.name);
    if !pairs.is_empty() && rng.gen_bool(0.4) {
        let (lt, lc, rt, rc) = *pairs.choose(rng).unwrap();
        let (l, r) = (db.table(lt), db.table(rt));
        let lci = db.tables[l].columns.iter().position(|c| c.0 == lc).unwrap();
        let rci = db.tables[r].columns.iter().position(|c| c.0 == rc).unwrap();
        q.tables = vec![l, r];
        q.join = Some(if rng.gen_bool(0.5) { ((0, lci), (1, rci)) } else { ((1, rci), (0, lci)) });
    } else {
        q.tables = vec![rng.gen_range(0..db.tables.len())];
    }
    let all: Vec<Col> = (0..q.tables.len())
        .flat_map(|t| (0..db.tables[q.tables[t]].columns.len()).map(move |c| (t, c)))
        .collect();
    for _ in 0..rng.gen_range(0..=3) {
        let c = *all.choose(rng).unwrap();
        let op = *Op::ALL.choose(rng).unwrap();
        let lit = literal(rng, db, q.tables[c.0], c.1);
        q.filters.push((c, op, lit));
    }
    let roll: f64 = rng.gen();
    if roll < 0.25 {
        let mut aggs = Vec::new();
        for _ in 0..rng.gen_range(1..=3) {
            let c = *all.choose(rng).unwrap();
            let f = *[Agg::CountStar, Agg::Count, Agg::Sum, Agg::Avg, Agg::Min, Agg::Max].choose(rng).unwrap();
            let f = if matches!(f, Agg::Sum | Agg::Avg) && !is_numeric(db, &q, c) { Agg::Count } else { f };
            aggs.push((f, (f != Agg::CountStar).then_some(c)));
        }
        q.projection = Projection::Aggregates(aggs);
        if rng.gen_bool(0.2) {
            q.limit = Some(rng.gen_range(0..=2));
        }
        return q;
    }
    if roll > 0.9 {
        q.projection = Projection::Star;
    } else {
        let mut cols = all.clone();
        cols.shuffle(rng);
        cols.truncate(rng.gen_range(1..=3));
        q.projection = Projection::Columns(cols);
    }
    if rng.gen_bool(0.5) {
        let c = *all.choose(rng).unwrap();
        q.order = Some((c, rng.gen_bool(0.5)));
        if let Projection::Columns(cols) = &mut q.projection {
            if !cols.contains(&c) {
                cols.push(c);
            }
        }
    }
    if rng.gen_bool(0.35) {
        q.limit = Some(rng.gen_range(0..=6));
    }
    q
}

/// Runs `n` random queries spread over the fixture databases. Returns how
/// many were checked and how many of those returned rows, or the first
/// disagreement.
pub fn check_random_queries(
    dbs: &[(ODb, stateflow::env::sql::ToySqlDb)],
    n: usize,
    seed: u64,
) -> Result<(usize, usize), String> {
    use rand::SeedableRng;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut checked = 0;
    let mut nonempty = 0;
    for i in 0..n {
        let (odb, engine) = &dbs[i % dbs.len()];
        let q = random_query(&mut rng, odb);
        let sql = q.to_sql(odb);
        let result = engine.execute(&sql);
        let Some(rows) = result.rows() else {
            return Err(format!("engine rejected `{sql}`: {}", result.render()));
        };
        let expected = evaluate(odb, &q);
        agree(odb, &q, &expected, rows)?;
        checked += 1;
        nonempty += !rows.is_empty() as usize;
    }
    Ok((checked, nonempty))
}
