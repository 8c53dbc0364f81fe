use std::collections::HashMap;

use super::parser::{AggFn, CmpOp, ColumnRef, Expr, Select, TableRef};
use super::{Row, Table, ToySqlDb, Value};

struct Binding<'a> {
    /// Name the query refers to the table by: its alias if given.
    name: &'a str,
    table: &'a Table,
    offset: usize,
}

fn bind<'a>(db: &'a ToySqlDb, r: &'a TableRef, offset: usize) -> Result<Binding<'a>, String> {
    let table = db
        .table(&r.name)
        .ok_or_else(|| format!("Table '{}.{}' doesn't exist", db.name, r.name))?;
    Ok(Binding {
        name: r.alias.as_deref().unwrap_or(&r.name),
        table,
        offset,
    })
}

fn resolve(bindings: &[Binding<'_>], col: &ColumnRef, clause: &str) -> Result<usize, String> {
    let unknown = || format!("Unknown column '{col}' in '{clause}'");
    match &col.table {
        Some(q) => {
            let b = bindings
                .iter()
                .find(|b| b.name.eq_ignore_ascii_case(q))
                .ok_or_else(unknown)?;
            b.table.column_index(&col.column).map(|i| b.offset + i).ok_or_else(unknown)
        }
        None => {
            let hits: Vec<usize> = bindings
                .iter()
                .filter_map(|b| b.table.column_index(&col.column).map(|i| b.offset + i))
                .collect();
            match hits.as_slice() {
                [] => Err(unknown()),
                [one] => Ok(*one),
                _ => Err(format!("Column '{}' in {clause} is ambiguous", col.column)),
            }
        }
    }
}

fn test(op: CmpOp, a: &Value, b: &Value) -> bool {
    use std::cmp::Ordering::*;
    match a.compare(b) {
        None => false,
        Some(o) => match op {
            CmpOp::Eq => o == Equal,
            CmpOp::Ne => o != Equal,
            CmpOp::Lt => o == Less,
            CmpOp::Gt => o == Greater,
            CmpOp::Le => o != Greater,
            CmpOp::Ge => o != Less,
        },
    }
}

/// Hashable form of a value consistent with `=`: integers and floats that
/// compare equal share a key; NULL has none.
#[derive(Hash, PartialEq, Eq)]
enum JoinKey {
    Num(u64),
    Text(String),
}

fn join_key(v: &Value) -> Option<JoinKey> {
    match v {
        Value::Int(n) => Some(JoinKey::Num(((*n as f64) + 0.0).to_bits())),
        Value::Float(x) if x.is_nan() => None,
        Value::Float(x) => Some(JoinKey::Num((x + 0.0).to_bits())),
        Value::Text(s) => Some(JoinKey::Text(s.clone())),
        Value::Null => None,
    }
}

enum Projection {
    Columns(Vec<usize>),
    Aggregates(Vec<(AggFn, Option<usize>)>),
}

fn aggregate(func: AggFn, col: Option<usize>, rows: &[Row], name: &str) -> Result<Value, String> {
    let Some(c) = col else {
        return Ok(Value::Int(rows.len() as i64));
    };
    let values: Vec<&Value> = rows.iter().map(|r| &r[c]).filter(|v| **v != Value::Null).collect();
    match func {
        AggFn::Count => Ok(Value::Int(values.len() as i64)),
        AggFn::Sum | AggFn::Avg => {
            if values.iter().any(|v| matches!(v, Value::Text(_))) {
                return Err(format!("Incorrect arguments to {func} on text column '{name}'"));
            }
            if values.is_empty() {
                return Ok(Value::Null);
            }
            let all_int = values.iter().all(|v| matches!(v, Value::Int(_)));
            if func == AggFn::Sum && all_int {
                let mut total: i64 = 0;
                for v in &values {
                    if let Value::Int(n) = v {
                        total = total.checked_add(*n).ok_or("BIGINT value is out of range")?;
                    }
                }
                return Ok(Value::Int(total));
            }
            let sum: f64 = values.iter().filter_map(|v| v.as_f64()).sum();
            Ok(Value::Float(if func == AggFn::Avg { sum / values.len() as f64 } else { sum }))
        }
        AggFn::Min | AggFn::Max => {
            let pick = values.into_iter().reduce(|a, b| {
                let o = b.sort_cmp(a);
                let take_b = if func == AggFn::Min { o.is_lt() } else { o.is_gt() };
                if take_b {
                    b
                } else {
                    a
                }
            });
            Ok(pick.cloned().unwrap_or(Value::Null))
        }
    }
}

pub(super) fn select(db: &ToySqlDb, q: &Select) -> Result<Vec<Row>, String> {
    let mut bindings = vec![bind(db, &q.from, 0)?];
    if let Some(j) = &q.join {
        let width = bindings[0].table.columns.len();
        bindings.push(bind(db, &j.table, width)?);
    }
    if let [a, b] = bindings.as_slice() {
        if a.name.eq_ignore_ascii_case(b.name) {
            return Err(format!("Not unique table/alias: '{}'", b.name));
        }
    }

    let has_agg = q.items.iter().any(|i| matches!(i.expr, Expr::Aggregate(..)));
    let projection = if has_agg {
        let mut aggs = Vec::new();
        for (n, item) in q.items.iter().enumerate() {
            match &item.expr {
                Expr::Aggregate(f, arg) => {
                    let col = arg.as_ref().map(|c| resolve(&bindings, c, "field list")).transpose()?;
                    aggs.push((*f, col));
                }
                Expr::Column(c) => {
                    resolve(&bindings, c, "field list")?;
                    return Err(format!(
                        "In aggregated query without GROUP BY, expression #{} of SELECT list contains \
                         nonaggregated column '{c}'; this is incompatible with sql_mode=only_full_group_by",
                        n + 1
                    ));
                }
                Expr::Star => {
                    return Err(format!(
                        "In aggregated query without GROUP BY, expression #{} of SELECT list contains \
                         nonaggregated column '*'; this is incompatible with sql_mode=only_full_group_by",
                        n + 1
                    ))
                }
            }
        }
        Projection::Aggregates(aggs)
    } else {
        let mut cols = Vec::new();
        for item in &q.items {
            match &item.expr {
                Expr::Star => {
                    for b in &bindings {
                        cols.extend(b.offset..b.offset + b.table.columns.len());
                    }
                }
                Expr::Column(c) => cols.push(resolve(&bindings, c, "field list")?),
                Expr::Aggregate(..) => unreachable!("handled above"),
            }
        }
        Projection::Columns(cols)
    };

    let join_cols = match &q.join {
        Some(j) => {
            let l = resolve(&bindings, &j.left, "on clause")?;
            let r = resolve(&bindings, &j.right, "on clause")?;
            Some((l, r))
        }
        None => None,
    };
    let filters = q
        .filters
        .iter()
        .map(|c| resolve(&bindings, &c.column, "where clause").map(|i| (i, c.op, &c.value)))
        .collect::<Result<Vec<_>, _>>()?;
    let order = match &q.order_by {
        Some(o) => {
            let by_alias = if o.column.table.is_none() {
                q.items.iter().find_map(|i| match (&i.alias, &i.expr) {
                    (Some(a), Expr::Column(c)) if a.eq_ignore_ascii_case(&o.column.column) => Some(c),
                    _ => None,
                })
            } else {
                None
            };
            let col = match by_alias {
                Some(c) => resolve(&bindings, c, "order clause")?,
                None if has_agg => {
                    let aliased = q.items.iter().any(|i| {
                        i.alias.as_deref().is_some_and(|a| a.eq_ignore_ascii_case(&o.column.column))
                    });
                    if aliased {
                        0
                    } else {
                        resolve(&bindings, &o.column, "order clause")?
                    }
                }
                None => resolve(&bindings, &o.column, "order clause")?,
            };
            Some((col, o.descending))
        }
        None => None,
    };

    let mut rows: Vec<Row> = match (&q.join, join_cols) {
        (Some(_), Some((l, r))) => {
            let left = bindings[0].table;
            let right = bindings[1].table;
            let width = left.columns.len();
            // Put the left-table key first whichever way round ON was written.
            let (lk, rk) = if l < width { (l, r) } else { (r, l) };
            if lk >= width || rk < width {
                // Both sides on one table: a filter over the cross product.
                let mut out = Vec::new();
                for a in &left.rows {
                    for b in &right.rows {
                        let row: Row = a.iter().chain(b.iter()).cloned().collect();
                        if test(CmpOp::Eq, &row[l], &row[r]) {
                            out.push(row);
                        }
                    }
                }
                out
            } else {
                let mut index: HashMap<JoinKey, Vec<usize>> = HashMap::new();
                for (i, b) in right.rows.iter().enumerate() {
                    if let Some(k) = join_key(&b[rk - width]) {
                        index.entry(k).or_default().push(i);
                    }
                }
                let mut out = Vec::new();
                for a in &left.rows {
                    let Some(k) = join_key(&a[lk]) else { continue };
                    for &i in index.get(&k).map(Vec::as_slice).unwrap_or(&[]) {
                        out.push(a.iter().chain(right.rows[i].iter()).cloned().collect());
                    }
                }
                out
            }
        }
        _ => bindings[0].table.rows.clone(),
    };
    rows.retain(|row| filters.iter().all(|(i, op, v)| test(*op, &row[*i], v)));

    match projection {
        Projection::Aggregates(aggs) => {
            let mut row = Vec::with_capacity(aggs.len());
            for (n, (f, col)) in aggs.iter().enumerate() {
                let name = match &q.items[n].expr {
                    Expr::Aggregate(_, Some(c)) => c.to_string(),
                    _ => "*".into(),
                };
                row.push(aggregate(*f, *col, &rows, &name)?);
            }
            let keep = q.limit.map_or(1, |n| n.min(1) as usize);
            Ok(std::iter::once(row).take(keep).collect())
        }
        Projection::Columns(cols) => {
            if let Some((col, desc)) = order {
                rows.sort_by(|a, b| {
                    let o = a[col].sort_cmp(&b[col]);
                    if desc {
                        o.reverse()
                    } else {
                        o
                    }
                });
            }
            if let Some(n) = q.limit {
                rows.truncate(n as usize);
            }
            Ok(rows
                .into_iter()
                .map(|r| cols.iter().map(|&c| r[c].clone()).collect())
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{ColumnType::*, SqlResult, Table, ToySqlDb, Value};

    fn db() -> ToySqlDb {
        let t = |s: &str| Value::Text(s.into());
        ToySqlDb::new(
            "shop",
            vec![
                Table::new("item", &[("id", Int), ("name", Text), ("price", Float)])
                    .with_row(vec![Value::Int(1), t("pen"), Value::Float(1.5)])
                    .with_row(vec![Value::Int(2), t("ink"), Value::Float(4.0)])
                    .with_row(vec![Value::Int(3), t("pad"), Value::Float(2.5)]),
                Table::new("sale", &[("item_id", Int), ("qty", Int)])
                    .with_row(vec![Value::Int(2), Value::Int(5)])
                    .with_row(vec![Value::Int(1), Value::Int(1)])
                    .with_row(vec![Value::Int(2), Value::Int(2)]),
            ],
        )
        .unwrap()
    }

    fn run(q: &str) -> String {
        db().execute(q).render()
    }

    #[test]
    fn where_order_limit() {
        assert_eq!(run("SELECT name FROM item WHERE price > 2 ORDER BY price DESC"), "[('ink',), ('pad',)]");
        assert_eq!(run("SELECT name FROM item ORDER BY name LIMIT 2"), "[('ink',), ('pad',)]");
        assert_eq!(run("SELECT name AS n FROM item ORDER BY n DESC LIMIT 1"), "[('pen',)]");
        assert_eq!(run("SELECT * FROM item WHERE id = 3"), "[(3, 'pad', 2.5)]");
        assert_eq!(run("SELECT name FROM item WHERE name = 3"), "[]");
    }

    #[test]
    fn join_keeps_left_order() {
        assert_eq!(
            run("SELECT i.name, s.qty FROM item AS i JOIN sale AS s ON s.item_id = i.id"),
            "[('pen', 1), ('ink', 5), ('ink', 2)]"
        );
        assert_eq!(
            run("SELECT name, qty FROM sale JOIN item ON item_id = id WHERE qty >= 2"),
            "[('ink', 5), ('ink', 2)]"
        );
    }

    #[test]
    fn aggregates() {
        assert_eq!(run("SELECT SUM(qty), AVG(qty), MIN(qty), MAX(qty), COUNT(qty) FROM sale"), "[(8, 2.6666666666666665, 1, 5, 3)]");
        assert_eq!(run("SELECT SUM(price) FROM item"), "[(8.0,)]");
        assert_eq!(run("SELECT MAX(name) FROM item"), "[('pen',)]");
        assert_eq!(run("SELECT SUM(qty), AVG(qty), MIN(qty), COUNT(*) FROM sale WHERE qty > 100"), "[(None, None, None, 0)]");
        assert_eq!(run("SELECT COUNT(*) FROM sale LIMIT 0"), "[]");
    }

    #[test]
    fn errors() {
        assert!(run("SELECT name, COUNT(*) FROM item").contains("nonaggregated column 'name'"));
        assert_eq!(
            run("SELECT id FROM item JOIN sale ON id = item_id JOIN x"),
            "Error executing query: You have an error in your SQL syntax; check the manual that corresponds to your MySQL server version for the right syntax to use near 'JOIN x' at line 1"
        );
        assert_eq!(
            run("SELECT x.id FROM item"),
            "Error executing query: Unknown column 'x.id' in 'field list'"
        );
        assert_eq!(
            run("SELECT name FROM item WHERE cost > 1"),
            "Error executing query: Unknown column 'cost' in 'where clause'"
        );
        assert!(matches!(db().execute("SELECT SUM(name) FROM item"), SqlResult::Error(_)));
        let both = ToySqlDb::new(
            "d",
            vec![Table::new("a", &[("id", Int)]), Table::new("b", &[("id", Int)])],
        )
        .unwrap();
        assert_eq!(
            both.execute("SELECT id FROM a JOIN b ON a.id = b.id").render(),
            "Error executing query: Column 'id' in field list is ambiguous"
        );
    }
}
