//! Interpreter for the SQL subset produced by `cjt_core::sqlgen`: comma
//! joins, conjunctive WHERE clauses, arithmetic, `IN` lists, GROUP BY and
//! the SUM/MIN/MAX/COUNT(*) aggregates, plus `CREATE TABLE … AS SELECT`.

pub mod golden;

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;

use cjt_core::jointree::JoinGraph;
use cjt_core::relation::AnnotatedRelation;
use cjt_core::semiring::{Annotation, Extended, Gram, SemiringKind};
use cjt_core::sqlgen::{annotation_columns, base_table_name};
use cjt_core::value::{attr, Value};
use sqlparser::ast::{
    BinaryOperator, Expr, FunctionArg, FunctionArgExpr, FunctionArguments, GroupByExpr, ObjectName,
    ObjectNamePart, SelectItem, SetExpr, Statement, TableFactor, UnaryOperator, Value as SqlValue,
};
use sqlparser::dialect::GenericDialect;
use sqlparser::parser::Parser;

#[derive(Debug, Clone)]
pub struct ShimError(pub String);

impl fmt::Display for ShimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ShimError {}

pub type Result<T> = std::result::Result<T, ShimError>;

fn err<T>(msg: impl Into<String>) -> Result<T> {
    Err(ShimError(msg.into()))
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Null,
    Num(f64),
    Str(String),
}

impl Cell {
    fn num(&self) -> Result<Option<f64>> {
        match self {
            Cell::Null => Ok(None),
            Cell::Num(x) => Ok(Some(*x)),
            Cell::Str(s) => err(format!("string `{s}` in arithmetic")),
        }
    }

    fn key(&self) -> String {
        match self {
            Cell::Null => "\u{0}N".into(),
            Cell::Num(x) => format!("\u{0}#{}", x.to_bits()),
            Cell::Str(s) => format!("\u{0}'{s}"),
        }
    }

    fn compare(&self, other: &Cell) -> Option<Ordering> {
        match (self, other) {
            (Cell::Num(a), Cell::Num(b)) => Some(a.total_cmp(b)),
            (Cell::Str(a), Cell::Str(b)) => Some(a.cmp(b)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    fn position(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Reads the table as an annotated relation of `kind`: annotation columns
    /// are folded back into annotations, every other column is an attribute.
    pub fn to_relation(&self, kind: SemiringKind) -> Result<AnnotatedRelation> {
        let ann_cols = annotation_columns(kind);
        let mut ann_pos = Vec::new();
        for c in &ann_cols {
            ann_pos.push(self.position(c).ok_or_else(|| ShimError(format!("missing annotation column {c}")))?);
        }
        let attr_pos: Vec<usize> = (0..self.columns.len()).filter(|i| !ann_pos.contains(i)).collect();
        let attrs = attr_pos.iter().map(|i| attr(&self.columns[*i])).collect();
        let mut rows = Vec::new();
        for row in &self.rows {
            let tuple = attr_pos
                .iter()
                .map(|i| match &row[*i] {
                    Cell::Num(x) => Ok(Value::num(*x)),
                    Cell::Str(s) => Ok(Value::cat(s)),
                    Cell::Null => err("NULL attribute value"),
                })
                .collect::<Result<Vec<_>>>()?;
            let f = |k: usize| row[ann_pos[k]].num().map(|x| x.unwrap_or(0.0));
            let ann = match kind {
                SemiringKind::NaturalCount => Annotation::Count(f(0)? as u64),
                SemiringKind::RealSum => Annotation::Real(f(0)?),
                SemiringKind::CountSumPair => Annotation::CountSum { count: f(0)? as u64, sum: f(1)? },
                SemiringKind::TropicalMin | SemiringKind::TropicalMax => {
                    let e = match row[ann_pos[0]].num()? {
                        Some(x) => Extended::Finite(x),
                        None => Extended::Infinite,
                    };
                    if kind == SemiringKind::TropicalMin { Annotation::Min(e) } else { Annotation::Max(e) }
                }
                SemiringKind::Gram { vars } => {
                    let n = vars + 1;
                    let mut m = vec![vec![0.0; n]; n];
                    m[0][0] = f(0)?;
                    for i in 1..n {
                        m[0][i] = f(i)?;
                        m[i][0] = m[0][i];
                    }
                    let mut k = n;
                    for i in 1..n {
                        for j in i..n {
                            m[i][j] = f(k)?;
                            m[j][i] = m[i][j];
                            k += 1;
                        }
                    }
                    Annotation::Gram(Box::new(Gram::from_rows(&m)))
                }
            };
            rows.push((tuple, ann));
        }
        AnnotatedRelation::from_rows(attrs, kind, rows).map_err(|e| ShimError(e.to_string()))
    }
}

#[derive(Debug, Default)]
pub struct Database {
    pub tables: HashMap<String, Table>,
}

/// Joined row with its (alias, column) layout.
struct Bound<'a> {
    layout: &'a [(String, String)],
    row: &'a [Cell],
}

impl Database {
    pub fn new() -> Database {
        Database::default()
    }

    /// Every version of every relation of `g`, under the emitter's names.
    pub fn from_graph(g: &JoinGraph) -> Result<Database> {
        let mut db = Database::new();
        for rel in g.relations() {
            for (version, t) in &rel.versions {
                let name = base_table_name(g, &rel.name, version).map_err(|e| ShimError(e.to_string()))?;
                let columns = rel.schema.names().map(str::to_string).collect();
                let rows = t
                    .rows
                    .iter()
                    .map(|r| {
                        r.iter()
                            .map(|v| match v {
                                Value::Num(x) => Cell::Num(x.0),
                                Value::Cat(s) => Cell::Str(s.as_str().to_string()),
                            })
                            .collect()
                    })
                    .collect();
                db.tables.insert(name, Table { columns, rows });
            }
        }
        Ok(db)
    }

    /// Runs every statement; returns the result of the last SELECT.
    pub fn run_script(&mut self, sql: &str) -> Result<Option<Table>> {
        let stmts = Parser::parse_sql(&GenericDialect {}, sql).map_err(|e| ShimError(e.to_string()))?;
        let mut last = None;
        for s in stmts {
            match s {
                Statement::CreateTable(ct) => {
                    let q = ct.query.ok_or_else(|| ShimError("CREATE TABLE without AS SELECT".into()))?;
                    let t = self.query(&q.body)?;
                    self.tables.insert(object_name(&ct.name)?, t);
                }
                Statement::Query(q) => last = Some(self.query(&q.body)?),
                other => return err(format!("unsupported statement: {other}")),
            }
        }
        Ok(last)
    }

    fn query(&self, body: &SetExpr) -> Result<Table> {
        let SetExpr::Select(sel) = body else {
            return err("only plain SELECT is supported");
        };
        // FROM: comma-separated named tables
        let mut inputs: Vec<(String, &Table)> = Vec::new();
        for twj in &sel.from {
            if !twj.joins.is_empty() {
                return err("explicit JOIN is not supported");
            }
            let TableFactor::Table { name, alias, .. } = &twj.relation else {
                return err("unsupported table factor");
            };
            let tname = object_name(name)?;
            let t = self.tables.get(&tname).ok_or_else(|| ShimError(format!("unknown table {tname}")))?;
            let a = alias.as_ref().map(|a| a.name.value.clone()).unwrap_or(tname);
            inputs.push((a, t));
        }
        let mut conjuncts = Vec::new();
        if let Some(w) = &sel.selection {
            split_and(w, &mut conjuncts);
        }
        let mut applied = vec![false; conjuncts.len()];
        let mut layout: Vec<(String, String)> = Vec::new();
        let mut rows: Vec<Vec<Cell>> = vec![Vec::new()];
        for (alias, t) in &inputs {
            let mut next_layout = layout.clone();
            next_layout.extend(t.columns.iter().map(|c| (alias.clone(), c.clone())));
            // hash on equalities between the new table and bound columns
            let mut keys: Vec<(usize, usize)> = Vec::new();
            for (i, c) in conjuncts.iter().enumerate() {
                if applied[i] {
                    continue;
                }
                if let Some((l, r)) = equi_pair(c, &layout, alias, t) {
                    keys.push((l, r));
                    applied[i] = true;
                }
            }
            let mut index: HashMap<Vec<String>, Vec<usize>> = HashMap::new();
            for (ri, r) in t.rows.iter().enumerate() {
                index.entry(keys.iter().map(|(_, c)| r[*c].key()).collect()).or_default().push(ri);
            }
            let mut out = Vec::new();
            for left in &rows {
                let probe: Vec<String> = keys.iter().map(|(l, _)| left[*l].key()).collect();
                if let Some(hits) = index.get(&probe) {
                    for &ri in hits {
                        let mut row = left.clone();
                        row.extend(t.rows[ri].iter().cloned());
                        out.push(row);
                    }
                }
            }
            // remaining conjuncts that are now fully bound
            let mut ready = Vec::new();
            for (i, c) in conjuncts.iter().enumerate() {
                if !applied[i] && resolvable(c, &next_layout) {
                    ready.push(c);
                    applied[i] = true;
                }
            }
            if !ready.is_empty() {
                let mut kept = Vec::with_capacity(out.len());
                for row in out {
                    let b = Bound { layout: &next_layout, row: &row };
                    let mut ok = true;
                    for c in &ready {
                        if !truthy(&eval(c, &b)?) {
                            ok = false;
                            break;
                        }
                    }
                    if ok {
                        kept.push(row);
                    }
                }
                out = kept;
            }
            layout = next_layout;
            rows = out;
        }
        if let Some(i) = applied.iter().position(|a| !a) {
            return err(format!("unresolvable condition {}", conjuncts[i]));
        }
        // projection and grouping
        let group_exprs: Vec<&Expr> = match &sel.group_by {
            GroupByExpr::Expressions(es, _) => es.iter().collect(),
            GroupByExpr::All(_) => return err("GROUP BY ALL is not supported"),
        };
        let items: Vec<(&Expr, String)> = sel
            .projection
            .iter()
            .map(|it| match it {
                SelectItem::UnnamedExpr(e) => Ok((e, expr_name(e))),
                SelectItem::ExprWithAlias { expr, alias } => Ok((expr, alias.value.clone())),
                _ => err("unsupported select item"),
            })
            .collect::<Result<_>>()?;
        let has_agg = items.iter().any(|(e, _)| is_aggregate(e));
        let mut out = Table { columns: items.iter().map(|(_, n)| n.clone()).collect(), rows: Vec::new() };
        if !has_agg && group_exprs.is_empty() {
            for row in &rows {
                let b = Bound { layout: &layout, row };
                out.rows.push(items.iter().map(|(e, _)| eval(e, &b)).collect::<Result<_>>()?);
            }
            return Ok(out);
        }
        let mut groups: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
        let mut slot: HashMap<Vec<String>, usize> = HashMap::new();
        for (ri, row) in rows.iter().enumerate() {
            let b = Bound { layout: &layout, row };
            let key: Vec<String> = group_exprs.iter().map(|e| eval(e, &b).map(|c| c.key())).collect::<Result<_>>()?;
            let gi = *slot.entry(key.clone()).or_insert_with(|| {
                groups.push((key, Vec::new()));
                groups.len() - 1
            });
            groups[gi].1.push(ri);
        }
        if group_exprs.is_empty() && groups.is_empty() {
            groups.push((Vec::new(), Vec::new()));
        }
        for (_, members) in &groups {
            let mut row = Vec::with_capacity(items.len());
            for (e, _) in &items {
                row.push(if is_aggregate(e) {
                    aggregate(e, members, &rows, &layout)?
                } else {
                    let b = Bound { layout: &layout, row: &rows[members[0]] };
                    eval(e, &b)?
                });
            }
            out.rows.push(row);
        }
        Ok(out)
    }
}

fn object_name(n: &ObjectName) -> Result<String> {
    match n.0.as_slice() {
        [ObjectNamePart::Identifier(i)] => Ok(i.value.clone()),
        _ => err(format!("unsupported name {n}")),
    }
}

fn expr_name(e: &Expr) -> String {
    match e {
        Expr::Identifier(i) => i.value.clone(),
        Expr::CompoundIdentifier(parts) => parts.last().map(|p| p.value.clone()).unwrap_or_default(),
        other => other.to_string(),
    }
}

fn split_and<'a>(e: &'a Expr, out: &mut Vec<&'a Expr>) {
    match e {
        Expr::BinaryOp { left, op: BinaryOperator::And, right } => {
            split_and(left, out);
            split_and(right, out);
        }
        Expr::Nested(inner) => split_and(inner, out),
        other => out.push(other),
    }
}

fn lookup(layout: &[(String, String)], e: &Expr) -> Option<usize> {
    match e {
        Expr::CompoundIdentifier(p) if p.len() == 2 => {
            layout.iter().position(|(a, c)| *a == p[0].value && *c == p[1].value)
        }
        Expr::Identifier(i) => {
            let hits: Vec<usize> = (0..layout.len()).filter(|k| layout[*k].1 == i.value).collect();
            (hits.len() == 1).then(|| hits[0])
        }
        _ => None,
    }
}

/// `bound.col = new.col` (either side order) → (bound position, new column).
fn equi_pair(e: &Expr, layout: &[(String, String)], alias: &str, t: &Table) -> Option<(usize, usize)> {
    let Expr::BinaryOp { left, op: BinaryOperator::Eq, right } = e else {
        return None;
    };
    let new_col = |x: &Expr| match x {
        Expr::CompoundIdentifier(p) if p.len() == 2 && p[0].value == alias => t.position(&p[1].value),
        _ => None,
    };
    match (lookup(layout, left), new_col(right)) {
        (Some(l), Some(r)) => Some((l, r)),
        _ => match (lookup(layout, right), new_col(left)) {
            (Some(l), Some(r)) => Some((l, r)),
            _ => None,
        },
    }
}

fn resolvable(e: &Expr, layout: &[(String, String)]) -> bool {
    match e {
        Expr::Identifier(_) | Expr::CompoundIdentifier(_) => lookup(layout, e).is_some(),
        Expr::BinaryOp { left, right, .. } => resolvable(left, layout) && resolvable(right, layout),
        Expr::InList { expr, list, .. } => resolvable(expr, layout) && list.iter().all(|x| resolvable(x, layout)),
        Expr::Nested(x) | Expr::UnaryOp { expr: x, .. } => resolvable(x, layout),
        _ => true,
    }
}

fn truthy(c: &Cell) -> bool {
    matches!(c, Cell::Num(x) if *x != 0.0)
}

fn bool_cell(b: bool) -> Cell {
    Cell::Num(if b { 1.0 } else { 0.0 })
}

fn literal(v: &SqlValue) -> Result<Cell> {
    match v {
        SqlValue::Number(s, _) => s.parse::<f64>().map(Cell::Num).map_err(|e| ShimError(e.to_string())),
        SqlValue::SingleQuotedString(s) => Ok(Cell::Str(s.clone())),
        SqlValue::Null => Ok(Cell::Null),
        other => err(format!("unsupported literal {other}")),
    }
}

fn eval(e: &Expr, b: &Bound<'_>) -> Result<Cell> {
    match e {
        Expr::Identifier(_) | Expr::CompoundIdentifier(_) => {
            let i = lookup(b.layout, e).ok_or_else(|| ShimError(format!("unknown column {e}")))?;
            Ok(b.row[i].clone())
        }
        Expr::Value(v) => literal(&v.value),
        Expr::Nested(x) => eval(x, b),
        Expr::UnaryOp { op: UnaryOperator::Minus, expr } => Ok(match eval(expr, b)?.num()? {
            Some(x) => Cell::Num(-x),
            None => Cell::Null,
        }),
        Expr::InList { expr, list, negated } => {
            let v = eval(expr, b)?;
            let mut hit = false;
            for x in list {
                if v.compare(&eval(x, b)?) == Some(Ordering::Equal) {
                    hit = true;
                }
            }
            Ok(bool_cell(hit != *negated))
        }
        Expr::BinaryOp { left, op, right } => {
            let (l, r) = (eval(left, b)?, eval(right, b)?);
            let arith = |f: fn(f64, f64) -> f64| -> Result<Cell> {
                Ok(match (l.num()?, r.num()?) {
                    (Some(x), Some(y)) => Cell::Num(f(x, y)),
                    _ => Cell::Null,
                })
            };
            let cmp = |f: fn(Ordering) -> bool| -> Result<Cell> {
                match l.compare(&r) {
                    Some(o) => Ok(bool_cell(f(o))),
                    None if l == Cell::Null || r == Cell::Null => Ok(bool_cell(false)),
                    None => err(format!("type mismatch in {e}")),
                }
            };
            match op {
                BinaryOperator::Plus => arith(|x, y| x + y),
                BinaryOperator::Minus => arith(|x, y| x - y),
                BinaryOperator::Multiply => arith(|x, y| x * y),
                BinaryOperator::Eq => cmp(|o| o == Ordering::Equal),
                BinaryOperator::NotEq => cmp(|o| o != Ordering::Equal),
                BinaryOperator::Lt => cmp(|o| o == Ordering::Less),
                BinaryOperator::LtEq => cmp(|o| o != Ordering::Greater),
                BinaryOperator::Gt => cmp(|o| o == Ordering::Greater),
                BinaryOperator::GtEq => cmp(|o| o != Ordering::Less),
                BinaryOperator::And => Ok(bool_cell(truthy(&l) && truthy(&r))),
                BinaryOperator::Or => Ok(bool_cell(truthy(&l) || truthy(&r))),
                other => err(format!("unsupported operator {other}")),
            }
        }
        other => err(format!("unsupported expression {other}")),
    }
}

fn is_aggregate(e: &Expr) -> bool {
    matches!(e, Expr::Function(f) if matches!(object_name(&f.name).as_deref().map(str::to_ascii_uppercase).as_deref(), Ok("SUM" | "MIN" | "MAX" | "COUNT")))
}

fn aggregate(e: &Expr, members: &[usize], rows: &[Vec<Cell>], layout: &[(String, String)]) -> Result<Cell> {
    let Expr::Function(f) = e else { unreachable!() };
    let name = object_name(&f.name)?.to_ascii_uppercase();
    let FunctionArguments::List(list) = &f.args else {
        return err("aggregate without arguments");
    };
    let [FunctionArg::Unnamed(arg)] = list.args.as_slice() else {
        return err("aggregate takes one argument");
    };
    let arg = match arg {
        FunctionArgExpr::Wildcard if name == "COUNT" => return Ok(Cell::Num(members.len() as f64)),
        FunctionArgExpr::Expr(x) => x,
        _ => return err("unsupported aggregate argument"),
    };
    let mut acc: Option<f64> = None;
    let mut n = 0usize;
    for &ri in members {
        let b = Bound { layout, row: &rows[ri] };
        let Some(x) = eval(arg, &b)?.num()? else { continue };
        n += 1;
        acc = Some(match (acc, name.as_str()) {
            (None, _) => x,
            (Some(a), "SUM") => a + x,
            (Some(a), "MIN") => a.min(x),
            (Some(a), "MAX") => a.max(x),
            (Some(a), _) => a,
        });
    }
    Ok(match name.as_str() {
        "COUNT" => Cell::Num(n as f64),
        _ => acc.map(Cell::Num).unwrap_or(Cell::Null),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn db() -> Database {
        let mut db = Database::new();
        db.tables.insert(
            "r".into(),
            Table {
                columns: vec!["a".into(), "x".into()],
                rows: vec![
                    vec![Cell::Str("p".into()), Cell::Num(1.0)],
                    vec![Cell::Str("p".into()), Cell::Num(2.0)],
                    vec![Cell::Str("q".into()), Cell::Num(5.0)],
                ],
            },
        );
        db.tables.insert(
            "s".into(),
            Table { columns: vec!["a".into()], rows: vec![vec![Cell::Str("p".into())], vec![Cell::Str("p".into())]] },
        );
        db
    }

    #[test]
    fn grouped_join() {
        let mut d = db();
        let t = d
            .run_script("SELECT t0.a, SUM(t0.x * 2) AS v, COUNT(*) AS n FROM r AS t0, s AS t1 WHERE t0.a = t1.a GROUP BY t0.a;")
            .unwrap()
            .unwrap();
        assert_eq!(t.columns, vec!["a", "v", "n"]);
        assert_eq!(t.rows, vec![vec![Cell::Str("p".into()), Cell::Num(12.0), Cell::Num(4.0)]]);
    }

    #[test]
    fn filters_and_empty_aggregates() {
        let mut d = db();
        let t = d.run_script("SELECT MIN(t0.x) AS v FROM r AS t0 WHERE t0.a IN ('z');").unwrap().unwrap();
        assert_eq!(t.rows, vec![vec![Cell::Null]]);
        let t = d.run_script("SELECT t0.a, MAX(t0.x) AS v FROM r AS t0 WHERE t0.a <> 'p' GROUP BY t0.a;").unwrap().unwrap();
        assert_eq!(t.rows, vec![vec![Cell::Str("q".into()), Cell::Num(5.0)]]);
    }

    #[test]
    fn create_then_read() {
        let mut d = db();
        let t = d
            .run_script("CREATE TABLE m AS\nSELECT t0.a, COUNT(*) AS cnt\nFROM r AS t0\nGROUP BY t0.a;\nSELECT SUM(m0.cnt) AS cnt FROM m AS m0;")
            .unwrap()
            .unwrap();
        assert_eq!(t.rows, vec![vec![Cell::Num(3.0)]]);
        assert!(d.run_script("SELECT x FROM nope;").is_err());
    }
}
