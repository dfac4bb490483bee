//! SQL text for messages, absorptions and naive queries.
//!
//! Base relations are read as tables named after the relation (non-default
//! versions as `{relation}__{version}`). Message tables carry the message's
//! attributes followed by annotation columns; their names embed the message
//! fingerprint, so a table created for one query is found again by any later
//! query whose message has the same fingerprint.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::jointree::{AnnotationSet, BagId, JoinGraph, JunctionHypertree, QuerySpec};
use crate::planner::{Fingerprinter, SteinerPlan};
use crate::predicate::Predicate;
use crate::semiring::{SemiringKind, SemiringSpec};
use crate::value::Attr;

/// Longest identifier accepted by the common SQL engines.
pub const MAX_IDENT_LEN: usize = 63;
pub const DEFAULT_PREFIX: &str = "m_";

#[derive(Debug, Clone)]
pub struct Naming {
    pub prefix: String,
    pub graph_id: String,
}

impl Naming {
    pub fn new(graph_id: &str) -> Naming {
        Naming { prefix: DEFAULT_PREFIX.to_string(), graph_id: graph_id.to_string() }
    }

    pub fn with_prefix(mut self, prefix: &str) -> Naming {
        self.prefix = prefix.to_string();
        self
    }

    pub fn table_name(&self, fingerprint: &str) -> Result<String> {
        let name = format!("{}{}", self.prefix, fingerprint);
        if name.len() > MAX_IDENT_LEN || !is_plain_ident(&self.prefix) {
            return Err(Error::InvalidParameter(format!("table prefix `{}` yields an invalid name", self.prefix)));
        }
        Ok(name)
    }
}

pub fn base_table_name(g: &JoinGraph, relation: &str, version: &str) -> Result<String> {
    let rel = g.relation(relation)?;
    Ok(if version == rel.default_version { relation.to_string() } else { format!("{relation}__{version}") })
}

/// Annotation column names in emission order.
pub fn annotation_columns(kind: SemiringKind) -> Vec<String> {
    match kind {
        SemiringKind::NaturalCount => vec!["cnt".into()],
        SemiringKind::RealSum | SemiringKind::TropicalMin | SemiringKind::TropicalMax => vec!["val".into()],
        SemiringKind::CountSumPair => vec!["cnt".into(), "val".into()],
        SemiringKind::Gram { vars } => {
            let mut cols = vec!["g_c".to_string()];
            cols.extend((1..=vars).map(|i| format!("g_s{i}")));
            for i in 1..=vars {
                for j in i..=vars {
                    cols.push(format!("g_q{i}_{j}"));
                }
            }
            cols
        }
    }
}

fn is_plain_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Identifier, double-quoted unless it is a plain word.
pub fn ident(s: &str) -> String {
    if is_plain_ident(s) {
        s.to_string()
    } else {
        format!("\"{}\"", s.replace('"', "\"\""))
    }
}

// ---- annotation arithmetic as polynomials over column references ----

/// Sum of products of column references; empty sum is 0, empty product 1.
#[derive(Debug, Clone, Default)]
struct Poly(Vec<Vec<String>>);

impl Poly {
    fn zero() -> Poly {
        Poly(Vec::new())
    }

    fn one() -> Poly {
        Poly(vec![Vec::new()])
    }

    fn col(c: String) -> Poly {
        Poly(vec![vec![c]])
    }

    fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    fn mul(&self, other: &Poly) -> Poly {
        let mut out = Vec::new();
        for a in &self.0 {
            for b in &other.0 {
                let mut t = a.clone();
                t.extend(b.iter().cloned());
                out.push(t);
            }
        }
        Poly(out)
    }

    fn add(mut self, other: Poly) -> Poly {
        self.0.extend(other.0);
        self
    }

    fn render(&self) -> String {
        if self.0.is_empty() {
            return "0".into();
        }
        let terms: Vec<String> =
            self.0.iter().map(|t| if t.is_empty() { "1".to_string() } else { t.join(" * ") }).collect();
        terms.join(" + ")
    }
}

/// One joined source seen through the covariance-ring view: count `c`,
/// linear sums `s`, quadratic sums `q` (upper triangle, row-major).
struct Factor {
    c: Poly,
    s: Vec<Poly>,
    q: Vec<Poly>,
}

fn pairs(k: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..k {
        for j in i..k {
            out.push((i, j));
        }
    }
    out
}

/// n-ary covariance-ring product; the quadratic block only when `quad`.
fn ring_product(fs: &[Factor], k: usize, quad: bool) -> Factor {
    let others = |skip: &[usize]| -> Poly {
        let mut p = Poly::one();
        for (g, f) in fs.iter().enumerate() {
            if !skip.contains(&g) {
                p = p.mul(&f.c);
            }
        }
        p
    };
    let c = others(&[]);
    let s = (0..k)
        .map(|i| {
            let mut acc = Poly::zero();
            for (f, fac) in fs.iter().enumerate() {
                if !fac.s[i].is_zero() {
                    acc = acc.add(fac.s[i].mul(&others(&[f])));
                }
            }
            acc
        })
        .collect();
    let q = pairs(if quad { k } else { 0 })
        .iter()
        .enumerate()
        .map(|(idx, &(i, j))| {
            let mut acc = Poly::zero();
            for (f, fac) in fs.iter().enumerate() {
                if !fac.q[idx].is_zero() {
                    acc = acc.add(fac.q[idx].mul(&others(&[f])));
                }
            }
            for f in 0..fs.len() {
                for g in 0..fs.len() {
                    if f != g && !fs[f].s[i].is_zero() && !fs[g].s[j].is_zero() {
                        acc = acc.add(fs[f].s[i].mul(&fs[g].s[j]).mul(&others(&[f, g])));
                    }
                }
            }
            acc
        })
        .collect();
    Factor { c, s, q }
}

/// Where a source's annotation comes from.
enum SourceKind {
    /// Raw base table; lift attribute slots it owns, by slot index.
    Base { lifts: BTreeMap<usize, String> },
    Message,
}

struct Source {
    table: String,
    alias: String,
    /// Join attributes visible to the query (lift attributes excluded).
    attrs: BTreeSet<Attr>,
    /// All physical columns, for predicates.
    columns: BTreeSet<String>,
    kind: SourceKind,
}

fn col(alias: &str, name: &str) -> String {
    format!("{alias}.{}", ident(name))
}

fn factor(src: &Source, spec: &SemiringSpec) -> Factor {
    let kind = spec.kind();
    let k = spec.lift_attrs().len();
    match &src.kind {
        SourceKind::Message => {
            let cols = annotation_columns(kind);
            let c = |n: &str| Poly::col(col(&src.alias, n));
            match kind {
                SemiringKind::NaturalCount => Factor { c: c("cnt"), s: vec![], q: vec![] },
                SemiringKind::RealSum | SemiringKind::TropicalMin | SemiringKind::TropicalMax => {
                    Factor { c: Poly::one(), s: vec![c("val")], q: vec![] }
                }
                SemiringKind::CountSumPair => Factor { c: c("cnt"), s: vec![c("val")], q: vec![] },
                SemiringKind::Gram { .. } => Factor {
                    c: c(&cols[0]),
                    s: cols[1..=k].iter().map(|n| c(n)).collect(),
                    q: cols[k + 1..].iter().map(|n| c(n)).collect(),
                },
            }
        }
        SourceKind::Base { lifts } => {
            let slot = |i: usize| lifts.get(&i).map(|a| Poly::col(col(&src.alias, a)));
            match kind {
                SemiringKind::NaturalCount => Factor { c: Poly::one(), s: vec![], q: vec![] },
                SemiringKind::RealSum => Factor { c: Poly::one(), s: vec![slot(0).unwrap_or_else(Poly::one)], q: vec![] },
                SemiringKind::TropicalMin | SemiringKind::TropicalMax | SemiringKind::CountSumPair => {
                    Factor { c: Poly::one(), s: vec![slot(0).unwrap_or_else(Poly::zero)], q: vec![] }
                }
                SemiringKind::Gram { .. } => {
                    let s: Vec<Poly> = (0..k).map(|i| slot(i).unwrap_or_else(Poly::zero)).collect();
                    let q = pairs(k).iter().map(|&(i, j)| s[i].mul(&s[j])).collect();
                    Factor { c: Poly::one(), s, q }
                }
            }
        }
    }
}

/// Aggregate select items `(expression, column name)`.
fn aggregates(sources: &[Source], spec: &SemiringSpec) -> Vec<(String, String)> {
    let kind = spec.kind();
    let fs: Vec<Factor> = sources.iter().map(|s| factor(s, spec)).collect();
    let sum = |p: &Poly| if p.0.len() == 1 && p.0[0].is_empty() { "COUNT(*)".to_string() } else { format!("SUM({})", p.render()) };
    match kind {
        SemiringKind::NaturalCount => vec![(sum(&ring_product(&fs, 0, false).c), "cnt".into())],
        SemiringKind::RealSum => {
            let mut p = Poly::one();
            for f in &fs {
                p = p.mul(&f.s[0]);
            }
            vec![(sum(&p), "val".into())]
        }
        SemiringKind::TropicalMin | SemiringKind::TropicalMax => {
            let mut p = Poly::zero();
            for f in &fs {
                if !f.s[0].is_zero() {
                    p = p.add(f.s[0].clone());
                }
            }
            let func = if kind == SemiringKind::TropicalMin { "MIN" } else { "MAX" };
            vec![(format!("{func}({})", p.render()), "val".into())]
        }
        SemiringKind::CountSumPair => {
            let prod = ring_product(&fs, 1, false);
            vec![(sum(&prod.c), "cnt".into()), (sum(&prod.s[0]), "val".into())]
        }
        SemiringKind::Gram { vars } => {
            let prod = ring_product(&fs, vars, true);
            let cols = annotation_columns(kind);
            std::iter::once(&prod.c)
                .chain(prod.s.iter())
                .chain(prod.q.iter())
                .zip(cols)
                .map(|(p, n)| (sum(p), n))
                .collect()
        }
    }
}

fn base_source(g: &JoinGraph, spec: &SemiringSpec, relation: &str, version: &str, alias: String) -> Result<Source> {
    let rel = g.relation(relation)?;
    let lift: Vec<&str> = spec.lift_attrs();
    let mut lifts = BTreeMap::new();
    let mut attrs = BTreeSet::new();
    let mut columns = BTreeSet::new();
    for name in rel.schema.names() {
        columns.insert(name.to_string());
        match lift.iter().position(|a| *a == name) {
            Some(i) => {
                lifts.insert(i, name.to_string());
            }
            None => {
                attrs.insert(crate::value::attr(name));
            }
        }
    }
    Ok(Source { table: base_table_name(g, relation, version)?, alias, attrs, columns, kind: SourceKind::Base { lifts } })
}

/// A predicate bound to the source it is evaluated on, or spanning the
/// joined sources when `None`.
struct Filter<'a> {
    predicate: &'a Predicate,
    source: Option<usize>,
}

fn assign_filters<'a>(sources: &[Source], n_base: usize, preds: &[&'a Predicate]) -> Vec<Filter<'a>> {
    preds
        .iter()
        .map(|p| {
            let source = (0..n_base).find(|i| p.attrs().iter().all(|a| sources[*i].columns.contains(*a)));
            Filter { predicate: p, source }
        })
        .collect()
}

fn check_names(sources: &[Source], kind: SemiringKind) -> Result<()> {
    let reserved = annotation_columns(kind);
    for s in sources {
        for a in &s.attrs {
            if reserved.iter().any(|r| r == &**a) {
                return Err(Error::InvalidQuery(format!("attribute `{a}` collides with an annotation column")));
            }
        }
    }
    Ok(())
}

/// Renders `SELECT … FROM … WHERE … GROUP BY …`, one clause per line.
fn render_select(sources: &[Source], filters: &[Filter<'_>], keep: &BTreeSet<Attr>, spec: &SemiringSpec) -> Result<String> {
    check_names(sources, spec.kind())?;
    let first = |a: &str| sources.iter().find(|s| s.attrs.contains(a)).map(|s| col(&s.alias, a));
    let out_attrs: Vec<&Attr> = keep.iter().filter(|a| sources.iter().any(|s| s.attrs.contains(*a))).collect();
    let mut items: Vec<String> = out_attrs.iter().map(|a| first(a).unwrap()).collect();
    for (expr, name) in aggregates(sources, spec) {
        items.push(format!("{expr} AS {name}"));
    }
    let mut sql = format!("SELECT {}", items.join(", "));
    if sources.is_empty() {
        return Ok(sql);
    }
    let from: Vec<String> = sources.iter().map(|s| format!("{} AS {}", ident(&s.table), s.alias)).collect();
    write!(sql, "\nFROM {}", from.join(", ")).unwrap();
    let mut conds = Vec::new();
    let all: BTreeSet<&Attr> = sources.iter().flat_map(|s| s.attrs.iter()).collect();
    for a in all {
        let holders: Vec<&Source> = sources.iter().filter(|s| s.attrs.contains(a)).collect();
        for h in &holders[1..] {
            conds.push(format!("{} = {}", col(&holders[0].alias, a), col(&h.alias, a)));
        }
    }
    for f in filters {
        let rendered = match f.source {
            Some(i) => f.predicate.render(&|a| col(&sources[i].alias, a)),
            None => {
                for a in f.predicate.attrs() {
                    if first(a).is_none() {
                        return Err(Error::UnknownAttribute(a.to_string()));
                    }
                }
                f.predicate.render(&|a| first(a).unwrap())
            }
        };
        conds.push(rendered);
    }
    if !conds.is_empty() {
        write!(sql, "\nWHERE {}", conds.join("\n  AND ")).unwrap();
    }
    if !out_attrs.is_empty() {
        let gb: Vec<String> = out_attrs.iter().map(|a| first(a).unwrap()).collect();
        write!(sql, "\nGROUP BY {}", gb.join(", ")).unwrap();
    }
    Ok(sql)
}

fn check_spec(spec: &SemiringSpec) -> Result<()> {
    // every kind has a SQL form; kept as the single place to reject new ones
    match spec.kind() {
        SemiringKind::NaturalCount
        | SemiringKind::RealSum
        | SemiringKind::CountSumPair
        | SemiringKind::TropicalMin
        | SemiringKind::TropicalMax
        | SemiringKind::Gram { .. } => Ok(()),
    }
}

/// Static shape of a message: kept label, attributes, and whether it is the
/// join identity (nothing mapped anywhere upstream).
#[derive(Debug, Clone)]
struct Shape {
    kept: BTreeSet<Attr>,
    attrs: BTreeSet<Attr>,
    identity: bool,
}

/// Emits SQL for the messages of one annotated tree.
pub struct SqlEmitter<'a> {
    g: &'a JoinGraph,
    jt: &'a JunctionHypertree,
    ann: &'a AnnotationSet,
    naming: &'a Naming,
    fps: BTreeMap<(BagId, BagId), String>,
    shapes: BTreeMap<(BagId, BagId), Shape>,
}

impl<'a> SqlEmitter<'a> {
    pub fn new(g: &'a JoinGraph, jt: &'a JunctionHypertree, ann: &'a AnnotationSet, naming: &'a Naming) -> Result<Self> {
        check_spec(&ann.aggregate)?;
        let fps = Fingerprinter::new(&naming.graph_id, g, jt, ann).all();
        let mut e = SqlEmitter { g, jt, ann, naming, fps, shapes: BTreeMap::new() };
        for (u, v) in jt.edges().into_iter().flat_map(|(a, b)| [(a, b), (b, a)]) {
            e.shape(u, v)?;
        }
        Ok(e)
    }

    fn bag_attrs(&self, u: BagId) -> Result<BTreeSet<Attr>> {
        let mut out = BTreeSet::new();
        for rel in self.ann.included(self.jt, u) {
            let version = self.ann.version_of(self.g, rel)?;
            out.extend(base_source(self.g, &self.ann.aggregate, rel, version, String::new())?.attrs);
        }
        Ok(out)
    }

    fn shape(&mut self, u: BagId, v: BagId) -> Result<Shape> {
        if let Some(s) = self.shapes.get(&(u, v)) {
            return Ok(s.clone());
        }
        let mut kept = BTreeSet::new();
        let mut avail = self.bag_attrs(u)?;
        let mut identity = self.ann.included(self.jt, u).next().is_none();
        let nbrs: Vec<BagId> = self.jt.neighbors(u).filter(|i| *i != v).collect();
        for i in nbrs {
            let s = self.shape(i, u)?;
            kept.extend(s.kept.iter().cloned());
            avail.extend(s.attrs.iter().cloned());
            identity &= s.identity;
        }
        kept.extend(self.ann.gammas(u));
        for a in self.ann.sums(u) {
            kept.remove(&a);
        }
        let mut keep = self.jt.shared(u, v);
        keep.extend(kept.iter().cloned());
        let attrs = keep.intersection(&avail).cloned().collect();
        let s = Shape { kept, attrs, identity };
        self.shapes.insert((u, v), s.clone());
        Ok(s)
    }

    pub fn table_name(&self, u: BagId, v: BagId) -> Result<String> {
        let fp = self.fps.get(&(u, v)).ok_or_else(|| Error::InvalidJoinTree(format!("no edge {u} -> {v}")))?;
        self.naming.table_name(fp)
    }

    /// Attributes of the message table `u → v`, empty for identity messages.
    pub fn message_attrs(&self, u: BagId, v: BagId) -> Option<&BTreeSet<Attr>> {
        self.shapes.get(&(u, v)).map(|s| &s.attrs)
    }

    pub fn is_identity(&self, u: BagId, v: BagId) -> bool {
        self.shapes.get(&(u, v)).is_some_and(|s| s.identity)
    }

    fn sources(&self, u: BagId, skip: Option<BagId>) -> Result<(Vec<Source>, usize)> {
        let mut sources = Vec::new();
        for (i, rel) in self.ann.included(self.jt, u).enumerate() {
            let version = self.ann.version_of(self.g, rel)?;
            sources.push(base_source(self.g, &self.ann.aggregate, rel, version, format!("t{i}"))?);
        }
        let n_base = sources.len();
        let mut k = 0;
        for i in self.jt.neighbors(u) {
            if Some(i) == skip || self.is_identity(i, u) {
                continue;
            }
            let attrs = self.shapes[&(i, u)].attrs.clone();
            let columns = attrs.iter().map(|a| a.to_string()).collect();
            sources.push(Source { table: self.table_name(i, u)?, alias: format!("m{k}"), attrs, columns, kind: SourceKind::Message });
            k += 1;
        }
        Ok((sources, n_base))
    }

    /// `CREATE TABLE … AS SELECT …` for `u → v`; `None` for identity messages.
    pub fn message_sql(&self, u: BagId, v: BagId) -> Result<Option<String>> {
        if !self.jt.adjacent(u, v) {
            return Err(Error::InvalidJoinTree(format!("bags {u} and {v} are not adjacent")));
        }
        if self.is_identity(u, v) {
            return Ok(None);
        }
        let (sources, n_base) = self.sources(u, Some(v))?;
        let preds: Vec<&Predicate> = self.ann.selections(u).collect();
        let filters = assign_filters(&sources, n_base, &preds);
        let select = render_select(&sources, &filters, &self.shapes[&(u, v)].attrs, &self.ann.aggregate)?;
        Ok(Some(format!("CREATE TABLE {} AS\n{select};", self.table_name(u, v)?)))
    }

    /// The query answer at `root`, grouped by the query's 𝒢.
    pub fn absorption_sql(&self, root: BagId) -> Result<String> {
        self.jt.bag(root)?;
        let (sources, n_base) = self.sources(root, None)?;
        let preds: Vec<&Predicate> = self.ann.selections(root).collect();
        let filters = assign_filters(&sources, n_base, &preds);
        Ok(format!("{};", render_select(&sources, &filters, &self.ann.group_by, &self.ann.aggregate)?))
    }
}

pub fn emit_message_sql(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    ann: &AnnotationSet,
    edge: (BagId, BagId),
    naming: &Naming,
) -> Result<Option<String>> {
    SqlEmitter::new(g, jt, ann, naming)?.message_sql(edge.0, edge.1)
}

pub fn emit_absorption_sql(g: &JoinGraph, jt: &JunctionHypertree, ann: &AnnotationSet, root: BagId, naming: &Naming) -> Result<String> {
    SqlEmitter::new(g, jt, ann, naming)?.absorption_sql(root)
}

/// Ordered statements: one per scheduled non-identity message, then the
/// absorption query. Reused messages are referenced by table name only.
pub fn emit_plan_sql(g: &JoinGraph, jt: &JunctionHypertree, plan: &SteinerPlan, naming: &Naming) -> Result<Vec<String>> {
    let e = SqlEmitter::new(g, jt, &plan.annotations, naming)?;
    let mut out = Vec::new();
    for &(u, v) in &plan.schedule {
        if let Some(s) = e.message_sql(u, v)? {
            out.push(s);
        }
    }
    out.push(e.absorption_sql(plan.root)?);
    Ok(out)
}

/// Statements computing every upward message toward `root` and the answer.
pub fn emit_upward_sql(g: &JoinGraph, jt: &JunctionHypertree, ann: &AnnotationSet, root: BagId, naming: &Naming) -> Result<Vec<String>> {
    let e = SqlEmitter::new(g, jt, ann, naming)?;
    let mut out = Vec::new();
    for (u, v) in jt.upward_edges(root) {
        if let Some(s) = e.message_sql(u, v)? {
            out.push(s);
        }
    }
    out.push(e.absorption_sql(root)?);
    Ok(out)
}

/// The whole query as one flat join.
pub fn emit_naive_sql(g: &JoinGraph, q: &QuerySpec) -> Result<String> {
    check_spec(&q.aggregate)?;
    let mut sources = Vec::new();
    for (i, rel) in g.relation_names().iter().filter(|r| !q.exclude.contains(r)).enumerate() {
        let version = q.updates.get(rel).cloned().unwrap_or_else(|| g.relation(rel).map(|r| r.default_version.clone()).unwrap_or_default());
        sources.push(base_source(g, &q.aggregate, rel, &version, format!("t{i}"))?);
    }
    let n = sources.len();
    let preds: Vec<&Predicate> = q.filters.iter().collect();
    let filters = assign_filters(&sources, n, &preds);
    Ok(format!("{};", render_select(&sources, &filters, &q.group_set(), &q.aggregate)?))
}

/// Joins statements into a script.
pub fn script(statements: &[String]) -> String {
    let mut s = statements.join("\n\n");
    s.push('\n');
    s
}
