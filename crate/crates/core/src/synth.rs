//! Seeded generators: random acyclic databases and queries for property
//! tests, and the chain schema used by the scaling and cube benchmarks.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::jointree::{bind_annotations, build_jt, BindOptions, JoinGraph, JunctionHypertree, QuerySpec};
use crate::predicate::{Atom, CmpOp, Literal, Predicate};
use crate::relation::{AttrDef, Schema, Table};
use crate::semiring::SemiringSpec;
use crate::value::Value;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone)]
pub struct RandomDbConfig {
    pub max_relations: usize,
    pub max_rows: usize,
    pub max_domain: usize,
    /// Add a numeric measure column `x<i>` to every relation.
    pub measures: bool,
    /// Probability that a relation gets a second version `v2`.
    pub second_version: f64,
}

impl Default for RandomDbConfig {
    fn default() -> Self {
        RandomDbConfig { max_relations: 5, max_rows: 50, max_domain: 8, measures: true, second_version: 0.5 }
    }
}

fn random_table(rng: &mut ChaCha8Rng, cats: &[(String, usize)], measure: Option<&str>, rows: usize) -> Table {
    let mut defs: Vec<AttrDef> = cats.iter().map(|(n, _)| AttrDef::categorical(n)).collect();
    if let Some(m) = measure {
        defs.push(AttrDef::numeric(m));
    }
    let schema = Schema::new(defs).expect("generated names are unique");
    let data = (0..rows)
        .map(|_| {
            let mut row: Vec<Value> =
                cats.iter().map(|(_, d)| Value::cat(&format!("v{}", rng.random_range(0..*d)))).collect();
            if measure.is_some() {
                row.push(Value::num(rng.random_range(-3..=5) as f64));
            }
            row
        })
        .collect();
    Table::new(schema, data).expect("generated rows match schema")
}

/// A random tree-shaped (hence acyclic) database. Relation `R<i>` shares one
/// or two attributes with an earlier relation and adds fresh ones.
pub fn random_db(rng: &mut ChaCha8Rng, cfg: &RandomDbConfig) -> JoinGraph {
    let n = rng.random_range(1..=cfg.max_relations.max(1));
    let mut schemas: Vec<Vec<(String, usize)>> = Vec::new();
    let mut next_attr = 0usize;
    let mut fresh = |rng: &mut ChaCha8Rng| {
        let name = format!("A{next_attr}");
        next_attr += 1;
        (name, rng.random_range(1..=cfg.max_domain.max(1)))
    };
    for i in 0..n {
        let mut attrs: Vec<(String, usize)> = Vec::new();
        if i > 0 {
            let parent = schemas[rng.random_range(0..i)].clone();
            let k = rng.random_range(1..=parent.len().min(2));
            attrs.extend(parent.choose_multiple(rng, k).cloned());
        }
        let extra = rng.random_range(if i == 0 { 1 } else { 0 }..=2);
        for _ in 0..extra {
            attrs.push(fresh(rng));
        }
        attrs.sort();
        schemas.push(attrs);
    }
    let mut g = JoinGraph::new();
    for (i, cats) in schemas.iter().enumerate() {
        let measure = format!("x{i}");
        let measure = cfg.measures.then_some(measure.as_str());
        let rows = rng.random_range(1..=cfg.max_rows.max(1));
        let name = format!("R{i}");
        g.add_relation(&name, random_table(rng, cats, measure, rows)).unwrap();
        if rng.random_bool(cfg.second_version) {
            let rows = rng.random_range(0..=cfg.max_rows);
            g.add_version(&name, "v2", random_table(rng, cats, measure, rows)).unwrap();
        }
    }
    g
}

fn categorical_attrs(g: &JoinGraph, rel: &str) -> Vec<String> {
    g.relation(rel)
        .map(|r| {
            r.schema
                .attributes
                .iter()
                .filter(|a| a.ty == crate::relation::AttrType::Categorical)
                .map(|a| a.name.clone())
                .collect()
        })
        .unwrap_or_default()
}

fn measures(g: &JoinGraph) -> Vec<String> {
    g.relations()
        .flat_map(|r| {
            r.schema
                .attributes
                .iter()
                .filter(|a| a.ty == crate::relation::AttrType::Numeric)
                .map(|a| a.name.clone())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Which aggregates [`random_query`] may pick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregateMix {
    CountOnly,
    All,
}

/// A random query over `g` that binds on `jt`: group-bys, filters, an
/// exclusion and version updates, each with some probability.
pub fn random_query(rng: &mut ChaCha8Rng, g: &JoinGraph, jt: &JunctionHypertree, mix: AggregateMix) -> QuerySpec {
    for _ in 0..64 {
        let q = random_query_once(rng, g, jt, mix);
        if bind_annotations(g, jt, &q, &BindOptions::default()).is_ok() {
            return q;
        }
    }
    QuerySpec::count()
}

fn random_query_once(rng: &mut ChaCha8Rng, g: &JoinGraph, jt: &JunctionHypertree, mix: AggregateMix) -> QuerySpec {
    let rels = g.relation_names();
    let mut q = QuerySpec::count();
    let ms = measures(g);
    if mix == AggregateMix::All && !ms.is_empty() {
        let m = ms.choose(rng).unwrap().clone();
        q.aggregate = match rng.random_range(0..6) {
            0 => SemiringSpec::Count,
            1 => SemiringSpec::Sum { attr: m },
            2 => SemiringSpec::CountSum { attr: m },
            3 => SemiringSpec::Min { attr: m },
            4 => SemiringSpec::Max { attr: m },
            _ => {
                let mut feats: Vec<String> = ms.iter().filter(|x| **x != m).cloned().collect();
                feats.shuffle(rng);
                feats.truncate(rng.random_range(0..=2));
                SemiringSpec::Gram { features: feats, target: m }
            }
        };
    }
    if rels.len() > 1 && rng.random_bool(0.25) {
        let leaves: Vec<&String> = rels.iter().filter(|r| jt.mapped_bag(r).is_ok_and(|b| jt.is_leaf(b))).collect();
        if let Some(r) = leaves.choose(rng) {
            q.exclude.push((*r).clone());
        }
    }
    let live: Vec<&String> = rels.iter().filter(|r| !q.exclude.contains(r)).collect();
    let cats: BTreeSet<String> = live.iter().flat_map(|r| categorical_attrs(g, r)).collect();
    let cats: Vec<String> = cats.into_iter().collect();
    let k = rng.random_range(0..=2.min(cats.len()));
    q.group_by = cats.choose_multiple(rng, k).cloned().collect();
    q.group_by.sort();
    for _ in 0..rng.random_range(0..=2) {
        let rel = live.choose(rng).unwrap();
        let attrs = categorical_attrs(g, rel);
        let Some(a) = attrs.choose(rng) else { continue };
        let val = |rng: &mut ChaCha8Rng| Literal::Str(format!("v{}", rng.random_range(0..4)));
        let atom = match rng.random_range(0..4) {
            0 => Atom::eq(a, val(rng)),
            1 => Atom::is_in(a, vec![val(rng), val(rng)]),
            2 => Atom::cmp(a, CmpOp::Ne, val(rng)),
            _ => Atom::cmp(a, CmpOp::Le, val(rng)),
        };
        q.filters.push(Predicate::from(atom));
    }
    for r in &live {
        let rel = g.relation(r).unwrap();
        if rel.versions.len() > 1 && rng.random_bool(0.3) {
            let v = rel.versions.keys().filter(|v| **v != rel.default_version).next().unwrap();
            q.updates.insert((*r).clone(), v.clone());
        }
    }
    q
}

/// One random instance: database, hypertree and a bindable query.
pub fn random_instance(seed: u64, mix: AggregateMix) -> (JoinGraph, JunctionHypertree, QuerySpec) {
    let mut rng = rng(seed);
    let g = random_db(&mut rng, &RandomDbConfig::default());
    let jt = build_jt(&g).expect("generated graphs are acyclic and connected");
    let q = random_query(&mut rng, &g, &jt, mix);
    (g, jt, q)
}

/// Parameters of the chain schema R_i(A_i, A_{i+1}), i = 1..r.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainParams {
    pub r: usize,
    pub f: usize,
    pub d: usize,
    pub n: usize,
}

impl ChainParams {
    /// `n` defaults to `d·f`, so every value of A_i gets exactly f successors.
    pub fn new(r: usize, f: usize, d: usize) -> ChainParams {
        ChainParams { r, f, d, n: d * f }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 || self.f < 1 || self.d < 1 || self.n < 1 {
            return Err(Error::InvalidParameter(format!(
                "chain needs r, f, d, n >= 1 (got r={}, f={}, d={}, n={})",
                self.r, self.f, self.d, self.n
            )));
        }
        Ok(())
    }

    /// Rows of the full join when `n = d·f` and `f <= d`: d start values,
    /// each extended by f successors per relation.
    pub fn full_join_rows(&self) -> f64 {
        self.d as f64 * (self.f as f64).powi(self.r as i32)
    }
}

/// Row k of every relation holds A_i = ⌊k/f⌋ mod d and A_{i+1} = k mod d. Row
/// order is shuffled by `seed`.
pub fn gen_chain(p: ChainParams, seed: u64) -> Result<JoinGraph> {
    p.validate()?;
    let mut rng = rng(seed);
    let mut g = JoinGraph::new();
    for i in 1..=p.r {
        let a = format!("A{i}");
        let b = format!("A{}", i + 1);
        let mut rows: Vec<Vec<Value>> = (0..p.n)
            .map(|k| vec![Value::cat(&((k / p.f) % p.d).to_string()), Value::cat(&(k % p.d).to_string())])
            .collect();
        rows.shuffle(&mut rng);
        g.add_relation(&format!("R{i}"), Table::new(Schema::categorical(&[&a, &b]), rows)?)?;
    }
    Ok(g)
}


/// R(A,B), S(A,C), T(A,D) over one shared key, with duplicate rows; R–S–T
/// layout. The full join has 120 tuples.
pub fn shared_key_graph() -> JoinGraph {
    fn table(attrs: &[&str], rows: &[(&[&str], usize)]) -> Table {
        let mut out = Vec::new();
        for (vals, times) in rows {
            for _ in 0..*times {
                out.push(vals.iter().map(|v| Value::cat(v)).collect());
            }
        }
        Table::new(Schema::categorical(attrs), out).unwrap()
    }
    let mut g = JoinGraph::new();
    g.add_relation("R", table(&["A", "B"], &[(&["a1", "b1"], 2), (&["a1", "b2"], 3)])).unwrap();
    g.add_relation("S", table(&["A", "C"], &[(&["a1", "c1"], 3), (&["a1", "c2"], 5)])).unwrap();
    g.add_relation("T", table(&["A", "D"], &[(&["a1", "d1"], 1), (&["a1", "d2"], 2)])).unwrap();
    g.layout.edges = vec![("R".into(), "S".into()), ("S".into(), "T".into())];
    g
}
