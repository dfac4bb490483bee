//! Benchmark suites. Every suite returns serializable records; counts are
//! deterministic given the parameters, wall times are not.

use std::sync::Arc;
use std::time::Instant;

use cjt_core::augment::{evaluate_candidates, synthetic_candidates};
use cjt_core::engine::{default_root, oracle_execute, oracle_execute_stats, Executor, MessageStore};
use cjt_core::error::Error;
use cjt_core::jointree::{bind_annotations, BindOptions, JoinGraph, QuerySpec};
use cjt_core::manager::{BackgroundMode, Cjt, GraphEntry, Manager, ManagerConfig};
use cjt_core::olap::{answer_cuboid, build_pivots, default_universe, subsets};
use cjt_core::predicate::{Atom, Literal, Predicate};
use cjt_core::relation::{AttrDef, Schema, Table};
use cjt_core::semiring::SemiringSpec;
use cjt_core::synth::{gen_chain, rng, ChainParams};
use cjt_core::value::Value;
use cjt_core::Result;
use rand::Rng;
use serde::Serialize;

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

// ------------------------------------------------------------------ chain

#[derive(Debug, Clone, Serialize)]
pub struct ChainRecord {
    pub r: usize,
    pub f: usize,
    pub d: usize,
    pub n: usize,
    /// Full join cardinality from the generator's closed form.
    pub naive_rows: f64,
    /// Largest intermediate of the brute-force join, when it fit the cap.
    pub naive_rows_measured: Option<usize>,
    pub naive_ms: Option<f64>,
    pub factorized_max_rows: usize,
    pub factorized_messages: usize,
    pub factorized_ms: f64,
    /// COUNT(*) from the factorized plan.
    pub count: f64,
    pub ratio: f64,
}

/// Count over chains of `r_min..=r_max` relations, factorized and naive. The
/// naive join is only materialized while the closed form stays below
/// `oracle_cap` rows.
pub fn bench_chain(r_min: usize, r_max: usize, f: usize, d: usize, seed: u64, oracle_cap: usize) -> Result<Vec<ChainRecord>> {
    if r_min < 2 || r_max < r_min {
        return Err(Error::InvalidParameter(format!("need 2 <= r_min <= r_max, got {r_min}..{r_max}")));
    }
    let mut out = Vec::new();
    for r in r_min..=r_max {
        let p = ChainParams::new(r, f, d);
        let g = gen_chain(p, seed)?;
        let entry = GraphEntry::new(g)?;
        let q = QuerySpec::count();
        let started = Instant::now();
        let ann = bind_annotations(&entry.graph, &entry.jt, &q, &BindOptions::default())?;
        let exec = Executor::new(&entry.graph, &entry.jt, &ann);
        let root = default_root(&entry.graph, &entry.jt);
        let mut store = MessageStore::new();
        let messages = exec.upward_pass(root, &mut store)?;
        let count = exec.absorb(root, &store)?.total().scalar().unwrap_or(0.0);
        let factorized_ms = ms(started);
        let factorized_max_rows = exec.stats.snapshot().max_intermediate_rows;
        let naive_rows = p.full_join_rows();
        let (naive_rows_measured, naive_ms) = if naive_rows <= oracle_cap as f64 {
            let started = Instant::now();
            let (_, rows) = oracle_execute_stats(&entry.graph, &q, oracle_cap)?;
            (Some(rows), Some(ms(started)))
        } else {
            (None, None)
        };
        out.push(ChainRecord {
            r,
            f,
            d,
            n: p.n,
            naive_rows,
            naive_rows_measured,
            naive_ms,
            factorized_max_rows,
            factorized_messages: messages,
            factorized_ms,
            count,
            ratio: naive_rows / factorized_max_rows.max(1) as f64,
        });
    }
    Ok(out)
}

// ------------------------------------------------------------------- cube

#[derive(Debug, Clone, Serialize)]
pub struct CubeRecord {
    pub k: usize,
    pub pivots: usize,
    pub pivot_messages: usize,
    pub materialized_rows: usize,
    pub cuboids: usize,
    pub cuboid_messages: usize,
    pub from_absorption: usize,
    pub max_arity: usize,
    /// Cuboids checked against the brute-force cube; all equal when true.
    pub matches_oracle: bool,
    pub ms: f64,
}

/// Builds pivots for each `k` in `0..=k_max` and answers every cuboid of
/// arity ≤ `h` from them.
pub fn bench_cube(entry: &Arc<GraphEntry>, h: usize, k_max: usize, row_budget: usize, check: bool) -> Result<Vec<CubeRecord>> {
    let universe = default_universe(entry);
    let mut targets = Vec::new();
    for arity in 0..=h.min(universe.len()) {
        targets.extend(subsets(&universe, arity));
    }
    let oracle = if check {
        let mut v = Vec::new();
        for t in &targets {
            let names: Vec<&str> = t.iter().map(String::as_str).collect();
            v.push(oracle_execute(&entry.graph, &QuerySpec::count().group_by(&names), row_budget)?);
        }
        Some(v)
    } else {
        None
    };
    let mut out = Vec::new();
    for k in 0..=k_max.min(universe.len()) {
        let started = Instant::now();
        let ps = build_pivots(entry, &QuerySpec::count(), k, None, row_budget)?;
        let mut rec = CubeRecord {
            k,
            pivots: ps.pivots.len(),
            pivot_messages: ps.messages_computed,
            materialized_rows: ps.materialized_rows,
            cuboids: targets.len(),
            cuboid_messages: 0,
            from_absorption: 0,
            max_arity: h,
            matches_oracle: true,
            ms: 0.0,
        };
        for (i, t) in targets.iter().enumerate() {
            let names: Vec<&str> = t.iter().map(String::as_str).collect();
            let ans = answer_cuboid(&ps, &names)?;
            rec.cuboid_messages += ans.stats.messages_computed;
            rec.from_absorption += ans.stats.from_absorption as usize;
            if let Some(o) = &oracle {
                rec.matches_oracle &= ans.relation == o[i];
            }
        }
        rec.ms = ms(started);
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------- augment

/// AB(A, B, x) – AC(A, C) – AD(A, D, y), where y depends on D. The key
/// domains do not depend on `seed`, so two seeds give train/held-out data.
pub fn augment_graph(seed: u64, rows: usize) -> Result<JoinGraph> {
    let mut r = rng(seed);
    let cat = |p: &str, i: usize| Value::cat(&format!("{p}{i}"));
    let ab = Schema::new(vec![AttrDef::categorical("A"), AttrDef::categorical("B"), AttrDef::numeric("x")])?;
    let ac = Schema::categorical(&["A", "C"]);
    let ad = Schema::new(vec![AttrDef::categorical("A"), AttrDef::categorical("D"), AttrDef::numeric("y")])?;
    let rows_ab = (0..rows).map(|i| vec![cat("a", i % 6), cat("b", i % 3), Value::num(r.random_range(-5.0..5.0))]).collect();
    let rows_ac = (0..rows / 2).map(|i| vec![cat("a", i % 6), cat("c", i % 2)]).collect();
    let rows_ad = (0..rows)
        .map(|i| {
            let dv = r.random_range(0..8usize);
            vec![cat("a", i % 6), cat("d", dv), Value::num(3.0 * (dv as f64).sin() + r.random_range(-0.5..0.5))]
        })
        .collect();
    let mut g = JoinGraph::new();
    g.add_relation("AB", Table::new(ab, rows_ab)?)?;
    g.add_relation("AC", Table::new(ac, rows_ac)?)?;
    g.add_relation("AD", Table::new(ad, rows_ad)?)?;
    g.layout.edges = vec![("AB".into(), "AC".into()), ("AC".into(), "AD".into())];
    Ok(g)
}

pub fn augment_query() -> QuerySpec {
    QuerySpec::count().with_aggregate(SemiringSpec::Gram { features: vec!["x".into()], target: "y".into() })
}

#[derive(Debug, Clone, Serialize)]
pub struct AugmentRecord {
    pub rank: usize,
    pub candidate: String,
    pub phi: f64,
    pub r2_train: f64,
    pub r2_heldout: Option<f64>,
    pub messages_computed: usize,
    pub intercept: f64,
}

/// Ranks `n` seeded candidates keyed on D by the R² of the augmented model.
pub fn bench_augment(n: usize, seed: u64, rows: usize) -> Result<Vec<AugmentRecord>> {
    let train = Arc::new(GraphEntry::new(augment_graph(seed, rows)?)?);
    let held = Arc::new(GraphEntry::new(augment_graph(seed + 1, rows)?)?);
    let cjt = Cjt::calibrated(&train, &augment_query(), &BindOptions::default())?;
    let held_cjt = Cjt::calibrated(&held, &augment_query(), &BindOptions::default())?;
    let cands = synthetic_candidates(&cjt, &["D"], n, seed)?;
    let phis: Vec<(String, f64)> = cands.iter().map(|(c, p)| (c.name.clone(), *p)).collect();
    let list: Vec<_> = cands.into_iter().map(|c| c.0).collect();
    let ranked = evaluate_candidates(&cjt, &list, Some(&held_cjt))?;
    Ok(ranked
        .into_iter()
        .enumerate()
        .map(|(i, t)| AugmentRecord {
            rank: i + 1,
            phi: phis.iter().find(|p| p.0 == t.candidate).map(|p| p.1).unwrap_or(f64::NAN),
            candidate: t.candidate,
            r2_train: t.r2_train,
            r2_heldout: t.r2_heldout,
            messages_computed: t.messages_computed,
            intercept: t.model.intercept,
        })
        .collect())
}

// ----------------------------------------------------------------- budget

#[derive(Debug, Clone, Serialize)]
pub struct BudgetRecord {
    pub budget: usize,
    pub think_computed: usize,
    pub computed: usize,
    pub reused: usize,
    pub latency_ms: f64,
    pub correct: bool,
}

/// On the chain A1 – … – A(r+1): a dashboard counting by A1, a first
/// interaction filtering the middle attribute and a second one that also
/// filters the far end.
pub fn budget_queries(r: usize) -> (QuerySpec, QuerySpec, QuerySpec) {
    let dash = QuerySpec::count().group_by(&["A1"]);
    let eq = |a: String, v: &str| Predicate::new(vec![Atom::eq(&a, Literal::str(v))]);
    let q1 = dash.clone().filter(eq(format!("A{}", r / 2 + 1), "0"));
    let q2 = q1.clone().filter(eq(format!("A{}", r + 1), "1"));
    (dash, q1, q2)
}

/// Cost of `q2` right after `q1`, for every think budget between them from
/// 0 to full calibration.
pub fn bench_budget(g: &JoinGraph, dash: &QuerySpec, q1: &QuerySpec, q2: &QuerySpec, oracle_budget: usize) -> Result<Vec<BudgetRecord>> {
    let entry = GraphEntry::new(g.clone())?;
    let oracle = oracle_execute(g, q2, oracle_budget)?;
    let total = 2 * entry.jt.len().saturating_sub(1);
    let mut out = Vec::new();
    for budget in 0..=total {
        let m = Manager::new(ManagerConfig { background: BackgroundMode::Manual, ..Default::default() });
        let gid = m.register_graph(g.clone())?;
        let (viz, _) = m.register_dashboard_query(&gid, None, dash)?;
        let s = m.create_session();
        m.interact(&s, &viz, q1)?;
        let think_computed = m.think(&s, &viz, budget)?;
        let res = m.interact(&s, &viz, q2)?;
        out.push(BudgetRecord {
            budget,
            think_computed,
            computed: res.stats.messages_computed,
            reused: res.stats.messages_reused,
            latency_ms: res.stats.latency_ms,
            correct: res.answer.approx_eq(&oracle, crate::workload::ANSWER_TOL),
        });
    }
    Ok(out)
}
