//! One PASS/FAIL line per acceptance criterion. Tolerances are fixed below.

use std::collections::BTreeSet;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::{Duration, Instant};

use cjt_core::augment::{attach_and_train, evaluate_candidates, synthetic_candidates, Candidate};
use cjt_core::engine::{check_calibration, oracle_execute, Executor, MessageStore};
use cjt_core::jointree::{bind_annotations, BagId, BindOptions, EmptyBagDecl, JoinGraph, QuerySpec};
use cjt_core::manager::{plan_against, BackgroundMode, Cjt, GraphEntry, Manager, ManagerConfig};
use cjt_core::olap::{answer_cuboid, build_pivots, default_universe, subsets};
use cjt_core::planner::{plan_with_reuse, Fingerprinter, PlanOptions};
use cjt_core::relation::AnnotatedRelation;
use cjt_core::semiring::SemiringKind;
use cjt_core::sqlgen::{emit_plan_sql, emit_upward_sql, script, Naming, SqlEmitter};
use cjt_core::synth::{gen_chain, random_db, random_instance, random_query, rng, AggregateMix, ChainParams, RandomDbConfig};
use cjt_core::value::Value;
use cjt_harness::bench::{augment_graph, augment_query, bench_chain, budget_queries};
use cjt_sqlshim::golden::{cases, golden_dir};
use cjt_sqlshim::Database;
use nalgebra::{DMatrix, DVector};

const SEEDS: u64 = 200;
const REL_TOL: f64 = 1e-9;
const COEF_TOL: f64 = 1e-6;
const ORACLE_ROWS: usize = 1 << 22;
const ORACLE_TIME: Duration = Duration::from_secs(120);
const CHAIN_TIME: Duration = Duration::from_secs(300);
const CHAIN_RATIO: f64 = 1e4;
/// Factorized intermediates must stay within CHAIN_C · r · d rows.
const CHAIN_C: f64 = 10.0;
const MIN_ROOTS: usize = 3;
const CANDIDATES: usize = 30;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Exact for counts, relative tolerance otherwise.
fn same(got: &AnnotatedRelation, want: &AnnotatedRelation) -> bool {
    if want.kind() == SemiringKind::NaturalCount {
        got == want
    } else {
        got.approx_eq(want, REL_TOL)
    }
}

fn tol(kind: SemiringKind) -> f64 {
    if kind == SemiringKind::NaturalCount {
        0.0
    } else {
        REL_TOL
    }
}

/// Canonical bytes of a message: attributes then value-ordered rows.
fn canonical(rel: &AnnotatedRelation) -> Vec<u8> {
    let attrs: Vec<String> = rel.attrs().iter().map(|a| a.to_string()).collect();
    serde_json::to_vec(&(attrs, rel.kind().to_string(), rel.to_json_rows())).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let mut checks = 0;
    for seed in 0..SEEDS {
        let (g, jt, q) = random_instance(seed, AggregateMix::All);
        let want = oracle_execute(&g, &q, ORACLE_ROWS).map_err(|e| format!("seed {seed}: {e}"))?;
        let ann = bind_annotations(&g, &jt, &q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let ex = Executor::new(&g, &jt, &ann);
        for root in 0..jt.len() {
            let mut store = MessageStore::new();
            ex.upward_pass(root, &mut store).map_err(|e| e.to_string())?;
            let got = ex.absorb(root, &store).map_err(|e| e.to_string())?;
            ensure!(same(&got, &want), "seed {seed} root {root}: answer differs from oracle");
            checks += 1;
        }
    }
    let t = started.elapsed();
    ensure!(t < ORACLE_TIME, "took {t:?}");
    Ok(format!("{SEEDS} instances, {checks} roots, {:.1}s", t.as_secs_f64()))
}

fn calibration_identity() -> Outcome {
    let mut edges = 0;
    for seed in 0..SEEDS {
        let (g, jt, q) = random_instance(seed, AggregateMix::All);
        let ann = bind_annotations(&g, &jt, &q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let ex = Executor::new(&g, &jt, &ann);
        let mut store = MessageStore::new();
        ex.calibrate(0, &mut store, &AtomicBool::new(false)).map_err(|e| e.to_string())?;
        let bad = check_calibration(&ex, &store, tol(q.aggregate.kind())).map_err(|e| e.to_string())?;
        ensure!(bad.is_empty(), "seed {seed}: adjacent absorptions disagree on {bad:?}");
        edges += jt.len() - 1;
    }
    Ok(format!("{SEEDS} instances, {edges} edges"))
}

fn reusability() -> Outcome {
    let mut tested = 0;
    for seed in 0..SEEDS {
        let (g, jt, q) = random_instance(seed, AggregateMix::All);
        let ann = bind_annotations(&g, &jt, &q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let ex = Executor::new(&g, &jt, &ann);
        let stores: Vec<MessageStore> = (0..jt.len())
            .map(|root| {
                let mut s = MessageStore::new();
                ex.upward_pass(root, &mut s).map(|_| s)
            })
            .collect::<Result<_, _>>()
            .map_err(|e| e.to_string())?;
        for (a, b) in jt.edges() {
            for (u, v) in [(a, b), (b, a)] {
                let roots = jt.side(v, u);
                let bytes: BTreeSet<Vec<u8>> = roots.iter().map(|r| canonical(&stores[*r].get(u, v).unwrap().content)).collect();
                ensure!(bytes.len() == 1, "seed {seed} edge {u}->{v}: {} distinct messages over roots {roots:?}", bytes.len());
                if roots.len() >= MIN_ROOTS {
                    tested += 1;
                }
            }
        }
    }
    ensure!(tested > 0, "no edge had {MIN_ROOTS} roots on its far side");
    Ok(format!("{tested} directed edges with >= {MIN_ROOTS} far-side roots"))
}

fn steiner_reuse() -> Outcome {
    let (mut reused_total, mut same_query) = (0, 0);
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let g = random_db(&mut r, &RandomDbConfig::default());
        let entry = Arc::new(GraphEntry::new(g).map_err(|e| e.to_string())?);
        let (g, jt) = (&*entry.graph, &*entry.jt);
        let mix = if seed % 3 == 0 { AggregateMix::All } else { AggregateMix::CountOnly };
        let prev_q = random_query(&mut r, g, jt, mix);
        let next_q = if seed % 7 == 0 { prev_q.clone() } else { random_query(&mut r, g, jt, mix) };
        let prev = Cjt::calibrated(&entry, &prev_q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let prev_store = prev.store.read().unwrap();
        let avail = |(u, v): (BagId, BagId), fp: &str| prev_store.get(u, v).is_some_and(|m| m.fingerprint.as_deref() == Some(fp));
        let plan = plan_with_reuse(&entry.id, g, jt, Some(&prev.annotations), &next_q, &entry.cost, &PlanOptions::default(), &avail)
            .map_err(|e| e.to_string())?;
        let mut store = MessageStore::new();
        for &(u, v) in &plan.reused {
            store.insert(prev_store.get(u, v).unwrap().clone());
        }
        let ex = Executor::new(g, jt, &plan.annotations);
        let (computed, _) = ex.run_edges(&plan.schedule, &mut store, None).map_err(|e| e.to_string())?;
        let got = ex.absorb(plan.root, &store).map_err(|e| e.to_string())?;
        let want = oracle_execute(g, &next_q, ORACLE_ROWS).map_err(|e| e.to_string())?;
        ensure!(same(&got, &want), "seed {seed}: answer differs from oracle");
        ensure!(computed <= plan.tree_edge_count(), "seed {seed}: {computed} computed > {} Steiner edges", plan.tree_edge_count());
        if next_q == prev_q {
            ensure!(computed == 0, "seed {seed}: unchanged query computed {computed}");
            same_query += 1;
        }
        let mut scratch = MessageStore::new();
        ex.upward_pass(plan.root, &mut scratch).map_err(|e| e.to_string())?;
        for &(u, v) in &plan.reused {
            let a = canonical(&store.get(u, v).unwrap().content);
            ensure!(a == canonical(&scratch.get(u, v).unwrap().content), "seed {seed}: reused {u}->{v} differs from recomputation");
            reused_total += 1;
        }
    }
    Ok(format!("{SEEDS} pairs, {reused_total} reused messages verified, {same_query} unchanged queries"))
}

fn calibration_cost() -> Outcome {
    let mut total = 0;
    for seed in 0..SEEDS {
        let (g, jt, q) = random_instance(seed, AggregateMix::All);
        let ann = bind_annotations(&g, &jt, &q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let ex = Executor::new(&g, &jt, &ann);
        let mut store = MessageStore::new();
        let out = ex.calibrate(seed as usize % jt.len(), &mut store, &AtomicBool::new(false)).map_err(|e| e.to_string())?;
        let want = 2 * (jt.len() - 1);
        let computed = ex.stats.snapshot().messages_computed;
        ensure!(out.completed && out.messages_done == want && computed == want && store.len() == want, "seed {seed}: {computed} messages, want {want}");
        total += computed;
    }
    Ok(format!("{total} messages over {SEEDS} instances"))
}

fn scaling_trend() -> Outcome {
    let started = Instant::now();
    let (f, d) = (10, 10);
    let recs = bench_chain(2, 8, f, d, 0, 2_000_000).map_err(|e| e.to_string())?;
    for w in recs.windows(2) {
        ensure!(w[1].naive_rows == w[0].naive_rows * f as f64, "naive rows do not grow by f at r={}", w[1].r);
    }
    for r in &recs {
        ensure!(r.count == r.naive_rows, "r={}: factorized count {} vs closed form {}", r.r, r.count, r.naive_rows);
        if let Some(m) = r.naive_rows_measured {
            ensure!(m as f64 == r.naive_rows, "r={}: materialized {m} rows vs closed form {}", r.r, r.naive_rows);
        }
        let bound = CHAIN_C * (r.r * d) as f64;
        ensure!((r.factorized_max_rows as f64) <= bound, "r={}: {} rows > {bound}", r.r, r.factorized_max_rows);
    }
    let last = recs.last().unwrap();
    ensure!(last.ratio > CHAIN_RATIO, "ratio {} at r=8", last.ratio);
    let t = started.elapsed();
    ensure!(t < CHAIN_TIME, "took {t:?}");
    let measured = recs.iter().filter(|r| r.naive_rows_measured.is_some()).count();
    Ok(format!("ratio {:.0e} at r=8, factorized max {} rows, {measured} naive joins materialized", last.ratio, last.factorized_max_rows))
}

fn empty_bag() -> Outcome {
    let g = gen_chain(ChainParams::new(4, 2, 3), 5).map_err(|e| e.to_string())?;
    let mut spliced = g.clone();
    spliced.layout.empty_bags =
        vec![EmptyBagDecl { attrs: vec!["A2".into(), "A3".into(), "A4".into()], neighbors: vec!["R2".into(), "R3".into()] }];
    let plain = Arc::new(GraphEntry::new(g.clone()).map_err(|e| e.to_string())?);
    let with = Arc::new(GraphEntry::new(spliced).map_err(|e| e.to_string())?);
    ensure!(with.jt.len() == plain.jt.len() + 1, "no bag was spliced");
    let mut r = rng(77);
    for i in 0..60 {
        let q = random_query(&mut r, &g, &plain.jt, AggregateMix::CountOnly);
        let want = oracle_execute(&g, &q, ORACLE_ROWS).map_err(|e| e.to_string())?;
        let ann = bind_annotations(&with.graph, &with.jt, &q, &BindOptions::default()).map_err(|e| e.to_string())?;
        let ex = Executor::new(&with.graph, &with.jt, &ann);
        for root in 0..with.jt.len() {
            let mut store = MessageStore::new();
            ex.upward_pass(root, &mut store).map_err(|e| e.to_string())?;
            ensure!(ex.absorb(root, &store).map_err(|e| e.to_string())? == want, "query {i} root {root} changed by the empty bag");
        }
    }
    let target = ["A2", "A4"];
    let want = oracle_execute(&g, &QuerySpec::count().group_by(&target), ORACLE_ROWS).map_err(|e| e.to_string())?;
    let mut computed = Vec::new();
    for entry in [&with, &plain] {
        let ps = build_pivots(entry, &QuerySpec::count(), 0, None, ORACLE_ROWS).map_err(|e| e.to_string())?;
        let ans = answer_cuboid(&ps, &target).map_err(|e| e.to_string())?;
        ensure!(ans.relation == want, "group-by {target:?} differs from oracle");
        computed.push((ans.stats.messages_computed, ans.stats.from_absorption));
    }
    ensure!(computed[0] == (0, true), "with the empty bag: {:?}", computed[0]);
    Ok(format!("60 queries unchanged; γ{target:?} computes 0 messages with the bag, {} without", computed[1].0))
}

/// Weighted least squares on the materialized augmented join.
fn direct_least_squares(g: &JoinGraph, cand: &Candidate) -> Result<Vec<f64>, String> {
    let mut wide = g.clone();
    wide.add_relation(&cand.name, (*cand.table).clone()).map_err(|e| e.to_string())?;
    let rows = oracle_execute(&wide, &QuerySpec::count().group_by(&["x", &cand.feature, "y"]), ORACLE_ROWS).map_err(|e| e.to_string())?;
    let pos = |n: &str| rows.attrs().iter().position(|a| &**a == n).unwrap();
    let (px, pz, py) = (pos("x"), pos(&cand.feature), pos("y"));
    let f = |v: &Value| v.as_f64().unwrap();
    let n = rows.len();
    let w: Vec<f64> = rows.rows().iter().map(|(_, a)| a.scalar().unwrap().sqrt()).collect();
    let x = DMatrix::from_fn(n, 3, |i, j| {
        let t = &rows.rows()[i].0;
        w[i] * [1.0, f(&t[px]), f(&t[pz])][j]
    });
    let y = DVector::from_fn(n, |i, _| w[i] * f(&rows.rows()[i].0[py]));
    let beta = x.svd(true, true).solve(&y, 1e-12).map_err(|e| e.to_string())?;
    Ok(beta.iter().copied().collect())
}

fn augmentation() -> Outcome {
    let g = augment_graph(11, 60).map_err(|e| e.to_string())?;
    let entry = Arc::new(GraphEntry::new(g.clone()).map_err(|e| e.to_string())?);
    let cjt = Cjt::calibrated(&entry, &augment_query(), &BindOptions::default()).map_err(|e| e.to_string())?;
    let cands = synthetic_candidates(&cjt, &["D"], CANDIDATES, 11).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (c, _) in &cands {
        let res = attach_and_train(&cjt, c, None).map_err(|e| e.to_string())?;
        ensure!(res.messages_computed == 1, "{}: {} messages", c.name, res.messages_computed);
        let direct = direct_least_squares(&g, c)?;
        for (a, b) in res.model.coefficients().iter().zip(&direct) {
            let err = (a - b).abs() / b.abs().max(1.0);
            worst = worst.max(err);
            ensure!(err <= COEF_TOL, "{}: coefficient {a} vs direct {b}", c.name);
        }
    }
    let list: Vec<Candidate> = cands.iter().map(|c| c.0.clone()).collect();
    let ranked = evaluate_candidates(&cjt, &list, None).map_err(|e| e.to_string())?;
    ensure!(ranked[0].candidate == "cand0", "{} ranked first", ranked[0].candidate);
    Ok(format!("{CANDIDATES} candidates, 1 message each, worst coefficient error {worst:.1e}, cand0 ranked first"))
}

fn olap() -> Outcome {
    let entry = Arc::new(GraphEntry::new(gen_chain(ChainParams::new(4, 2, 3), 11).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?);
    let universe = default_universe(&entry);
    let sets: Vec<_> = (0..=3)
        .map(|k| build_pivots(&entry, &QuerySpec::count(), k, None, ORACLE_ROWS))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut exact = 0;
    for arity in 0..=2 {
        for t in subsets(&universe, arity) {
            let names: Vec<&str> = t.iter().map(String::as_str).collect();
            let want = oracle_execute(&entry.graph, &QuerySpec::count().group_by(&names), ORACLE_ROWS).map_err(|e| e.to_string())?;
            let got = answer_cuboid(&sets[1], &names).map_err(|e| e.to_string())?;
            ensure!(got.relation == want, "cuboid {t:?} differs from brute force");
            exact += 1;
        }
    }
    let mut targets = 0;
    for arity in 0..=3 {
        for t in subsets(&universe, arity) {
            let names: Vec<&str> = t.iter().map(String::as_str).collect();
            let mut last = usize::MAX;
            for ps in &sets {
                let c = answer_cuboid(ps, &names).map_err(|e| e.to_string())?.stats.messages_computed;
                ensure!(c <= last, "cuboid {t:?}: {c} messages at k={} after {last}", ps.k);
                last = c;
            }
            targets += 1;
        }
    }
    Ok(format!("{exact} cuboids exact from k=1 pivots, {targets} targets monotone over k=0..3"))
}

fn think_budget() -> Outcome {
    let mut instances: Vec<(JoinGraph, QuerySpec, QuerySpec, QuerySpec)> = Vec::new();
    for r in 3..=6 {
        let (dash, q1, q2) = budget_queries(r);
        instances.push((gen_chain(ChainParams::new(r, 2, 4), r as u64).map_err(|e| e.to_string())?, dash, q1, q2));
    }
    for seed in 0..40u64 {
        let mut rr = rng(500 + seed);
        let g = random_db(&mut rr, &RandomDbConfig::default());
        let e = GraphEntry::new(g.clone()).map_err(|e| e.to_string())?;
        let q1 = random_query(&mut rr, &e.graph, &e.jt, AggregateMix::CountOnly);
        let q2 = random_query(&mut rr, &e.graph, &e.jt, AggregateMix::CountOnly);
        instances.push((g, QuerySpec::count(), q1, q2));
    }
    let mut budgets = 0;
    let mut strict = 0;
    for (i, (g, dash, q1, q2)) in instances.iter().enumerate() {
        let entry = Arc::new(GraphEntry::new(g.clone()).map_err(|e| e.to_string())?);
        let want = oracle_execute(g, q2, ORACLE_ROWS).map_err(|e| e.to_string())?;
        let total = 2 * (entry.jt.len() - 1);
        let mut series = Vec::new();
        for budget in 0..=total {
            let m = Manager::new(ManagerConfig { background: BackgroundMode::Manual, ..Default::default() });
            let gid = m.register_graph(g.clone()).map_err(|e| e.to_string())?;
            let (viz, _) = m.register_dashboard_query(&gid, None, dash).map_err(|e| e.to_string())?;
            let s = m.create_session();
            m.interact(&s, &viz, q1).map_err(|e| e.to_string())?;
            m.think(&s, &viz, budget).map_err(|e| e.to_string())?;
            let res = m.interact(&s, &viz, q2).map_err(|e| e.to_string())?;
            ensure!(same(&res.answer, &want), "instance {i} budget {budget}: wrong answer");
            if let Some(&last) = series.last() {
                ensure!(res.stats.messages_computed <= last, "instance {i} budget {budget}: {} after {last}", res.stats.messages_computed);
            }
            series.push(res.stats.messages_computed);
            budgets += 1;
        }
        // fully calibrated session CJT for q1, offline CJT for the dashboard
        let opts = PlanOptions::default();
        let full = Cjt::calibrated(&entry, q1, &BindOptions::default()).map_err(|e| e.to_string())?;
        let offline = Cjt::calibrated(&entry, dash, &BindOptions::default()).map_err(|e| e.to_string())?;
        let floor = [&full, &offline]
            .iter()
            .map(|c| plan_against(c, q2, &opts, None).map(|p| p.schedule.len()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?
            .into_iter()
            .min()
            .unwrap();
        let at_full = *series.last().unwrap();
        ensure!(at_full <= floor, "instance {i}: {at_full} messages at full budget, calibrated minimum {floor}");
        if series[0] > at_full {
            strict += 1;
        }
    }
    ensure!(strict > 0, "think time never helped");
    Ok(format!("{} instances, {budgets} budgets, {strict} where think time lowered the cost", instances.len()))
}

fn sql_emission() -> Outcome {
    let dir = golden_dir();
    let cases = cases().map_err(|e| e.to_string())?;
    for (name, actual) in &cases {
        let expected = std::fs::read_to_string(dir.join(name)).map_err(|e| format!("{name}: {e}"))?;
        ensure!(*actual == expected, "golden file {name} differs");
    }
    let mut plans = 0;
    for seed in 0..SEEDS {
        let mut r = rng(9000 + seed);
        let g = random_db(&mut r, &RandomDbConfig::default());
        let entry = Arc::new(GraphEntry::new(g).map_err(|e| e.to_string())?);
        let (g, jt) = (&*entry.graph, &*entry.jt);
        let mix = if seed % 2 == 0 { AggregateMix::All } else { AggregateMix::CountOnly };
        let q1 = random_query(&mut r, g, jt, mix);
        let q2 = random_query(&mut r, g, jt, mix);
        let naming = Naming::new(&entry.id);
        let prev = Cjt::calibrated(&entry, &q1, &BindOptions::default()).map_err(|e| e.to_string())?;
        let e = SqlEmitter::new(g, jt, &prev.annotations, &naming).map_err(|e| e.to_string())?;
        let mut setup = Vec::new();
        for (u, v) in cjt_core::engine::calibration_order(jt, prev.root) {
            setup.extend(e.message_sql(u, v).map_err(|e| e.to_string())?);
        }
        let mut db = Database::from_graph(g).map_err(|e| e.to_string())?;
        db.run_script(&script(&setup)).map_err(|e| format!("seed {seed}: {e}"))?;
        let fps = Fingerprinter::new(&entry.id, g, jt, &prev.annotations).all();
        let avail = |e: (BagId, BagId), fp: &str| fps.get(&e).is_some_and(|p| p == fp);
        let plan = plan_with_reuse(&entry.id, g, jt, Some(&prev.annotations), &q2, &entry.cost, &PlanOptions::default(), &avail)
            .map_err(|e| e.to_string())?;
        let stmts = emit_plan_sql(g, jt, &plan, &naming).map_err(|e| e.to_string())?;
        let t = db.run_script(&script(&stmts)).map_err(|e| format!("seed {seed}: {e}"))?.ok_or("plan script has no SELECT")?;
        let got = t.to_relation(q2.aggregate.kind()).map_err(|e| e.to_string())?;
        let engine = cjt_core::manager::execute_plan(&prev, &plan, &q2, None).map_err(|e| e.to_string())?.answer;
        ensure!(same(&got, &engine), "seed {seed}: shim answer differs from engine");

        // and a full upward script with no prior tables
        let ann = bind_annotations(g, jt, &q2, &BindOptions::default()).map_err(|e| e.to_string())?;
        let up = emit_upward_sql(g, jt, &ann, plan.root, &naming.clone().with_prefix("u_")).map_err(|e| e.to_string())?;
        let t = db.run_script(&script(&up)).map_err(|e| format!("seed {seed}: {e}"))?.ok_or("upward script has no SELECT")?;
        ensure!(same(&t.to_relation(q2.aggregate.kind()).map_err(|e| e.to_string())?, &engine), "seed {seed}: upward script differs");
        plans += 1;
    }
    Ok(format!("{} golden files equal, {plans} plan scripts match the engine", cases.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence", oracle_equivalence),
        ("calibration identity", calibration_identity),
        ("message reusability", reusability),
        ("steiner reuse", steiner_reuse),
        ("calibration cost", calibration_cost),
        ("chain scaling", scaling_trend),
        ("empty bag", empty_bag),
        ("augmentation", augmentation),
        ("olap cube", olap),
        ("think budget", think_budget),
        ("sql emission", sql_emission),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let started = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let ms = started.elapsed().as_millis();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {ms} ms)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
