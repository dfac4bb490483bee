//! Fixed emission cases whose output is locked under `tests/golden/`.

use std::path::PathBuf;

use cjt_core::jointree::{bind_annotations, build_jt, BagId, BindOptions, JoinGraph, QuerySpec};
use cjt_core::planner::{plan_with_reuse, CostModel, Fingerprinter, PlanOptions};
use cjt_core::predicate::{Atom, CmpOp, Literal};
use cjt_core::relation::{AttrDef, Schema, Table};
use cjt_core::semiring::SemiringSpec;
use cjt_core::sqlgen::{emit_absorption_sql, emit_message_sql, emit_naive_sql, emit_plan_sql, script, Naming};
use cjt_core::synth::shared_key_graph;
use cjt_core::value::Value;
use cjt_core::Result;

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// R(A, x) and S(A, B, y) with a few rows each.
pub fn measured_graph() -> JoinGraph {
    let mut g = JoinGraph::new();
    let r = Table::new(
        Schema::new(vec![AttrDef::categorical("A"), AttrDef::numeric("x")]).unwrap(),
        vec![
            vec![Value::cat("a1"), Value::num(1.0)],
            vec![Value::cat("a1"), Value::num(2.0)],
            vec![Value::cat("a2"), Value::num(4.0)],
        ],
    )
    .unwrap();
    let s = Table::new(
        Schema::new(vec![AttrDef::categorical("A"), AttrDef::categorical("B"), AttrDef::numeric("y")]).unwrap(),
        vec![
            vec![Value::cat("a1"), Value::cat("b1"), Value::num(3.0)],
            vec![Value::cat("a2"), Value::cat("b1"), Value::num(5.0)],
            vec![Value::cat("a2"), Value::cat("b2"), Value::num(-1.0)],
        ],
    )
    .unwrap();
    g.add_relation("R", r).unwrap();
    g.add_relation("S", s).unwrap();
    g
}

fn message(g: &JoinGraph, q: &QuerySpec, edge: (BagId, BagId)) -> Result<String> {
    let jt = build_jt(g)?;
    let ann = bind_annotations(g, &jt, q, &BindOptions::default())?;
    Ok(emit_message_sql(g, &jt, &ann, edge, &Naming::new(&g.digest()))?.expect("edge has an included upstream"))
}

/// The plan case: calibrated COUNT(*) on the shared-key graph, then a
/// query grouping by C with filters on B and D.
pub fn plan_case() -> Result<(JoinGraph, QuerySpec, Vec<String>)> {
    let g = shared_key_graph();
    let jt = build_jt(&g)?;
    let gid = g.digest();
    let prev = bind_annotations(&g, &jt, &QuerySpec::count(), &BindOptions::default())?;
    let fps = Fingerprinter::new(&gid, &g, &jt, &prev).all();
    let avail = |e: (BagId, BagId), fp: &str| fps.get(&e).is_some_and(|p| p == fp);
    let next = QuerySpec::count()
        .group_by(&["C"])
        .filter(Atom::eq("B", Literal::str("b1")))
        .filter(Atom::eq("D", Literal::str("d2")));
    let plan = plan_with_reuse(&gid, &g, &jt, Some(&prev), &next, &CostModel::new(&g), &PlanOptions::default(), &avail)?;
    let stmts = emit_plan_sql(&g, &jt, &plan, &Naming::new(&gid).with_prefix("cjt_"))?;
    Ok((g, next, stmts))
}

/// Every golden file name with its freshly emitted content.
pub fn cases() -> Result<Vec<(&'static str, String)>> {
    let star = shared_key_graph();
    let measured = measured_graph();
    let mut out = vec![
        ("count_message.sql", message(&star, &QuerySpec::count(), (0, 1))?),
        (
            "filtered_message.sql",
            message(&star, &QuerySpec::count().filter(Atom::is_in("B", vec![Literal::str("b2"), Literal::str("b1")])), (0, 1))?,
        ),
        (
            "grouped_middle_message.sql",
            message(&star, &QuerySpec::count().group_by(&["B", "C"]).filter(Atom::cmp("C", CmpOp::Ne, Literal::str("c2"))), (1, 2))?,
        ),
        (
            "gram_message.sql",
            message(
                &measured,
                &QuerySpec::count().with_aggregate(SemiringSpec::Gram { features: vec!["x".into()], target: "y".into() }),
                (0, 1),
            )?,
        ),
    ];
    let jt = build_jt(&measured)?;
    for (name, spec) in [
        ("min_absorption.sql", SemiringSpec::Min { attr: "y".into() }),
        ("max_absorption.sql", SemiringSpec::Max { attr: "x".into() }),
    ] {
        let q = QuerySpec::count().with_aggregate(spec).group_by(&["B"]);
        let ann = bind_annotations(&measured, &jt, &q, &BindOptions::default())?;
        out.push((name, emit_absorption_sql(&measured, &jt, &ann, 1, &Naming::new(&measured.digest()))?));
    }
    let (g, next, stmts) = plan_case()?;
    out.push(("plan_script.sql", script(&stmts)));
    out.push(("naive.sql", emit_naive_sql(&g, &next)? + "\n"));
    Ok(out)
}
