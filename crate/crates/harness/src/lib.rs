//! Benchmark harness and command-line plumbing for the engine.

pub mod bench;
pub mod plot;
pub mod report;
pub mod workload;

use std::sync::Arc;

use cjt_core::engine::{calibration_order, default_root};
use cjt_core::jointree::{bind_annotations, BagId, BindOptions, QuerySpec};
use cjt_core::manager::{Cjt, GraphEntry};
use cjt_core::planner::{plan_with_reuse, Fingerprinter, PlanOptions};
use cjt_core::sqlgen::{emit_naive_sql, emit_plan_sql, emit_upward_sql, script, Naming, SqlEmitter};
use cjt_core::Result;

/// Named SQL scripts for `q`: the brute-force query, a full upward pass and,
/// given a previous query, that query's calibration followed by the plan
/// that reuses its tables.
pub fn sql_scripts(entry: &Arc<GraphEntry>, q: &QuerySpec, prev: Option<&QuerySpec>, naming: &Naming) -> Result<Vec<(String, String)>> {
    let (g, jt) = (&*entry.graph, &*entry.jt);
    let mut out = vec![("naive.sql".to_string(), script(&[emit_naive_sql(g, q)?]))];
    let ann = bind_annotations(g, jt, q, &BindOptions::default())?;
    out.push(("upward.sql".into(), script(&emit_upward_sql(g, jt, &ann, default_root(g, jt), naming)?)));
    if let Some(p) = prev {
        let base = Cjt::calibrated(entry, p, &BindOptions::default())?;
        let e = SqlEmitter::new(g, jt, &base.annotations, naming)?;
        let mut setup = Vec::new();
        for (u, v) in calibration_order(jt, base.root) {
            setup.extend(e.message_sql(u, v)?);
        }
        out.push(("calibration.sql".into(), script(&setup)));
        let fps = Fingerprinter::new(&entry.id, g, jt, &base.annotations).all();
        let avail = |e: (BagId, BagId), fp: &str| fps.get(&e).is_some_and(|p| p == fp);
        let plan = plan_with_reuse(&entry.id, g, jt, Some(&base.annotations), q, &entry.cost, &PlanOptions::default(), &avail)?;
        out.push(("plan.sql".into(), script(&emit_plan_sql(g, jt, &plan, naming)?)));
    }
    Ok(out)
}
