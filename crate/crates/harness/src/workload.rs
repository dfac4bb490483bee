//! Interaction sequences replayed against the engine in four modes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use cjt_core::engine::{default_root, oracle_execute_stats, Executor, MessageStore};
use cjt_core::error::Error;
use cjt_core::jointree::{bind_annotations, BindOptions, JoinGraph, QuerySpec};
use cjt_core::manager::{BackgroundMode, GraphEntry, Manager, ManagerConfig, QueryDelta};
use cjt_core::predicate::{Atom, Literal, Predicate};
use cjt_core::relation::AnnotatedRelation;
use cjt_core::synth::{gen_chain, ChainParams};
use cjt_core::Result;
use serde::{Deserialize, Serialize};

pub const ANSWER_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Brute-force join, filter and group.
    Naive,
    /// Upward pass over the hypertree for every query, nothing reused.
    Factorized,
    /// Plans against the offline CJT only.
    TreOffline,
    /// Session CJTs, cache and think-time calibration.
    Treant,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Naive, Mode::Factorized, Mode::TreOffline, Mode::Treant];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Naive => "naive",
            Mode::Factorized => "factorized",
            Mode::TreOffline => "tre_offline",
            Mode::Treant => "treant",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSource {
    pub r: usize,
    pub f: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VizDoc {
    pub id: String,
    #[serde(default = "QuerySpec::count")]
    pub query: QuerySpec,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub viz: String,
    #[serde(default)]
    pub delta: QueryDelta,
    /// Think time after the step, in messages. `None` means until calibrated.
    #[serde(default)]
    pub think: Option<usize>,
    /// Think time in milliseconds, used when the workload runs on the clock.
    #[serde(default)]
    pub think_ms: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    /// Graph document path, relative to the workload file.
    #[serde(default)]
    pub graph: Option<PathBuf>,
    #[serde(default)]
    pub chain: Option<ChainSource>,
    pub visualizations: Vec<VizDoc>,
    pub steps: Vec<Step>,
    #[serde(default = "all_modes")]
    pub modes: Vec<Mode>,
    /// Simulate think time with the background thread and `think_ms`.
    #[serde(default)]
    pub wall_clock: bool,
    #[serde(default = "default_oracle_budget")]
    pub oracle_budget: usize,
}

fn all_modes() -> Vec<Mode> {
    Mode::ALL.to_vec()
}

fn default_oracle_budget() -> usize {
    1 << 24
}

impl Workload {
    pub fn load(path: &Path) -> Result<(Workload, JoinGraph)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let w: Workload = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let g = w.graph_in(base)?;
        Ok((w, g))
    }

    pub fn graph_in(&self, base: &Path) -> Result<JoinGraph> {
        match (&self.graph, &self.chain) {
            (Some(p), None) => JoinGraph::load(&base.join(p)),
            (None, Some(c)) => gen_chain(ChainParams::new(c.r, c.f, c.d), c.seed),
            _ => Err(Error::InvalidParameter("workload needs exactly one of `graph` or `chain`".into())),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(Error::InvalidParameter("workload lists no modes".into()));
        }
        for s in &self.steps {
            if !self.visualizations.iter().any(|v| v.id == s.viz) {
                return Err(Error::NotFound { kind: "visualization", id: s.viz.clone() });
            }
        }
        Ok(())
    }
}

/// One answered query. Everything but `wall_ms` is deterministic.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub mode: Mode,
    /// 0 for dashboard registration, then one per step.
    pub step: usize,
    pub viz: String,
    pub wall_ms: f64,
    pub computed: usize,
    pub reused: usize,
    pub max_intermediate_rows: usize,
    pub steiner_bags: usize,
    pub answer_rows: usize,
    /// Messages calibrated during the think time that followed.
    pub think_computed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct WorkloadReport {
    pub graph_id: String,
    pub bags: usize,
    pub modes: Vec<Mode>,
    pub records: Vec<QueryRecord>,
    pub answers_agree: bool,
    pub mismatches: Vec<String>,
}

impl WorkloadReport {
    pub fn series(&self, mode: Mode) -> Vec<&QueryRecord> {
        self.records.iter().filter(|r| r.mode == mode).collect()
    }
}

/// Current query of every visualization after each step.
fn query_sequence(w: &Workload) -> Vec<(String, QuerySpec)> {
    let mut current: BTreeMap<&str, QuerySpec> = w.visualizations.iter().map(|v| (v.id.as_str(), v.query.clone())).collect();
    let mut out: Vec<(String, QuerySpec)> = w.visualizations.iter().map(|v| (v.id.clone(), v.query.clone())).collect();
    for s in &w.steps {
        let q = s.delta.apply(&current[s.viz.as_str()]);
        current.insert(&s.viz, q.clone());
        out.push((s.viz.clone(), q));
    }
    out
}

struct Answered {
    record: QueryRecord,
    answer: AnnotatedRelation,
}

fn record(mode: Mode, step: usize, viz: &str, started: Instant, answer: &AnnotatedRelation) -> QueryRecord {
    QueryRecord {
        mode,
        step,
        viz: viz.to_string(),
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        computed: 0,
        reused: 0,
        max_intermediate_rows: 0,
        steiner_bags: 0,
        answer_rows: answer.len(),
        think_computed: 0,
    }
}

fn run_stateless(entry: &GraphEntry, w: &Workload, mode: Mode) -> Result<Vec<Answered>> {
    let mut out = Vec::new();
    for (i, (viz, q)) in query_sequence(w).into_iter().enumerate() {
        let step = i.saturating_sub(w.visualizations.len() - 1);
        let started = Instant::now();
        let (answer, rec) = if mode == Mode::Naive {
            let (answer, rows) = oracle_execute_stats(&entry.graph, &q, w.oracle_budget)?;
            let mut rec = record(mode, step, &viz, started, &answer);
            rec.max_intermediate_rows = rows;
            (answer, rec)
        } else {
            let ann = bind_annotations(&entry.graph, &entry.jt, &q, &BindOptions::default())?;
            let exec = Executor::new(&entry.graph, &entry.jt, &ann);
            let root = default_root(&entry.graph, &entry.jt);
            let mut store = MessageStore::new();
            let computed = exec.upward_pass(root, &mut store)?;
            let full = exec.absorb(root, &store)?;
            let answer = cjt_core::engine::project_answer(&full, &q.group_set());
            let mut rec = record(mode, step, &viz, started, &answer);
            rec.computed = computed;
            rec.max_intermediate_rows = exec.stats.snapshot().max_intermediate_rows;
            rec.steiner_bags = entry.jt.len();
            (answer, rec)
        };
        out.push(Answered { record: rec, answer });
    }
    Ok(out)
}

fn run_managed(g: &JoinGraph, w: &Workload, mode: Mode) -> Result<Vec<Answered>> {
    let background = match (mode, w.wall_clock) {
        (Mode::Treant, true) => BackgroundMode::Thread,
        (Mode::Treant, false) => BackgroundMode::Manual,
        _ => BackgroundMode::Off,
    };
    let m = Manager::new(ManagerConfig { background, online: mode == Mode::Treant, ..Default::default() });
    let gid = m.register_graph(g.clone())?;
    let mut out = Vec::new();
    for v in &w.visualizations {
        let started = Instant::now();
        let (_, answer) = m.register_dashboard_query(&gid, Some(&v.id), &v.query)?;
        let mut rec = record(mode, 0, &v.id, started, &answer);
        rec.computed = m.offline_cjt(&v.id)?.store.read().unwrap().len();
        out.push(Answered { record: rec, answer });
    }
    let sid = m.create_session();
    for (i, s) in w.steps.iter().enumerate() {
        let started = Instant::now();
        let res = m.interact_delta(&sid, &s.viz, &s.delta)?;
        let mut rec = record(mode, i + 1, &s.viz, started, &res.answer);
        rec.computed = res.stats.messages_computed;
        rec.reused = res.stats.messages_reused;
        rec.max_intermediate_rows = res.stats.max_intermediate_rows;
        rec.steiner_bags = res.stats.steiner_bags;
        if mode == Mode::Treant {
            if w.wall_clock {
                std::thread::sleep(Duration::from_millis(s.think_ms.unwrap_or(0)));
            } else {
                rec.think_computed = m.think(&sid, &s.viz, s.think.unwrap_or(usize::MAX))?;
            }
        }
        out.push(Answered { record: rec, answer: res.answer });
    }
    Ok(out)
}

/// Replays `w` in every listed mode and cross-checks the answers. With the
/// naive mode present its answers are the reference.
pub fn run_workload(g: &JoinGraph, w: &Workload) -> Result<WorkloadReport> {
    w.validate()?;
    let entry = GraphEntry::new(g.clone())?;
    let mut modes = w.modes.clone();
    modes.sort();
    modes.dedup();
    let mut runs: Vec<(Mode, Vec<Answered>)> = Vec::new();
    for &mode in &modes {
        let run = match mode {
            Mode::Naive | Mode::Factorized => run_stateless(&entry, w, mode)?,
            Mode::TreOffline | Mode::Treant => run_managed(g, w, mode)?,
        };
        runs.push((mode, run));
    }
    let mut mismatches = Vec::new();
    let (ref_mode, reference) = &runs[0];
    for (mode, run) in &runs[1..] {
        for (a, b) in reference.iter().zip(run) {
            if !b.answer.approx_eq(&a.answer, ANSWER_TOL) {
                mismatches.push(format!("{} step {} viz {}: differs from {}", mode.name(), b.record.step, b.record.viz, ref_mode.name()));
            }
        }
    }
    let records = runs.into_iter().flat_map(|(_, r)| r.into_iter().map(|a| a.record)).collect();
    Ok(WorkloadReport {
        graph_id: entry.id.clone(),
        bags: entry.jt.len(),
        modes,
        records,
        answers_agree: mismatches.is_empty(),
        mismatches,
    })
}

/// One count-by-attribute chart per entry of `group_attrs`; each filter in
/// turn is added to every chart.
pub fn progressive_workload(chain: ChainSource, group_attrs: &[&str], filters: &[(&str, &str)], think: Option<usize>) -> Workload {
    let visualizations = group_attrs
        .iter()
        .map(|a| VizDoc { id: format!("by_{a}"), query: QuerySpec::count().group_by(&[a]) })
        .collect();
    let mut steps = Vec::new();
    for (attr, value) in filters {
        for a in group_attrs {
            let p = Predicate::new(vec![Atom::eq(attr, Literal::str(value))]);
            steps.push(Step {
                viz: format!("by_{a}"),
                delta: QueryDelta { add_filters: vec![p], ..Default::default() },
                think,
                think_ms: None,
            });
        }
    }
    Workload {
        graph: None,
        chain: Some(chain),
        visualizations,
        steps,
        modes: all_modes(),
        wall_clock: false,
        oracle_budget: default_oracle_budget(),
    }
}

pub fn shared(g: JoinGraph) -> Result<Arc<GraphEntry>> {
    Ok(Arc::new(GraphEntry::new(g)?))
}
