//! CJT lifecycle: offline calibration of dashboard queries, interaction
//! queries planned against the latest session CJT, preemptible think-time
//! calibration, and the pinned LRU message cache.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::engine::{calibration_order, Executor, Fingerprint, Message, MessageStore};
use crate::error::{Error, Result};
use crate::jointree::{bind_annotations, build_jt, AnnotationSet, BagId, BindOptions, JoinGraph, JunctionHypertree, QuerySpec};
use crate::planner::{choose_root, plan_with_reuse, CostModel, Fingerprinter, PlanOptions, SteinerPlan};
use crate::predicate::Predicate;
use crate::relation::AnnotatedRelation;

pub const DEFAULT_CACHE_ROWS: usize = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    /// No think-time calibration.
    Off,
    /// A thread calibrates after every interaction until preempted.
    Thread,
    /// Calibration runs only through [`Manager::think`].
    Manual,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    pub cache_rows: usize,
    pub background: BackgroundMode,
    pub pushdown: bool,
    /// Keep session CJTs and consult the cache. When false every interaction
    /// is planned against the offline CJT alone.
    pub online: bool,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        ManagerConfig { cache_rows: DEFAULT_CACHE_ROWS, background: BackgroundMode::Thread, pushdown: false, online: true }
    }
}

impl ManagerConfig {
    /// Overrides from `CJT_CACHE_ROWS`, `CJT_BACKGROUND` (off|thread|manual)
    /// and `CJT_PUSHDOWN`.
    pub fn from_env() -> Result<ManagerConfig> {
        let mut c = ManagerConfig::default();
        if let Ok(v) = std::env::var("CJT_CACHE_ROWS") {
            c.cache_rows = v.parse().map_err(|_| Error::InvalidParameter(format!("CJT_CACHE_ROWS={v}")))?;
        }
        if let Ok(v) = std::env::var("CJT_BACKGROUND") {
            c.background = serde_json::from_value(serde_json::Value::String(v.clone()))
                .map_err(|_| Error::InvalidParameter(format!("CJT_BACKGROUND={v}")))?;
        }
        if let Ok(v) = std::env::var("CJT_PUSHDOWN") {
            c.pushdown = matches!(v.as_str(), "1" | "true" | "on");
        }
        Ok(c)
    }
}

// ---------------------------------------------------------------- cache

#[derive(Debug, Clone, Copy, Default, Serialize, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub evictions: u64,
    /// Times the budget stayed exceeded because every entry was pinned.
    pub over_budget: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CacheInfo {
    pub entries: usize,
    pub rows: usize,
    pub budget_rows: usize,
    pub pinned: usize,
    pub stats: CacheStats,
}

struct CacheEntry {
    message: Arc<Message>,
    rows: usize,
    pins: usize,
    tick: u64,
}

struct CacheInner {
    budget: usize,
    rows: usize,
    tick: u64,
    entries: HashMap<Fingerprint, CacheEntry>,
    lru: BTreeMap<u64, Fingerprint>,
    stats: CacheStats,
}

/// Fingerprint → message, LRU by row budget. Pinned entries are never
/// evicted; when only pinned entries remain the budget is exceeded and
/// `over_budget` is bumped.
pub struct MessageCache {
    inner: Mutex<CacheInner>,
}

fn entry_rows(m: &Message) -> usize {
    m.content.len().max(1)
}

impl MessageCache {
    pub fn new(budget_rows: usize) -> MessageCache {
        MessageCache {
            inner: Mutex::new(CacheInner {
                budget: budget_rows,
                rows: 0,
                tick: 0,
                entries: HashMap::new(),
                lru: BTreeMap::new(),
                stats: CacheStats::default(),
            }),
        }
    }

    pub fn get(&self, fp: &str) -> Option<Arc<Message>> {
        let mut c = self.inner.lock().unwrap();
        c.tick += 1;
        let tick = c.tick;
        let Some(e) = c.entries.get_mut(fp) else {
            c.stats.misses += 1;
            return None;
        };
        let old = std::mem::replace(&mut e.tick, tick);
        let m = e.message.clone();
        c.lru.remove(&old);
        c.lru.insert(tick, fp.to_string());
        c.stats.hits += 1;
        Some(m)
    }

    pub fn contains(&self, fp: &str) -> bool {
        self.inner.lock().unwrap().entries.contains_key(fp)
    }

    /// Inserts a fingerprinted message; a known fingerprint is a no-op.
    pub fn put(&self, m: Arc<Message>) -> bool {
        let Some(fp) = m.fingerprint.clone() else { return false };
        let mut c = self.inner.lock().unwrap();
        if c.entries.contains_key(&fp) {
            return false;
        }
        c.tick += 1;
        let tick = c.tick;
        let rows = entry_rows(&m);
        c.rows += rows;
        c.lru.insert(tick, fp.clone());
        c.entries.insert(fp, CacheEntry { message: m, rows, pins: 0, tick });
        c.stats.inserts += 1;
        Self::evict(&mut c);
        true
    }

    /// Inserts (if needed) and pins in one step, so the entry cannot be
    /// evicted in between.
    pub fn put_pinned(&self, m: Arc<Message>) {
        let Some(fp) = m.fingerprint.clone() else { return };
        {
            let mut c = self.inner.lock().unwrap();
            if let Some(e) = c.entries.get_mut(&fp) {
                e.pins += 1;
                return;
            }
            c.tick += 1;
            let tick = c.tick;
            let rows = entry_rows(&m);
            c.rows += rows;
            c.lru.insert(tick, fp.clone());
            c.entries.insert(fp, CacheEntry { message: m, rows, pins: 1, tick });
            c.stats.inserts += 1;
            Self::evict(&mut c);
        }
    }

    pub fn pin(&self, fp: &str) -> bool {
        let mut c = self.inner.lock().unwrap();
        match c.entries.get_mut(fp) {
            Some(e) => {
                e.pins += 1;
                true
            }
            None => false,
        }
    }

    pub fn unpin(&self, fp: &str) {
        let mut c = self.inner.lock().unwrap();
        if let Some(e) = c.entries.get_mut(fp) {
            e.pins = e.pins.saturating_sub(1);
        }
        Self::evict(&mut c);
    }

    pub fn is_pinned(&self, fp: &str) -> bool {
        self.inner.lock().unwrap().entries.get(fp).is_some_and(|e| e.pins > 0)
    }

    pub fn set_budget(&self, rows: usize) {
        let mut c = self.inner.lock().unwrap();
        c.budget = rows;
        Self::evict(&mut c);
    }

    pub fn info(&self) -> CacheInfo {
        let c = self.inner.lock().unwrap();
        CacheInfo {
            entries: c.entries.len(),
            rows: c.rows,
            budget_rows: c.budget,
            pinned: c.entries.values().filter(|e| e.pins > 0).count(),
            stats: c.stats,
        }
    }

    fn evict(c: &mut CacheInner) {
        while c.rows > c.budget {
            let victim = c.lru.iter().find(|(_, fp)| c.entries[*fp].pins == 0).map(|(t, fp)| (*t, fp.clone()));
            let Some((tick, fp)) = victim else {
                c.stats.over_budget += 1;
                log::warn!("message cache over budget: {} rows pinned, budget {}", c.rows, c.budget);
                return;
            };
            c.lru.remove(&tick);
            let e = c.entries.remove(&fp).expect("lru and entries agree");
            c.rows -= e.rows;
            c.stats.evictions += 1;
        }
    }
}

// ---------------------------------------------------------------- CJTs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "state", content = "messages", rename_all = "snake_case")]
pub enum CalibrationStatus {
    None,
    Partial(usize),
    Full,
}

/// A registered join graph with its hypertree and cost model.
pub struct GraphEntry {
    pub id: String,
    pub graph: Arc<JoinGraph>,
    pub jt: Arc<JunctionHypertree>,
    pub cost: CostModel,
}

impl GraphEntry {
    pub fn new(graph: JoinGraph) -> Result<GraphEntry> {
        let jt = build_jt(&graph)?;
        Ok(Self::with_tree(graph, jt))
    }

    pub fn with_tree(graph: JoinGraph, jt: JunctionHypertree) -> GraphEntry {
        let cost = CostModel::new(&graph);
        let mut id = graph.digest();
        id.truncate(16);
        GraphEntry { id, graph: Arc::new(graph), jt: Arc::new(jt), cost }
    }
}

/// One annotated hypertree with its (possibly partial) message store.
#[derive(Clone)]
pub struct Cjt {
    pub entry: Arc<GraphEntry>,
    pub graph_id: String,
    pub graph: Arc<JoinGraph>,
    pub jt: Arc<JunctionHypertree>,
    pub annotations: Arc<AnnotationSet>,
    pub store: Arc<RwLock<MessageStore>>,
    pub root: BagId,
    /// Query this CJT was built for.
    pub lineage: QuerySpec,
    fingerprints: Arc<BTreeMap<(BagId, BagId), Fingerprint>>,
}

impl Cjt {
    pub fn new(entry: &Arc<GraphEntry>, ann: AnnotationSet, root: BagId, lineage: QuerySpec) -> Cjt {
        let fingerprints = Fingerprinter::new(&entry.id, &entry.graph, &entry.jt, &ann).all();
        Cjt {
            entry: entry.clone(),
            graph_id: entry.id.clone(),
            graph: entry.graph.clone(),
            jt: entry.jt.clone(),
            annotations: Arc::new(ann),
            store: Arc::new(RwLock::new(MessageStore::new())),
            root,
            lineage,
            fingerprints: Arc::new(fingerprints),
        }
    }

    /// Binds `q`, picks the cheapest root and calibrates completely.
    pub fn calibrated(entry: &Arc<GraphEntry>, q: &QuerySpec, bind: &BindOptions) -> Result<Cjt> {
        let ann = bind_annotations(&entry.graph, &entry.jt, q, bind)?;
        let root = choose_root(&entry.graph, &entry.jt, &ann, &entry.cost, None).root;
        let cjt = Cjt::new(entry, ann, root, q.clone());
        cjt.calibrate_steps(usize::MAX, None, None)?;
        Ok(cjt)
    }

    pub fn executor(&self) -> Executor<'_> {
        Executor::new(&self.graph, &self.jt, &self.annotations)
    }

    pub fn fingerprint(&self, u: BagId, v: BagId) -> Option<&Fingerprint> {
        self.fingerprints.get(&(u, v))
    }

    pub fn total_messages(&self) -> usize {
        2 * self.jt.len().saturating_sub(1)
    }

    pub fn status(&self) -> CalibrationStatus {
        let n = self.store.read().unwrap().len();
        if n >= self.total_messages() {
            CalibrationStatus::Full
        } else if n == 0 {
            CalibrationStatus::None
        } else {
            CalibrationStatus::Partial(n)
        }
    }

    pub fn answer(&self) -> Result<AnnotatedRelation> {
        let store = self.store.read().unwrap();
        self.executor().absorb(self.root, &store)
    }

    /// Computes up to `budget` missing calibration messages in order,
    /// publishing each one to the store (and, pinned, to `cache`) as soon as
    /// it exists. Stops between messages when `cancel` is raised.
    pub fn calibrate_steps(&self, budget: usize, cancel: Option<&AtomicBool>, cache: Option<&MessageCache>) -> Result<usize> {
        let exec = self.executor();
        let mut done = 0;
        for (u, v) in calibration_order(&self.jt, self.root) {
            if done >= budget {
                break;
            }
            if self.store.read().unwrap().contains(u, v) {
                continue;
            }
            if cancel.is_some_and(|c| c.load(Ordering::Acquire)) {
                break;
            }
            let mut m = {
                let store = self.store.read().unwrap();
                exec.compute_message(u, v, &store)?
            };
            m.fingerprint = self.fingerprint(u, v).cloned();
            let m = Arc::new(m);
            if let Some(c) = cache {
                c.put_pinned(m.clone());
            }
            self.store.write().unwrap().insert(m);
            done += 1;
        }
        Ok(done)
    }

    fn fingerprints_held(&self) -> Vec<Fingerprint> {
        self.store.read().unwrap().messages().filter_map(|m| m.fingerprint.clone()).collect()
    }
}

/// Plans `q` against `base`, counting messages held by `base` or `cache` as
/// available.
pub fn plan_against(base: &Cjt, q: &QuerySpec, opts: &PlanOptions, cache: Option<&MessageCache>) -> Result<SteinerPlan> {
    let entry = &base.entry;
    let store = base.store.read().unwrap();
    let avail = |(u, v): (BagId, BagId), fp: &str| {
        store.get(u, v).is_some_and(|m| m.fingerprint.as_deref() == Some(fp)) || cache.is_some_and(|c| c.contains(fp))
    };
    plan_with_reuse(&entry.id, &entry.graph, &entry.jt, Some(&base.annotations), q, &entry.cost, opts, &avail)
}

/// Outcome of [`execute_plan`].
pub struct Derived {
    pub cjt: Cjt,
    pub answer: AnnotatedRelation,
    pub computed: usize,
    pub reused: usize,
    pub max_intermediate_rows: usize,
}

/// Builds the CJT of `plan`: messages of `base` (or `cache`) with matching
/// fingerprints are carried over, missing ones toward the root computed.
/// With a cache, every message of the new CJT ends up pinned there.
pub fn execute_plan(base: &Cjt, plan: &SteinerPlan, q: &QuerySpec, cache: Option<&MessageCache>) -> Result<Derived> {
    let entry = &base.entry;
    let cjt = Cjt::new(entry, plan.annotations.clone(), plan.root, q.clone());
    {
        let old = base.store.read().unwrap();
        let mut store = cjt.store.write().unwrap();
        for (&(u, v), fp) in cjt.fingerprints.iter() {
            let found = match old.get(u, v).filter(|m| m.fingerprint.as_ref() == Some(fp)) {
                Some(m) => Some(m.clone()),
                None => cache.and_then(|c| c.get(fp)).map(|m| Arc::new(Message { from: u, to: v, ..(*m).clone() })),
            };
            if let Some(m) = found {
                if let Some(c) = cache {
                    c.put_pinned(m.clone());
                }
                store.insert(m);
            }
        }
    }
    let exec = cjt.executor();
    let mut computed = 0;
    let answer = {
        let mut store = cjt.store.write().unwrap();
        for (u, v) in entry.jt.upward_edges(plan.root) {
            if store.contains(u, v) {
                continue;
            }
            let mut m = exec.compute_message(u, v, &store)?;
            m.fingerprint = cjt.fingerprint(u, v).cloned();
            let m = Arc::new(m);
            if let Some(c) = cache {
                c.put_pinned(m.clone());
            }
            store.insert(m);
            computed += 1;
        }
        exec.absorb(plan.root, &store)?
    };
    let reused = entry.jt.upward_edges(plan.root).len() - computed;
    let max_intermediate_rows = exec.stats.snapshot().max_intermediate_rows;
    drop(exec);
    Ok(Derived { cjt, answer, computed, reused, max_intermediate_rows })
}

// ---------------------------------------------------------------- manager

#[derive(Debug, Clone, Serialize)]
pub struct InteractStats {
    pub messages_computed: usize,
    pub messages_reused: usize,
    pub steiner_bags: usize,
    pub max_intermediate_rows: usize,
    pub latency_ms: f64,
    /// "session" or "offline".
    pub base: &'static str,
    pub calibration_status: CalibrationStatus,
}

pub struct InteractResult {
    pub answer: AnnotatedRelation,
    pub stats: InteractStats,
    pub plan: SteinerPlan,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SlotStats {
    pub interactions: usize,
    pub messages_computed: usize,
    pub messages_reused: usize,
    pub background_messages: usize,
    pub calibration_status: Option<CalibrationStatus>,
    pub messages_done: usize,
    pub messages_total: usize,
    pub last: Option<InteractStats>,
}

/// Edits applied to the latest query of a (session, viz).
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct QueryDelta {
    /// Replaces the whole query; the remaining fields apply on top.
    pub query: Option<QuerySpec>,
    pub aggregate: Option<crate::semiring::SemiringSpec>,
    pub group_by: Option<Vec<String>>,
    pub add_group_by: Vec<String>,
    pub remove_group_by: Vec<String>,
    pub add_filters: Vec<Predicate>,
    pub remove_filters: Vec<Predicate>,
    /// Drop every filter on these attributes.
    pub clear_filters_on: Vec<String>,
    pub exclude: Vec<String>,
    pub include: Vec<String>,
    pub update: BTreeMap<String, String>,
    pub revert: Vec<String>,
}

impl QueryDelta {
    pub fn apply(&self, base: &QuerySpec) -> QuerySpec {
        let mut q = self.query.clone().unwrap_or_else(|| base.clone());
        if let Some(a) = &self.aggregate {
            q.aggregate = a.clone();
        }
        if let Some(g) = &self.group_by {
            q.group_by = g.clone();
        }
        for a in &self.add_group_by {
            if !q.group_by.contains(a) {
                q.group_by.push(a.clone());
            }
        }
        q.group_by.retain(|a| !self.remove_group_by.contains(a));
        let removed: BTreeSet<String> = self.remove_filters.iter().map(Predicate::canonical).collect();
        q.filters.retain(|p| {
            !removed.contains(&p.canonical()) && !p.attrs().iter().any(|a| self.clear_filters_on.iter().any(|c| c == a))
        });
        for p in &self.add_filters {
            if !q.filters.iter().any(|x| x.canonical() == p.canonical()) {
                q.filters.push(p.clone());
            }
        }
        for r in &self.exclude {
            if !q.exclude.contains(r) {
                q.exclude.push(r.clone());
            }
        }
        q.exclude.retain(|r| !self.include.contains(r));
        q.updates.extend(self.update.clone());
        for r in &self.revert {
            q.updates.remove(r);
        }
        q
    }
}

struct Background {
    cancel: Arc<AtomicBool>,
    handle: JoinHandle<Result<usize>>,
}

#[derive(Default)]
struct SlotState {
    cjt: Option<Cjt>,
    /// Latest interaction query, kept even when session CJTs are not.
    query: Option<QuerySpec>,
    background: Option<Background>,
    stats: SlotStats,
}

struct Viz {
    offline: Cjt,
}

pub struct Manager {
    config: ManagerConfig,
    graphs: RwLock<HashMap<String, Arc<GraphEntry>>>,
    vizzes: RwLock<HashMap<String, Arc<Viz>>>,
    sessions: RwLock<BTreeSet<String>>,
    slots: Mutex<HashMap<(String, String), Arc<Mutex<SlotState>>>>,
    cache: Arc<MessageCache>,
    next_id: AtomicU64,
}

impl Manager {
    pub fn new(config: ManagerConfig) -> Manager {
        let cache = Arc::new(MessageCache::new(config.cache_rows));
        Manager {
            config,
            graphs: RwLock::default(),
            vizzes: RwLock::default(),
            sessions: RwLock::default(),
            slots: Mutex::default(),
            cache,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn config(&self) -> &ManagerConfig {
        &self.config
    }

    pub fn cache(&self) -> &MessageCache {
        &self.cache
    }

    fn fresh_id(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.next_id.fetch_add(1, Ordering::Relaxed))
    }

    fn bind_options(&self) -> BindOptions {
        BindOptions { pushdown: self.config.pushdown, ..Default::default() }
    }

    /// Registers a graph (id = content digest); registering the same content
    /// twice returns the existing id.
    pub fn register_graph(&self, g: JoinGraph) -> Result<String> {
        self.register_entry(GraphEntry::new(g)?)
    }

    pub fn register_graph_with_tree(&self, g: JoinGraph, jt: JunctionHypertree) -> Result<String> {
        jt.validate().map_err(|v| Error::InvalidJoinTree(v.to_string()))?;
        self.register_entry(GraphEntry::with_tree(g, jt))
    }

    fn register_entry(&self, e: GraphEntry) -> Result<String> {
        let id = e.id.clone();
        self.graphs.write().unwrap().entry(id.clone()).or_insert_with(|| Arc::new(e));
        Ok(id)
    }

    pub fn graph(&self, id: &str) -> Result<Arc<GraphEntry>> {
        self.graphs.read().unwrap().get(id).cloned().ok_or_else(|| Error::NotFound { kind: "graph", id: id.into() })
    }

    /// Builds, fully calibrates and pins the offline CJT of a dashboard
    /// query. Returns the viz id and the initial answer.
    pub fn register_dashboard_query(&self, graph_id: &str, viz_id: Option<&str>, q: &QuerySpec) -> Result<(String, AnnotatedRelation)> {
        let entry = self.graph(graph_id)?;
        let viz_id = match viz_id {
            Some(v) => v.to_string(),
            None => self.fresh_id("viz"),
        };
        if self.vizzes.read().unwrap().contains_key(&viz_id) {
            return Err(Error::Conflict(format!("visualization {viz_id} already exists")));
        }
        let cjt = Cjt::calibrated(&entry, q, &self.bind_options())?;
        let answer = cjt.answer()?;
        let mut vizzes = self.vizzes.write().unwrap();
        if vizzes.contains_key(&viz_id) {
            return Err(Error::Conflict(format!("visualization {viz_id} already exists")));
        }
        for m in cjt.store.read().unwrap().messages() {
            self.cache.put_pinned(m.clone());
        }
        vizzes.insert(viz_id.clone(), Arc::new(Viz { offline: cjt }));
        Ok((viz_id, answer))
    }

    pub fn offline_cjt(&self, viz: &str) -> Result<Cjt> {
        Ok(self.viz(viz)?.offline.clone())
    }

    fn viz(&self, id: &str) -> Result<Arc<Viz>> {
        self.vizzes.read().unwrap().get(id).cloned().ok_or_else(|| Error::NotFound { kind: "visualization", id: id.into() })
    }

    pub fn create_session(&self) -> String {
        let id = self.fresh_id("s");
        self.sessions.write().unwrap().insert(id.clone());
        id
    }

    fn check_session(&self, sid: &str) -> Result<()> {
        if self.sessions.read().unwrap().contains(sid) {
            Ok(())
        } else {
            Err(Error::NotFound { kind: "session", id: sid.into() })
        }
    }

    fn slot(&self, sid: &str, viz: &str) -> Arc<Mutex<SlotState>> {
        self.slots.lock().unwrap().entry((sid.to_string(), viz.to_string())).or_default().clone()
    }

    /// Latest query of the slot, or the dashboard query.
    pub fn current_query(&self, sid: &str, viz: &str) -> Result<QuerySpec> {
        self.check_session(sid)?;
        let v = self.viz(viz)?;
        let slot = self.slot(sid, viz);
        let s = slot.lock().unwrap();
        Ok(s.query.clone().unwrap_or_else(|| v.offline.lineage.clone()))
    }

    pub fn interact_delta(&self, sid: &str, viz: &str, delta: &QueryDelta) -> Result<InteractResult> {
        let q = delta.apply(&self.current_query(sid, viz)?);
        self.interact(sid, viz, &q)
    }

    /// Answers `q` for (session, viz), reusing messages of the latest
    /// session CJT, the offline CJT and the cache.
    pub fn interact(&self, sid: &str, viz_id: &str, q: &QuerySpec) -> Result<InteractResult> {
        let started = Instant::now();
        self.check_session(sid)?;
        let viz = self.viz(viz_id)?;
        let slot = self.slot(sid, viz_id);
        let mut state = slot.lock().unwrap();
        self.preempt(&mut state);

        let opts = PlanOptions { bind: self.bind_options(), ..Default::default() };
        let cache = self.config.online.then_some(&*self.cache);
        let mut bases: Vec<(&'static str, &Cjt)> = Vec::new();
        if self.config.online {
            if let Some(c) = &state.cjt {
                bases.push(("session", c));
            }
        }
        bases.push(("offline", &viz.offline));
        let mut best: Option<(&'static str, &Cjt, SteinerPlan)> = None;
        for (name, base) in bases {
            let plan = plan_against(base, q, &opts, cache)?;
            if best.as_ref().is_none_or(|(_, _, p)| plan.schedule.len() < p.schedule.len()) {
                best = Some((name, base, plan));
            }
        }
        let (base_name, base, plan) = best.expect("the offline CJT is always a base");
        let Derived { cjt, answer, computed, reused, max_intermediate_rows } = execute_plan(base, &plan, q, cache)?;

        let status = cjt.status();
        let stats = InteractStats {
            messages_computed: computed,
            messages_reused: reused,
            steiner_bags: plan.tree.len(),
            max_intermediate_rows,
            latency_ms: started.elapsed().as_secs_f64() * 1e3,
            base: base_name,
            calibration_status: status,
        };
        if self.config.online {
            if let Some(old) = state.cjt.take() {
                for fp in old.fingerprints_held() {
                    self.cache.unpin(&fp);
                }
            }
            state.cjt = Some(cjt);
        }
        state.query = Some(q.clone());
        state.stats.interactions += 1;
        state.stats.messages_computed += computed;
        state.stats.messages_reused += reused;
        state.stats.last = Some(stats.clone());
        if self.config.online && self.config.background == BackgroundMode::Thread {
            self.launch(&mut state);
        }
        Ok(InteractResult { answer, stats, plan })
    }

    fn launch(&self, state: &mut SlotState) {
        let Some(cjt) = state.cjt.clone() else { return };
        let cancel = Arc::new(AtomicBool::new(false));
        let flag = cancel.clone();
        let cache = self.cache.clone();
        let handle = std::thread::spawn(move || cjt.calibrate_steps(usize::MAX, Some(&flag), Some(&cache)));
        state.background = Some(Background { cancel, handle });
    }

    /// Stops the slot's background calibration; at most the message in
    /// flight completes.
    fn preempt(&self, state: &mut SlotState) {
        if let Some(bg) = state.background.take() {
            bg.cancel.store(true, Ordering::Release);
            Self::reap(state, bg);
        }
    }

    fn reap(state: &mut SlotState, bg: Background) {
        match bg.handle.join() {
            Ok(Ok(n)) => state.stats.background_messages += n,
            Ok(Err(e)) => log::warn!("background calibration failed: {e}"),
            Err(_) => log::warn!("background calibration panicked"),
        }
    }

    /// Waits for the slot's background calibration to finish on its own.
    pub fn wait_background(&self, sid: &str, viz: &str) -> Result<()> {
        self.check_session(sid)?;
        let slot = self.slot(sid, viz);
        let mut state = slot.lock().unwrap();
        if let Some(bg) = state.background.take() {
            Self::reap(&mut state, bg);
        }
        Ok(())
    }

    /// Think time measured in messages: calibrates the latest session CJT by
    /// at most `budget` messages. Returns how many were computed.
    pub fn think(&self, sid: &str, viz: &str, budget: usize) -> Result<usize> {
        self.check_session(sid)?;
        self.viz(viz)?;
        let slot = self.slot(sid, viz);
        let mut state = slot.lock().unwrap();
        self.preempt(&mut state);
        let Some(cjt) = state.cjt.clone() else { return Ok(0) };
        let n = cjt.calibrate_steps(budget, None, Some(&self.cache))?;
        state.stats.background_messages += n;
        Ok(n)
    }

    pub fn stats(&self, sid: &str, viz: &str) -> Result<SlotStats> {
        self.check_session(sid)?;
        let v = self.viz(viz)?;
        let slot = self.slot(sid, viz);
        let state = slot.lock().unwrap();
        let mut s = state.stats.clone();
        let cjt = state.cjt.as_ref().unwrap_or(&v.offline);
        s.calibration_status = Some(cjt.status());
        s.messages_done = cjt.store.read().unwrap().len();
        s.messages_total = cjt.total_messages();
        Ok(s)
    }

    pub fn session_cjt(&self, sid: &str, viz: &str) -> Option<Cjt> {
        self.slot(sid, viz).lock().unwrap().cjt.clone()
    }

    pub fn viz_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.vizzes.read().unwrap().keys().cloned().collect();
        v.sort();
        v
    }
}

impl Drop for Manager {
    fn drop(&mut self) {
        let slots: Vec<_> = self.slots.lock().unwrap().values().cloned().collect();
        for s in slots {
            let mut st = s.lock().unwrap();
            if let Some(bg) = st.background.take() {
                bg.cancel.store(true, Ordering::Release);
                let _ = bg.handle.join();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle_execute;
    use crate::predicate::{Atom, Literal};
    use crate::relation::{Schema, Table};
    use crate::value::Value;

    fn msg(fp: &str, rows: usize) -> Arc<Message> {
        let attrs = vec![crate::value::attr("A")];
        let data: Vec<_> = (0..rows).map(|i| (vec![Value::num(i as f64)], crate::semiring::Annotation::Count(1))).collect();
        let content = AnnotatedRelation::from_rows(attrs, crate::semiring::SemiringKind::NaturalCount, data).unwrap();
        Arc::new(Message { from: 0, to: 1, content: Arc::new(content), kept: BTreeSet::new(), fingerprint: Some(fp.into()) })
    }

    #[test]
    fn lru_evicts_oldest_unpinned() {
        let c = MessageCache::new(2);
        c.put(msg("a", 1));
        c.put(msg("b", 1));
        c.put(msg("c", 1));
        assert!(!c.contains("a") && c.contains("b") && c.contains("c"));
        // get refreshes recency
        c.get("b");
        c.put(msg("d", 1));
        assert!(c.contains("b") && !c.contains("c"));
        assert!(!c.put(msg("d", 1)));
        assert_eq!(c.info().stats.evictions, 2);
    }

    #[test]
    fn pinned_entries_survive_over_budget() {
        let c = MessageCache::new(2);
        c.put_pinned(msg("a", 1));
        c.put_pinned(msg("b", 1));
        c.put_pinned(msg("c", 1));
        let info = c.info();
        assert_eq!((info.entries, info.rows, info.pinned), (3, 3, 3));
        assert!(info.stats.over_budget >= 1);
        c.unpin("a");
        assert!(!c.contains("a"));
        assert_eq!(c.info().rows, 2);
    }

    fn star() -> JoinGraph {
        crate::synth::shared_key_graph()
    }

    fn manager(bg: BackgroundMode) -> Manager {
        Manager::new(ManagerConfig { background: bg, ..Default::default() })
    }

    #[test]
    fn dashboard_registration_calibrates() {
        let m = manager(BackgroundMode::Manual);
        let gid = m.register_graph(star()).unwrap();
        assert_eq!(m.register_graph(star()).unwrap(), gid);
        let (viz, ans) = m.register_dashboard_query(&gid, None, &QuerySpec::count()).unwrap();
        assert_eq!(ans.total().scalar().unwrap(), 120.0);
        let cjt = m.offline_cjt(&viz).unwrap();
        assert_eq!(cjt.status(), CalibrationStatus::Full);
        assert_eq!(m.cache().info().pinned, 4);
        assert!(matches!(m.register_dashboard_query(&gid, Some(&viz), &QuerySpec::count()), Err(Error::Conflict(_))));
        assert!(matches!(m.register_dashboard_query("nope", None, &QuerySpec::count()), Err(Error::NotFound { .. })));

        let mut single = JoinGraph::new();
        let t = Table::new(Schema::categorical(&["A"]), vec![vec![Value::cat("x")], vec![Value::cat("y")]]).unwrap();
        single.add_relation("R", t).unwrap();
        let gid = m.register_graph(single).unwrap();
        let (viz, ans) = m.register_dashboard_query(&gid, None, &QuerySpec::count()).unwrap();
        assert_eq!(ans.total().scalar().unwrap(), 2.0);
        assert_eq!(m.offline_cjt(&viz).unwrap().store.read().unwrap().len(), 0);
    }

    #[test]
    fn interaction_sequence_reuses() {
        let m = manager(BackgroundMode::Manual);
        let g = star();
        let gid = m.register_graph(star()).unwrap();
        let (viz, _) = m.register_dashboard_query(&gid, None, &QuerySpec::count()).unwrap();
        let s = m.create_session();
        let q2 = QuerySpec::count().filter(Atom::eq("D", Literal::str("d1")));
        let r2 = m.interact(&s, &viz, &q2).unwrap();
        assert!(r2.answer.approx_eq(&oracle_execute(&g, &q2, 1 << 20).unwrap(), 1e-12));
        assert_eq!(r2.stats.steiner_bags, 1);
        assert_eq!(r2.stats.messages_computed, 0);

        let again = m.interact(&s, &viz, &q2).unwrap();
        assert_eq!(again.stats.messages_computed, 0);

        let q3 = q2.clone().group_by(&["B"]);
        // after Q2 is calibrated, Q3 costs no more than against Q1
        m.think(&s, &viz, usize::MAX).unwrap();
        let after_q2 = m.interact(&s, &viz, &q3).unwrap();
        let fresh = m.create_session();
        let after_q1 = m.interact(&fresh, &viz, &q3).unwrap();
        assert!(after_q2.stats.messages_computed <= after_q1.stats.messages_computed);
        assert!(after_q2.answer.approx_eq(&oracle_execute(&g, &q3, 1 << 20).unwrap(), 1e-12));
        assert!(after_q1.answer.approx_eq(&after_q2.answer, 0.0));

        let st = m.stats(&s, &viz).unwrap();
        assert_eq!(st.interactions, 3);
        assert!(matches!(m.interact("nobody", &viz, &q2), Err(Error::NotFound { .. })));
    }

    #[test]
    fn background_thread_calibrates_and_is_preempted() {
        let m = manager(BackgroundMode::Thread);
        let g = star();
        let gid = m.register_graph(star()).unwrap();
        let (viz, _) = m.register_dashboard_query(&gid, None, &QuerySpec::count()).unwrap();
        let s = m.create_session();
        let q = QuerySpec::count().group_by(&["A"]).filter(Atom::eq("C", Literal::str("c1")));
        m.interact(&s, &viz, &q).unwrap();
        m.wait_background(&s, &viz).unwrap();
        assert_eq!(m.stats(&s, &viz).unwrap().calibration_status, Some(CalibrationStatus::Full));
        // a burst of interactions, each preempting the previous calibration
        for (i, v) in ["a1", "a2", "a1"].iter().enumerate() {
            let q = QuerySpec::count().group_by(&["B"]).filter(Atom::eq("A", Literal::str(v)));
            let r = m.interact(&s, &viz, &q).unwrap();
            assert!(r.answer.approx_eq(&oracle_execute(&g, &q, 1 << 20).unwrap(), 1e-12), "step {i}");
        }
    }

    #[test]
    fn delta_application() {
        let base = QuerySpec::count().group_by(&["A"]).filter(Atom::eq("C", Literal::str("c1")));
        let d: QueryDelta = serde_json::from_str(
            r#"{"add_group_by":["B"],"remove_group_by":["A"],"add_filters":[[{"attr":"D","op":"=","value":"d1"}]],"clear_filters_on":["C"]}"#,
        )
        .unwrap();
        let q = d.apply(&base);
        assert_eq!(q.group_by, vec!["B"]);
        assert_eq!(q.filters.len(), 1);
        assert_eq!(q.filters[0].canonical(), Predicate::from(Atom::eq("D", Literal::str("d1"))).canonical());
        assert_eq!(QueryDelta::default().apply(&base), base);
    }

    #[test]
    fn deltas_accumulate_without_session_cjts() {
        let g = star();
        for online in [true, false] {
            let m = Manager::new(ManagerConfig { background: BackgroundMode::Off, online, ..Default::default() });
            let gid = m.register_graph(g.clone()).unwrap();
            let (viz, _) = m.register_dashboard_query(&gid, None, &QuerySpec::count().group_by(&["A"])).unwrap();
            let s = m.create_session();
            let add = |a: &str, v: &str| QueryDelta { add_filters: vec![Atom::eq(a, Literal::str(v)).into()], ..Default::default() };
            m.interact_delta(&s, &viz, &add("B", "b1")).unwrap();
            let r = m.interact_delta(&s, &viz, &add("D", "d2")).unwrap();
            let want = QuerySpec::count().group_by(&["A"]).filter(Atom::eq("B", Literal::str("b1"))).filter(Atom::eq("D", Literal::str("d2")));
            assert_eq!(m.current_query(&s, &viz).unwrap(), want, "online={online}");
            assert!(r.answer.approx_eq(&oracle_execute(&g, &want, 1 << 20).unwrap(), 1e-12));
        }
    }
}
