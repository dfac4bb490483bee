//! Message passing over an annotated junction hypertree.
//!
//! A message `u → v` joins `u`'s mapped relations (after σ, exclusions and
//! version updates) with every message arriving at `u` except the one from
//! `v`, then sums out everything except the attributes shared with `v` and the
//! attributes kept alive by γ annotations upstream. γ labels travel with
//! messages; a Σ annotation on a bag strips its attribute from the label.

use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jointree::{AnnotationSet, BagId, JoinGraph, JunctionHypertree, QuerySpec};
use crate::predicate::Predicate;
use crate::relation::AnnotatedRelation;
use crate::semiring::Annotation;
use crate::value::{attr, Attr, Value};

/// 128-bit digest of a message's upstream subtree, hex encoded.
pub type Fingerprint = String;

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub from: BagId,
    pub to: BagId,
    pub content: Arc<AnnotatedRelation>,
    /// γ label: attributes that must survive downstream of this message.
    pub kept: BTreeSet<Attr>,
    pub fingerprint: Option<Fingerprint>,
}

/// Directed-edge → message map. Messages are published whole.
#[derive(Debug, Clone, Default)]
pub struct MessageStore {
    messages: HashMap<(BagId, BagId), Arc<Message>>,
}

impl MessageStore {
    pub fn new() -> MessageStore {
        MessageStore::default()
    }

    pub fn get(&self, from: BagId, to: BagId) -> Option<&Arc<Message>> {
        self.messages.get(&(from, to))
    }

    pub fn contains(&self, from: BagId, to: BagId) -> bool {
        self.messages.contains_key(&(from, to))
    }

    pub fn insert(&mut self, m: Arc<Message>) {
        self.messages.insert((m.from, m.to), m);
    }

    pub fn remove(&mut self, from: BagId, to: BagId) -> Option<Arc<Message>> {
        self.messages.remove(&(from, to))
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn edges(&self) -> impl Iterator<Item = (BagId, BagId)> + '_ {
        self.messages.keys().copied()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Arc<Message>> {
        self.messages.values()
    }

    pub fn total_rows(&self) -> usize {
        self.messages.values().map(|m| m.content.len()).sum()
    }
}

/// Counters shared by everything executed under one [`Executor`].
#[derive(Debug, Default)]
pub struct ExecStats {
    pub messages_computed: AtomicUsize,
    pub max_intermediate_rows: AtomicUsize,
    pub absorptions: AtomicUsize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StatsSnapshot {
    pub messages_computed: usize,
    pub max_intermediate_rows: usize,
    pub absorptions: usize,
}

impl ExecStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            messages_computed: self.messages_computed.load(Ordering::Relaxed),
            max_intermediate_rows: self.max_intermediate_rows.load(Ordering::Relaxed),
            absorptions: self.absorptions.load(Ordering::Relaxed),
        }
    }

    fn observe(&self, rows: usize) {
        self.max_intermediate_rows.fetch_max(rows, Ordering::Relaxed);
    }
}

/// Executes messages and absorptions for one annotated hypertree.
///
/// Bag contents (mapped relations after σ) are memoized per bag.
pub struct Executor<'a> {
    pub graph: &'a JoinGraph,
    pub jt: &'a JunctionHypertree,
    pub ann: &'a AnnotationSet,
    pub stats: ExecStats,
    bag_cache: Mutex<HashMap<BagId, Arc<AnnotatedRelation>>>,
}

impl<'a> Executor<'a> {
    pub fn new(graph: &'a JoinGraph, jt: &'a JunctionHypertree, ann: &'a AnnotationSet) -> Executor<'a> {
        Executor { graph, jt, ann, stats: ExecStats::default(), bag_cache: Mutex::new(HashMap::new()) }
    }

    /// Join of the bag's included relations with its σ applied; the unit
    /// relation when nothing is mapped.
    pub fn bag_relation(&self, bag: BagId) -> Result<Arc<AnnotatedRelation>> {
        if let Some(r) = self.bag_cache.lock().unwrap().get(&bag) {
            return Ok(r.clone());
        }
        let spec = &self.ann.aggregate;
        let preds: Vec<&Predicate> = self.ann.selections(bag).collect();
        let mut placed = vec![false; preds.len()];
        let mut parts: Vec<Arc<AnnotatedRelation>> = Vec::new();
        for rel in self.ann.included(self.jt, bag) {
            let version = self.ann.version_of(self.graph, rel)?;
            let schema = &self.jt.relation_attrs()[rel];
            let mine: Vec<&Predicate> = preds
                .iter()
                .enumerate()
                .filter(|(i, p)| !placed[*i] && p.attrs().iter().all(|a| schema.contains(*a)))
                .map(|(_, p)| *p)
                .collect();
            for (i, p) in preds.iter().enumerate() {
                if mine.contains(p) {
                    placed[i] = true;
                }
            }
            if mine.is_empty() {
                parts.push(self.graph.annotated(rel, version, spec)?);
            } else {
                parts.push(Arc::new(self.graph.annotated_filtered(rel, version, spec, &mine)?));
            }
        }
        let mut out = match parts.len() {
            0 => Arc::new(AnnotatedRelation::unit(spec.kind())),
            1 => parts.pop().unwrap(),
            _ => {
                let mut acc = (*parts[0]).clone();
                for p in &parts[1..] {
                    acc = acc.join(p)?;
                    self.stats.observe(acc.len());
                }
                Arc::new(acc)
            }
        };
        // predicates spanning several relations of the bag
        for (i, p) in preds.iter().enumerate() {
            if !placed[i] {
                out = Arc::new(out.select(p)?);
            }
        }
        self.bag_cache.lock().unwrap().insert(bag, out.clone());
        Ok(out)
    }

    fn gather(&self, u: BagId, skip: Option<BagId>, store: &MessageStore) -> Result<Vec<Arc<Message>>> {
        let mut incoming = Vec::new();
        for i in self.jt.neighbors(u) {
            if Some(i) == skip {
                continue;
            }
            let m = store.get(i, u).ok_or(Error::MissingMessage { from: i, to: u })?;
            incoming.push(m.clone());
        }
        Ok(incoming)
    }

    fn join_all(&self, u: BagId, incoming: &[Arc<Message>]) -> Result<AnnotatedRelation> {
        let base = self.bag_relation(u)?;
        let mut parts: Vec<&AnnotatedRelation> = incoming.iter().map(|m| &*m.content).collect();
        // small inputs first keeps intermediates small on star-shaped bags
        parts.sort_by_key(|r| r.len());
        let mut acc = (*base).clone();
        self.stats.observe(acc.len());
        for p in parts {
            acc = acc.join(p)?;
            self.stats.observe(acc.len());
        }
        Ok(acc)
    }

    /// γ label of the message `u → v` given the incoming messages.
    fn label(&self, u: BagId, incoming: &[Arc<Message>]) -> BTreeSet<Attr> {
        let mut kept: BTreeSet<Attr> = incoming.iter().flat_map(|m| m.kept.iter().cloned()).collect();
        kept.extend(self.ann.gammas(u));
        for a in self.ann.sums(u) {
            kept.remove(&a);
        }
        kept
    }

    /// Computes `u → v` from the messages already in `store`.
    pub fn compute_message(&self, u: BagId, v: BagId, store: &MessageStore) -> Result<Message> {
        if !self.jt.adjacent(u, v) {
            return Err(Error::InvalidJoinTree(format!("bags {u} and {v} are not adjacent")));
        }
        let incoming = self.gather(u, Some(v), store)?;
        let joined = self.join_all(u, &incoming)?;
        let kept = self.label(u, &incoming);
        let mut keep = self.jt.shared(u, v);
        keep.extend(kept.iter().cloned());
        let content = joined.project_onto(&keep);
        self.stats.messages_computed.fetch_add(1, Ordering::Relaxed);
        Ok(Message { from: u, to: v, content: Arc::new(content), kept, fingerprint: None })
    }

    /// σ(⋈ relations ∪ all incoming messages) at `root`, nothing summed out.
    pub fn absorption(&self, root: BagId, store: &MessageStore) -> Result<AnnotatedRelation> {
        self.jt.bag(root)?;
        let incoming = self.gather(root, None, store)?;
        self.stats.absorptions.fetch_add(1, Ordering::Relaxed);
        self.join_all(root, &incoming)
    }

    /// The query answer: the absorption at `root` marginalized onto 𝒢.
    pub fn absorb(&self, root: BagId, store: &MessageStore) -> Result<AnnotatedRelation> {
        let full = self.absorption(root, store)?;
        Ok(project_answer(&full, &self.ann.group_by))
    }

    /// Computes every message toward `root` that is not already stored.
    /// Returns how many were computed.
    pub fn upward_pass(&self, root: BagId, store: &mut MessageStore) -> Result<usize> {
        self.run_edges(&self.jt.upward_edges(root), store, None).map(|(n, _)| n)
    }

    pub fn downward_pass(&self, root: BagId, store: &mut MessageStore) -> Result<usize> {
        self.run_edges(&self.jt.downward_edges(root), store, None).map(|(n, _)| n)
    }

    /// Runs `edges` in order, skipping stored ones; stops early when `cancel`
    /// is raised. Returns (computed, completed).
    pub fn run_edges(
        &self,
        edges: &[(BagId, BagId)],
        store: &mut MessageStore,
        cancel: Option<&AtomicBool>,
    ) -> Result<(usize, bool)> {
        let mut done = 0;
        for &(u, v) in edges {
            if store.contains(u, v) {
                continue;
            }
            if cancel.is_some_and(|c| c.load(Ordering::Acquire)) {
                return Ok((done, false));
            }
            let m = self.compute_message(u, v, store)?;
            store.insert(Arc::new(m));
            done += 1;
        }
        Ok((done, true))
    }

    /// Upward then downward pass from `root`, observing `cancel` between
    /// messages.
    pub fn calibrate(&self, root: BagId, store: &mut MessageStore, cancel: &AtomicBool) -> Result<Calibration> {
        let order = calibration_order(self.jt, root);
        let (messages_done, completed) = self.run_edges(&order, store, Some(cancel))?;
        Ok(Calibration { completed, messages_done })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Calibration {
    pub completed: bool,
    pub messages_done: usize,
}

/// Upward edges toward `root` followed by the reversed (downward) edges.
pub fn calibration_order(jt: &JunctionHypertree, root: BagId) -> Vec<(BagId, BagId)> {
    let mut order = jt.upward_edges(root);
    order.extend(jt.downward_edges(root));
    order
}

/// Sums out everything not in `group_by`.
pub fn project_answer(full: &AnnotatedRelation, group_by: &BTreeSet<Attr>) -> AnnotatedRelation {
    full.project_onto(group_by)
}

/// Checks the calibration identity: adjacent absorptions agree once
/// marginalized onto the bags' shared attributes, and, when no Σ is placed,
/// onto the shared attributes plus the output group-by.
pub fn check_calibration(exec: &Executor<'_>, store: &MessageStore, rel_tol: f64) -> Result<Vec<(BagId, BagId)>> {
    let absorptions: Vec<AnnotatedRelation> =
        (0..exec.jt.len()).map(|b| exec.absorption(b, store)).collect::<Result<_>>()?;
    let mut bad = Vec::new();
    for (u, v) in exec.jt.edges() {
        let mut targets = vec![exec.jt.shared(u, v)];
        if !exec.ann.has_marginalize() {
            let mut wide = exec.jt.shared(u, v);
            wide.extend(exec.ann.group_by.iter().cloned());
            targets.push(wide);
        }
        for t in targets {
            let a = absorptions[u].project_onto(&t);
            let b = absorptions[v].project_onto(&t);
            if !a.approx_eq(&b, rel_tol) {
                bad.push((u, v));
                break;
            }
        }
    }
    Ok(bad)
}

/// Default calibration root: the bag with the largest mapped relation.
pub fn default_root(g: &JoinGraph, jt: &JunctionHypertree) -> BagId {
    crate::jointree::largest_bag(g, jt)
}

/// Ground truth by brute force: materializes the full join of the raw
/// tables, filters, lifts every joined tuple and groups by the output
/// attributes. Fails once an intermediate result exceeds `row_budget`.
pub fn oracle_execute(g: &JoinGraph, q: &QuerySpec, row_budget: usize) -> Result<AnnotatedRelation> {
    oracle_execute_stats(g, q, row_budget).map(|(r, _)| r)
}

/// [`oracle_execute`] that also reports the largest intermediate join.
pub fn oracle_execute_stats(g: &JoinGraph, q: &QuerySpec, row_budget: usize) -> Result<(AnnotatedRelation, usize)> {
    let mut max_rows = 0;
    let mut attrs: Vec<Attr> = Vec::new();
    let mut rows: Vec<Vec<Value>> = vec![vec![]];
    let mut pending: Vec<&Predicate> = q.filters.iter().collect();
    for rel in g.relations() {
        if q.exclude.contains(&rel.name) {
            continue;
        }
        let version = q.updates.get(&rel.name).unwrap_or(&rel.default_version);
        let table = rel.table(version)?;
        let names: Vec<Attr> = rel.schema.names().map(attr).collect();
        let shared: Vec<(usize, usize)> = names
            .iter()
            .enumerate()
            .filter_map(|(j, a)| attrs.iter().position(|x| x == a).map(|i| (i, j)))
            .collect();
        let fresh: Vec<usize> = (0..names.len()).filter(|j| !shared.iter().any(|(_, s)| s == j)).collect();
        let mut index: HashMap<Vec<Value>, Vec<usize>> = HashMap::new();
        for (k, r) in table.rows.iter().enumerate() {
            index.entry(shared.iter().map(|(_, j)| r[*j]).collect()).or_default().push(k);
        }
        let mut next = Vec::new();
        for row in &rows {
            let key: Vec<Value> = shared.iter().map(|(i, _)| row[*i]).collect();
            if let Some(ks) = index.get(&key) {
                for &k in ks {
                    let mut out = row.clone();
                    out.extend(fresh.iter().map(|j| table.rows[k][*j]));
                    next.push(out);
                    if next.len() > row_budget {
                        return Err(Error::OracleTooLarge { rows: next.len(), budget: row_budget });
                    }
                }
            }
        }
        attrs.extend(fresh.iter().map(|j| names[*j].clone()));
        max_rows = max_rows.max(next.len());
        rows = next;
        // filter as soon as a predicate's attributes are all present
        let mut still = Vec::new();
        for p in pending {
            if p.attrs().iter().all(|a| attrs.iter().any(|x| &**x == *a)) {
                let c = p.compile(&attrs)?;
                let mut kept = Vec::with_capacity(rows.len());
                for r in rows {
                    if c.eval(&r)? {
                        kept.push(r);
                    }
                }
                rows = kept;
            } else {
                still.push(p);
            }
        }
        pending = still;
    }
    if let Some(p) = pending.first() {
        return Err(Error::UnknownAttribute(p.attrs().into_iter().next().unwrap_or_default().to_string()));
    }
    let group: Vec<Attr> = q.group_by.iter().map(|a| attr(a)).collect();
    let positions: Vec<usize> = group
        .iter()
        .map(|a| attrs.iter().position(|x| x == a).ok_or_else(|| Error::UnknownAttribute(a.to_string())))
        .collect::<Result<_>>()?;
    let spec = &q.aggregate;
    let mut out: Vec<(Vec<Value>, Annotation)> = Vec::with_capacity(rows.len());
    for r in &rows {
        let ann = spec.lift(|name| attrs.iter().position(|x| &**x == name).map(|i| r[i]))?;
        out.push((positions.iter().map(|i| r[*i]).collect(), ann));
    }
    Ok((AnnotatedRelation::from_rows(group, spec.kind(), out)?, max_rows))
}
