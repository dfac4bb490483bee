//! Planning a query against a (partially) calibrated hypertree: cost-based
//! root choice, annotation diffing with compensating Σ, Steiner trees over
//! the differing bags, shrinking, and message fingerprints.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::engine::Fingerprint;
use crate::error::Result;
use crate::jointree::{
    bind_annotations, AnnotationSet, BagAnnotation, BagId, BindOptions, JoinGraph, JunctionHypertree, Placement,
    QuerySpec,
};
use crate::predicate::{Atom, CmpOp};
use crate::value::Attr;

/// Lower bound on any selectivity estimate.
pub const MIN_SELECTIVITY: f64 = 1e-4;
/// Default selectivity of a range comparison.
pub const RANGE_SELECTIVITY: f64 = 1.0 / 3.0;

/// Cardinality and domain estimates behind the message cost formula.
#[derive(Debug, Clone, Serialize)]
pub struct CostModel {
    /// Row count of each relation, by version.
    relation_rows: BTreeMap<(String, String), f64>,
    pub domains: BTreeMap<Attr, usize>,
}

impl CostModel {
    pub fn new(g: &JoinGraph) -> CostModel {
        let mut relation_rows = BTreeMap::new();
        for r in g.relations() {
            for (v, t) in &r.versions {
                relation_rows.insert((r.name.clone(), v.clone()), t.rows.len() as f64);
            }
        }
        CostModel { relation_rows, domains: g.domain_sizes() }
    }

    /// Multiplies every cardinality by `k`; used to check scale invariance.
    pub fn scaled(&self, k: f64) -> CostModel {
        let mut out = self.clone();
        for v in out.relation_rows.values_mut() {
            *v *= k;
        }
        out
    }

    pub fn set_rows(&mut self, relation: &str, version: &str, rows: f64) {
        self.relation_rows.insert((relation.to_string(), version.to_string()), rows);
    }

    pub fn domain(&self, a: &str) -> f64 {
        self.domains.get(a).copied().unwrap_or(1).max(1) as f64
    }

    fn atom_selectivity(&self, atom: &Atom) -> f64 {
        let d = self.domain(atom.attr());
        match atom {
            Atom::Cmp { op: CmpOp::Eq, .. } => 1.0 / d,
            Atom::Cmp { op: CmpOp::Ne, .. } => 1.0 - 1.0 / d,
            Atom::Cmp { .. } => RANGE_SELECTIVITY,
            Atom::In { values, .. } => (values.len() as f64 / d).min(1.0),
        }
    }

    /// s(u): product over the bag's σ atoms, floored.
    pub fn selectivity(&self, ann: &AnnotationSet, bag: BagId) -> f64 {
        let s: f64 = ann.selections(bag).flat_map(|p| p.atoms.iter()).map(|a| self.atom_selectivity(a)).product();
        s.clamp(MIN_SELECTIVITY, 1.0)
    }

    /// |R_u|: product of included relation sizes; `None` for a bag with no
    /// included relation.
    pub fn bag_rows(&self, g: &JoinGraph, jt: &JunctionHypertree, ann: &AnnotationSet, bag: BagId) -> Option<f64> {
        let mut rows = None;
        for r in ann.included(jt, bag) {
            let v = ann.version_of(g, r).unwrap_or("");
            let n = self.relation_rows.get(&(r.clone(), v.to_string())).copied().unwrap_or(0.0);
            rows = Some(rows.unwrap_or(1.0) * n);
        }
        rows
    }
}

/// Per-edge estimates for one root, plus the total.
#[derive(Debug, Clone, Serialize)]
pub struct RootCost {
    pub root: BagId,
    pub total: f64,
    /// (from, to, size bound 𝓢, cost 𝓜); the absorption has `to == from`.
    pub terms: Vec<(BagId, BagId, f64, f64)>,
}

/// Evaluates the message-cost sum for `root`: Σ 𝓜(u,v) over edges toward the
/// root plus the absorption term, with 𝓜(u,v) = (|U(u,v)|+1)·(|u|+g(u,v))·𝓢(u,v)
/// and 𝓢(u,v) = Π dom(upstream γ)·s(u)·|R_u|. Log factors are dropped.
/// Edges listed in `skip` (already available) are priced at zero.
pub fn root_cost(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    ann: &AnnotationSet,
    cm: &CostModel,
    root: BagId,
    skip: &dyn Fn(BagId, BagId) -> bool,
) -> RootCost {
    let mut size: HashMap<(BagId, BagId), f64> = HashMap::new();
    let mut label: HashMap<(BagId, BagId), BTreeSet<Attr>> = HashMap::new();
    let mut terms = Vec::new();
    let mut total = 0.0;
    let mut edges: Vec<(BagId, Option<BagId>)> = jt.upward_edges(root).into_iter().map(|(u, v)| (u, Some(v))).collect();
    edges.push((root, None));
    for (u, v) in edges {
        let incoming: Vec<BagId> = jt.neighbors(u).filter(|i| Some(*i) != v).collect();
        let mut upstream: BTreeSet<Attr> = incoming.iter().flat_map(|i| label[&(*i, u)].iter().cloned()).collect();
        for a in ann.sums(u) {
            upstream.remove(&a);
        }
        let bag_attrs = &jt.bags()[u].attrs;
        let extra: Vec<&Attr> = upstream.iter().filter(|a| !bag_attrs.contains(*a)).collect();
        let g_count = extra.len() as f64;
        let s = match cm.bag_rows(g, jt, ann, u) {
            Some(rows) => {
                extra.iter().map(|a| cm.domain(a)).product::<f64>() * cm.selectivity(ann, u) * rows
            }
            None => incoming.iter().map(|i| size[&(*i, u)]).fold(1.0, f64::max),
        };
        let m = (incoming.len() as f64 + 1.0) * (bag_attrs.len() as f64 + g_count) * s;
        let priced = match v {
            Some(v) if skip(u, v) => 0.0,
            _ => m,
        };
        total += priced;
        let to = v.unwrap_or(u);
        terms.push((u, to, s, priced));
        if let Some(v) = v {
            let mut kept = upstream;
            kept.extend(ann.gammas(u));
            for a in ann.sums(u) {
                kept.remove(&a);
            }
            label.insert((u, v), kept);
            size.insert((u, v), s);
        }
    }
    RootCost { root, total, terms }
}

/// The candidate with the smallest cost sum; ties go to the lower bag id.
pub fn choose_root(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    ann: &AnnotationSet,
    cm: &CostModel,
    candidates: Option<&BTreeSet<BagId>>,
) -> RootCost {
    choose_root_with(g, jt, ann, cm, candidates, &|_, _| false)
}

fn choose_root_with(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    ann: &AnnotationSet,
    cm: &CostModel,
    candidates: Option<&BTreeSet<BagId>>,
    skip: &dyn Fn(BagId, BagId) -> bool,
) -> RootCost {
    let all: BTreeSet<BagId> = (0..jt.len()).collect();
    let cands = candidates.filter(|c| !c.is_empty()).unwrap_or(&all);
    cands
        .iter()
        .map(|r| root_cost(g, jt, ann, cm, *r, skip))
        .min_by(|a, b| a.total.total_cmp(&b.total).then(a.root.cmp(&b.root)))
        .expect("a hypertree has at least one bag")
}

/// Result of diffing the next query against the previous annotations.
#[derive(Debug, Clone, Serialize)]
pub struct Diff {
    pub annotations: AnnotationSet,
    pub b_delta: BTreeSet<BagId>,
    pub compensations: Vec<Placement>,
}

/// Bags whose annotation sets differ.
pub fn differing_bags(jt: &JunctionHypertree, prev: &AnnotationSet, next: &AnnotationSet) -> BTreeSet<BagId> {
    if prev.aggregate != next.aggregate {
        return (0..jt.len()).collect();
    }
    (0..jt.len()).filter(|b| prev.canonical_on_bag(*b) != next.canonical_on_bag(*b)).collect()
}

/// Binds `next` so that it differs from `prev` as little as possible.
///
/// γ and σ shared with `prev` keep their bags. A γ_A in `prev` whose attribute
/// is no longer grouped stays in place and is cancelled by a compensating
/// Σ_A (kept where `prev` already had one).
pub fn diff_annotations(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    prev: &AnnotationSet,
    next: &QuerySpec,
    opts: &BindOptions,
) -> Result<Diff> {
    Ok(diff_bound(g, jt, prev, bind_annotations(g, jt, next, opts)?))
}

/// [`diff_annotations`] for an already bound annotation set.
pub fn diff_bound(g: &JoinGraph, jt: &JunctionHypertree, prev: &AnnotationSet, base: AnnotationSet) -> Diff {
    if prev.aggregate != base.aggregate {
        let b_delta = (0..jt.len()).collect();
        return Diff { annotations: base, b_delta, compensations: vec![] };
    }
    let mut ann = base.clone();
    for p in base.placements() {
        let prev_bag = match &p.annotation {
            BagAnnotation::GroupBy { attr } => {
                prev.find_bag(|a| matches!(a, BagAnnotation::GroupBy { attr: x } if x == attr))
            }
            BagAnnotation::Select { predicate } => prev.find_bag(
                |a| matches!(a, BagAnnotation::Select { predicate: x } if x.canonical() == predicate.canonical()),
            ),
            _ => None,
        };
        if let Some(b) = prev_bag.filter(|b| *b != p.bag) {
            let mut moved = ann.clone();
            moved.remove(p.bag, &p.annotation);
            moved.push(b, p.annotation.clone());
            if moved.check(g, jt).is_ok() {
                ann = moved;
            }
        }
    }
    let mut compensations = Vec::new();
    for p in prev.placements() {
        let BagAnnotation::GroupBy { attr } = &p.annotation else { continue };
        if ann.group_by.iter().any(|a| &**a == attr) {
            continue;
        }
        ann.push(p.bag, p.annotation.clone());
        let sum = BagAnnotation::Marginalize { attr: attr.clone() };
        match prev.find_bag(|a| *a == sum) {
            Some(b) => ann.push(b, sum),
            None => {
                compensations.push(Placement { bag: p.bag, annotation: sum.clone() });
                ann.push(p.bag, sum);
            }
        }
    }
    let b_delta = differing_bags(jt, prev, &ann);
    Diff { annotations: ann, b_delta, compensations }
}

/// Minimal subtree spanning `b_delta`: the whole tree with non-member leaves
/// pruned until none is left.
pub fn steiner_tree(jt: &JunctionHypertree, b_delta: &BTreeSet<BagId>) -> BTreeSet<BagId> {
    if b_delta.is_empty() {
        return BTreeSet::new();
    }
    let mut alive: BTreeSet<BagId> = (0..jt.len()).collect();
    loop {
        let prune: Vec<BagId> = alive
            .iter()
            .copied()
            .filter(|b| !b_delta.contains(b) && jt.neighbors(*b).filter(|n| alive.contains(n)).count() <= 1)
            .collect();
        if prune.is_empty() {
            return alive;
        }
        for b in prune {
            alive.remove(&b);
        }
    }
}

fn placement_valid(g: &JoinGraph, jt: &JunctionHypertree, ann: &AnnotationSet, bag: BagId, a: &BagAnnotation) -> bool {
    let mut probe = AnnotationSet::new(ann.aggregate.clone(), ann.group_by.clone(), vec![]);
    for p in ann.placements() {
        if matches!(p.annotation, BagAnnotation::Exclude { .. }) {
            probe.push(p.bag, p.annotation.clone());
        }
    }
    probe.push(bag, a.clone());
    probe.check(g, jt).is_ok()
}

/// Moves the movable annotations that make Steiner leaves differ onto their
/// tree neighbor, largest leaves first, keeping a move only when the tree
/// gets smaller. Repeats until no move helps.
pub fn shrink(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    prev: &AnnotationSet,
    next: AnnotationSet,
    cm: &CostModel,
) -> (AnnotationSet, BTreeSet<BagId>) {
    let mut ann = next;
    let mut tree = steiner_tree(jt, &differing_bags(jt, prev, &ann));
    if prev.aggregate != ann.aggregate {
        return (ann, tree);
    }
    loop {
        if tree.len() <= 1 {
            return (ann, tree);
        }
        let mut leaves: Vec<(f64, BagId, BagId)> = tree
            .iter()
            .copied()
            .filter_map(|b| {
                let ns: Vec<BagId> = jt.neighbors(b).filter(|n| tree.contains(n)).collect();
                (ns.len() == 1).then(|| (cm.bag_rows(g, jt, &ann, b).unwrap_or(0.0), b, ns[0]))
            })
            .collect();
        leaves.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut committed = false;
        for (_, leaf, to) in leaves {
            let old: BTreeSet<String> = prev.canonical_on_bag(leaf).into_iter().collect();
            let movable: Vec<BagAnnotation> = ann
                .on_bag(leaf)
                .filter(|a| a.is_movable() && !old.contains(&a.canonical()))
                .cloned()
                .collect();
            if movable.is_empty() || !movable.iter().all(|a| placement_valid(g, jt, &ann, to, a)) {
                continue;
            }
            let mut moved = ann.clone();
            for a in &movable {
                moved.remove(leaf, a);
                moved.push(to, a.clone());
            }
            let t = steiner_tree(jt, &differing_bags(jt, prev, &moved));
            if t.len() < tree.len() {
                ann = moved;
                tree = t;
                committed = true;
                break;
            }
        }
        if !committed {
            return (ann, tree);
        }
    }
}

/// Canonical upstream-subtree digests for every directed edge of one
/// annotated hypertree.
pub struct Fingerprinter<'a> {
    graph_id: &'a str,
    g: &'a JoinGraph,
    jt: &'a JunctionHypertree,
    ann: &'a AnnotationSet,
    memo: HashMap<(BagId, BagId), String>,
}

impl<'a> Fingerprinter<'a> {
    pub fn new(graph_id: &'a str, g: &'a JoinGraph, jt: &'a JunctionHypertree, ann: &'a AnnotationSet) -> Self {
        Fingerprinter { graph_id, g, jt, ann, memo: HashMap::new() }
    }

    /// Canonical text of the subtree hanging off `u` away from `v`. Children
    /// are sorted by their own text, so bag ids do not matter.
    fn subtree(&mut self, u: BagId, v: BagId) -> String {
        if let Some(s) = self.memo.get(&(u, v)) {
            return s.clone();
        }
        let bag = &self.jt.bags()[u];
        let attrs: Vec<&str> = bag.attrs.iter().map(|a| &**a).collect();
        let rels: Vec<String> = bag
            .relations
            .iter()
            .map(|r| {
                let ver = self.ann.version_of(self.g, r).unwrap_or("?");
                format!("{r}@{ver}{}", if self.ann.is_excluded(r) { "!" } else { "" })
            })
            .collect();
        let anns = self.ann.canonical_on_bag(u);
        let neighbors: Vec<BagId> = self.jt.neighbors(u).filter(|n| *n != v).collect();
        let mut children: Vec<String> = neighbors.into_iter().map(|c| self.subtree(c, u)).collect();
        children.sort();
        let s = format!(
            "{{a:{};r:{};n:{};c:[{}]}}",
            attrs.join(","),
            rels.join(","),
            anns.join(";"),
            children.join(",")
        );
        self.memo.insert((u, v), s.clone());
        s
    }

    pub fn fingerprint(&mut self, u: BagId, v: BagId) -> Fingerprint {
        let tree = self.subtree(u, v);
        let shared: Vec<String> = self.jt.shared(u, v).iter().map(|a| a.to_string()).collect();
        let spec = serde_json::to_string(&self.ann.aggregate).unwrap_or_default();
        let mut h = Sha256::new();
        for part in [self.graph_id, &spec, &shared.join(","), &tree] {
            h.update(part.as_bytes());
            h.update([0]);
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn all(&mut self) -> BTreeMap<(BagId, BagId), Fingerprint> {
        let mut out = BTreeMap::new();
        for (a, b) in self.jt.edges() {
            out.insert((a, b), self.fingerprint(a, b));
            out.insert((b, a), self.fingerprint(b, a));
        }
        out
    }
}

/// Fingerprint of one message; see [`Fingerprinter`].
pub fn fingerprint(graph_id: &str, g: &JoinGraph, jt: &JunctionHypertree, ann: &AnnotationSet, u: BagId, v: BagId) -> Fingerprint {
    Fingerprinter::new(graph_id, g, jt, ann).fingerprint(u, v)
}

#[derive(Debug, Clone, Serialize)]
pub struct SteinerPlan {
    pub annotations: AnnotationSet,
    pub b_delta: BTreeSet<BagId>,
    pub tree: BTreeSet<BagId>,
    pub root: BagId,
    /// Messages to compute, in dependency order.
    pub schedule: Vec<(BagId, BagId)>,
    /// Messages toward the root served from the store or cache.
    pub reused: Vec<(BagId, BagId)>,
    pub compensations: Vec<Placement>,
    pub estimated_cost: f64,
    #[serde(skip)]
    pub fingerprints: BTreeMap<(BagId, BagId), Fingerprint>,
}

impl SteinerPlan {
    pub fn tree_edge_count(&self) -> usize {
        self.tree.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PlanOptions {
    pub bind: BindOptions,
    /// Skip shrinking (for comparisons).
    pub no_shrink: bool,
}

/// Plans `next` against previous annotations whose messages are reachable
/// through `available(edge, fingerprint)`.
///
/// The root is the cheapest tree bag (any bag when nothing differs), pricing
/// available messages at zero. The schedule lists every message toward the
/// root that is not available.
pub fn plan_with_reuse(
    graph_id: &str,
    g: &JoinGraph,
    jt: &JunctionHypertree,
    prev: Option<&AnnotationSet>,
    next: &QuerySpec,
    cm: &CostModel,
    opts: &PlanOptions,
    available: &dyn Fn((BagId, BagId), &str) -> bool,
) -> Result<SteinerPlan> {
    let next = bind_annotations(g, jt, next, &opts.bind)?;
    Ok(plan_bound(graph_id, g, jt, prev, next, cm, opts, available))
}

/// [`plan_with_reuse`] for an already bound (and checked) annotation set.
#[allow(clippy::too_many_arguments)]
pub fn plan_bound(
    graph_id: &str,
    g: &JoinGraph,
    jt: &JunctionHypertree,
    prev: Option<&AnnotationSet>,
    next: AnnotationSet,
    cm: &CostModel,
    opts: &PlanOptions,
    available: &dyn Fn((BagId, BagId), &str) -> bool,
) -> SteinerPlan {
    let (ann, b_delta, compensations) = match prev {
        Some(prev) => {
            let d = diff_bound(g, jt, prev, next);
            (d.annotations, d.b_delta, d.compensations)
        }
        None => (next, (0..jt.len()).collect(), vec![]),
    };
    let (ann, tree) = match prev {
        Some(prev) if !opts.no_shrink => shrink(g, jt, prev, ann, cm),
        _ => {
            let t = steiner_tree(jt, &b_delta);
            (ann, t)
        }
    };
    let b_delta = match prev {
        Some(prev) => differing_bags(jt, prev, &ann),
        None => b_delta,
    };
    let compensations = compensations
        .into_iter()
        .filter_map(|c| {
            let bag = ann.find_bag(|a| *a == c.annotation)?;
            Some(Placement { bag, annotation: c.annotation })
        })
        .collect();
    let fingerprints = Fingerprinter::new(graph_id, g, jt, &ann).all();
    let hit = |u: BagId, v: BagId| available((u, v), &fingerprints[&(u, v)]);
    // nothing changed: answer at a root whose inputs are all available
    let complete: BTreeSet<BagId> = if tree.is_empty() {
        (0..jt.len()).filter(|r| jt.upward_edges(*r).into_iter().all(|(u, v)| hit(u, v))).collect()
    } else {
        tree.clone()
    };
    let best = choose_root_with(g, jt, &ann, cm, Some(&complete), &hit);
    let root = best.root;
    let mut schedule = Vec::new();
    let mut reused = Vec::new();
    for (u, v) in jt.upward_edges(root) {
        if hit(u, v) {
            reused.push((u, v));
        } else {
            schedule.push((u, v));
        }
    }
    SteinerPlan {
        annotations: ann,
        b_delta,
        tree,
        root,
        schedule,
        reused,
        compensations,
        estimated_cost: best.total,
        fingerprints,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jointree::build_jt;
    use crate::predicate::{Literal, Predicate};
    use crate::relation::{Schema, Table};
    use crate::value::{attr, Value};

    fn rows(attrs: &[&str], n: usize, d: usize) -> Table {
        let data = (0..n)
            .map(|i| attrs.iter().enumerate().map(|(j, _)| Value::cat(&format!("v{}", (i + j) % d))).collect())
            .collect();
        Table::new(Schema::categorical(attrs), data).unwrap()
    }

    fn chain(sizes: &[usize]) -> JoinGraph {
        let mut g = JoinGraph::new();
        for (i, n) in sizes.iter().enumerate() {
            let a = format!("A{i}");
            let b = format!("A{}", i + 1);
            g.add_relation(&format!("R{i}"), rows(&[&a, &b], *n, 4)).unwrap();
        }
        g
    }

    fn bind(g: &JoinGraph, jt: &JunctionHypertree, q: &QuerySpec) -> AnnotationSet {
        bind_annotations(g, jt, q, &BindOptions::default()).unwrap()
    }

    #[test]
    fn root_cost_matches_hand_computation() {
        // R0(A0,A1) 10 rows - R1(A1,A2) 20 rows - R2(A2,A3) 1000 rows
        let g = chain(&[10, 20, 1000]);
        let jt = build_jt(&g).unwrap();
        let ann = bind(&g, &jt, &QuerySpec::count());
        let cm = CostModel::new(&g);
        // every bag has 2 attributes and g = 0: 𝓜 = (|U|+1)·2·|R_u|
        let by_hand = |root: usize| -> f64 {
            let sizes = [10.0, 20.0, 1000.0];
            let deg = [1.0, 2.0, 1.0];
            (0..3).map(|u| if u == root { (deg[u] + 1.0) * 2.0 * sizes[u] } else { deg[u] * 2.0 * sizes[u] }).sum()
        };
        for r in 0..3 {
            assert_eq!(root_cost(&g, &jt, &ann, &cm, r, &|_, _| false).total, by_hand(r));
        }
        // the formula charges the absorption at the root once more, so the
        // small end of the chain wins
        assert_eq!(choose_root(&g, &jt, &ann, &cm, None).root, 0);
        // argmin is invariant to uniform scaling
        assert_eq!(choose_root(&g, &jt, &ann, &cm.scaled(1000.0), None).root, 0);
        let single = chain(&[5]);
        let jt1 = build_jt(&single).unwrap();
        assert_eq!(choose_root(&single, &jt1, &bind(&single, &jt1, &QuerySpec::count()), &CostModel::new(&single), None).root, 0);
    }

    #[test]
    fn selectivity_defaults() {
        let g = chain(&[8, 8]);
        let jt = build_jt(&g).unwrap();
        let cm = CostModel::new(&g);
        let q = QuerySpec::count()
            .filter(Atom::eq("A0", Literal::str("v1")))
            .filter(Atom::cmp("A2", CmpOp::Lt, Literal::str("v3")));
        let ann = bind(&g, &jt, &q);
        let b0 = jt.mapped_bag("R0").unwrap();
        let b1 = jt.mapped_bag("R1").unwrap();
        assert!((cm.selectivity(&ann, b0) - 0.25).abs() < 1e-12);
        assert!((cm.selectivity(&ann, b1) - 1.0 / 3.0).abs() < 1e-12);
        let many = QuerySpec::count().filter(Predicate::new(
            (0..8).map(|_| Atom::eq("A0", Literal::str("v1"))).collect(),
        ));
        assert_eq!(cm.selectivity(&bind(&g, &jt, &many), b0), MIN_SELECTIVITY);
    }

    #[test]
    fn steiner_examples() {
        let g = chain(&[4, 4, 4, 4, 4]);
        let jt = build_jt(&g).unwrap();
        assert_eq!(steiner_tree(&jt, &BTreeSet::from([2])), BTreeSet::from([2]));
        assert_eq!(steiner_tree(&jt, &BTreeSet::from([0, 4])), (0..5).collect());
        assert_eq!(steiner_tree(&jt, &BTreeSet::from([1, 3])), BTreeSet::from([1, 2, 3]));
        assert!(steiner_tree(&jt, &BTreeSet::new()).is_empty());
    }

    #[test]
    fn diff_compensates_dropped_group_by() {
        let g = chain(&[4, 4, 4, 4]);
        let jt = build_jt(&g).unwrap();
        let prev = bind(&g, &jt, &QuerySpec::count().group_by(&["A0"]).filter(Atom::eq("A2", Literal::str("v1"))));
        let next = QuerySpec::count().group_by(&["A4"]).filter(Atom::eq("A3", Literal::str("v1")));
        let d = diff_annotations(&g, &jt, &prev, &next, &BindOptions::default()).unwrap();
        let b_a0 = prev.find_bag(|a| matches!(a, BagAnnotation::GroupBy { .. })).unwrap();
        assert_eq!(d.compensations, vec![Placement { bag: b_a0, annotation: BagAnnotation::Marginalize { attr: "A0".into() } }]);
        assert!(d.b_delta.contains(&b_a0));
        let old_sigma = prev.find_bag(|a| matches!(a, BagAnnotation::Select { .. })).unwrap();
        let new_sigma = d.annotations.find_bag(|a| matches!(a, BagAnnotation::Select { .. })).unwrap();
        assert!(d.b_delta.contains(&old_sigma) && d.b_delta.contains(&new_sigma));

        // identical query: nothing differs
        let same = diff_annotations(&g, &jt, &prev, &QuerySpec::count().group_by(&["A0"]).filter(Atom::eq("A2", Literal::str("v1"))), &BindOptions::default()).unwrap();
        assert!(same.b_delta.is_empty());

        // a new filter on a leaf bag only
        let base = bind(&g, &jt, &QuerySpec::count());
        let leaf = QuerySpec::count().filter(Atom::eq("A0", Literal::str("v1")));
        let d = diff_annotations(&g, &jt, &base, &leaf, &BindOptions::default()).unwrap();
        assert_eq!(d.b_delta, BTreeSet::from([jt.mapped_bag("R0").unwrap()]));
    }

    #[test]
    fn shrink_moves_compensation_inward() {
        // R0(A0,A1) - R1(A1,A2) - R2(A2,A3); γ_A1 was on R0, next filters R2
        let g = chain(&[50, 4, 4]);
        let jt = build_jt(&g).unwrap();
        let cm = CostModel::new(&g);
        let prev = AnnotationSet::new(
            Default::default(),
            BTreeSet::from([attr("A1")]),
            vec![Placement { bag: 0, annotation: BagAnnotation::GroupBy { attr: "A1".into() } }],
        );
        let next = QuerySpec::count().filter(Atom::eq("A3", Literal::str("v1")));
        let d = diff_annotations(&g, &jt, &prev, &next, &BindOptions::default()).unwrap();
        assert_eq!(steiner_tree(&jt, &d.b_delta).len(), 3);
        let (ann, tree) = shrink(&g, &jt, &prev, d.annotations, &cm);
        assert_eq!(tree, BTreeSet::from([1, 2]));
        assert_eq!(ann.canonical_on_bag(1), vec!["sum(A1)"]);
        assert_eq!(ann.canonical_on_bag(0), vec!["gamma(A1)"]);

        // nothing movable: a removed filter stays put
        let prev = bind(&g, &jt, &QuerySpec::count().filter(Atom::eq("A0", Literal::str("v1"))));
        let d = diff_annotations(&g, &jt, &prev, &QuerySpec::count(), &BindOptions::default()).unwrap();
        let (_, tree) = shrink(&g, &jt, &prev, d.annotations, &cm);
        assert_eq!(tree, BTreeSet::from([0]));
    }

    #[test]
    fn fingerprints_track_upstream_only() {
        let g = chain(&[4, 4, 4]);
        let jt = build_jt(&g).unwrap();
        let base = bind(&g, &jt, &QuerySpec::count());
        let up = bind(&g, &jt, &QuerySpec::count().filter(Atom::eq("A0", Literal::str("v1"))));
        let down = bind(&g, &jt, &QuerySpec::count().filter(Atom::eq("A3", Literal::str("v1"))));
        let f = |ann: &AnnotationSet, u, v| fingerprint("g", &g, &jt, ann, u, v);
        assert_ne!(f(&base, 1, 2), f(&up, 1, 2));
        assert_eq!(f(&base, 1, 2), f(&down, 1, 2));
        assert_eq!(f(&base, 0, 1), f(&base, 0, 1));
        assert_ne!(f(&base, 0, 1), fingerprint("other", &g, &jt, &base, 0, 1));
        let sum = bind(&g, &jt, &QuerySpec::count().with_aggregate(crate::semiring::SemiringSpec::Count).group_by(&["A0"]));
        assert_ne!(f(&base, 0, 1), f(&sum, 0, 1));
        assert_eq!(f(&base, 0, 1).len(), 32);
    }

    #[test]
    fn star_filter_reuses_fact_messages() {
        // fact F(K1,K2) with dimensions D1(K1,X), D2(K2,Y)
        let mut g = JoinGraph::new();
        g.add_relation("F", rows(&["K1", "K2"], 200, 5)).unwrap();
        g.add_relation("D1", rows(&["K1", "X"], 5, 5)).unwrap();
        g.add_relation("D2", rows(&["K2", "Y"], 5, 5)).unwrap();
        let jt = build_jt(&g).unwrap();
        let cm = CostModel::new(&g);
        let prev = bind(&g, &jt, &QuerySpec::count());
        let fps = Fingerprinter::new("g", &g, &jt, &prev).all();
        let avail = |e: (BagId, BagId), fp: &str| fps.get(&e).is_some_and(|x| x == fp);
        let next = QuerySpec::count().filter(Atom::eq("X", Literal::str("v1")));
        let plan = plan_with_reuse("g", &g, &jt, Some(&prev), &next, &cm, &PlanOptions::default(), &avail).unwrap();
        let d1 = jt.mapped_bag("D1").unwrap();
        assert_eq!(plan.tree, BTreeSet::from([d1]));
        assert_eq!(plan.root, d1);
        assert!(plan.schedule.is_empty());
        assert_eq!(plan.reused.len(), 2);

        // same query again: nothing to compute
        let plan = plan_with_reuse("g", &g, &jt, Some(&prev), &QuerySpec::count(), &cm, &PlanOptions::default(), &avail).unwrap();
        assert!(plan.b_delta.is_empty() && plan.schedule.is_empty());

        // no previous state: a full upward pass
        let plan = plan_with_reuse("g", &g, &jt, None, &next, &cm, &PlanOptions::default(), &|_, _| false).unwrap();
        assert_eq!(plan.schedule.len(), 2);
    }

    #[test]
    fn unchanged_query_stays_at_a_complete_root() {
        // only the messages into the expensive end are held
        let g = chain(&[10, 20, 1000]);
        let jt = build_jt(&g).unwrap();
        let cm = CostModel::new(&g);
        let ann = bind(&g, &jt, &QuerySpec::count());
        let fps = Fingerprinter::new("g", &g, &jt, &ann).all();
        let held: BTreeSet<(BagId, BagId)> = jt.upward_edges(2).into_iter().collect();
        let avail = |e: (BagId, BagId), fp: &str| held.contains(&e) && fps[&e] == fp;
        let plan = plan_with_reuse("g", &g, &jt, Some(&ann), &QuerySpec::count(), &cm, &PlanOptions::default(), &avail).unwrap();
        assert_eq!(plan.root, 2);
        assert!(plan.schedule.is_empty());
        // with nothing held the cheapest root wins as before
        let plan = plan_with_reuse("g", &g, &jt, Some(&ann), &QuerySpec::count(), &cm, &PlanOptions::default(), &|_, _| false).unwrap();
        assert_eq!(plan.root, 0);
    }
}
