//! Data cubes from pivot CJTs: every k-attribute group-by is calibrated with
//! all bag absorptions stored, and higher-arity cuboids are answered from the
//! pivot whose residual Steiner tree is smallest.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::jointree::{BagId, BindOptions, QuerySpec};
use crate::manager::{execute_plan, plan_against, Cjt, GraphEntry};
use crate::planner::{PlanOptions, SteinerPlan};
use crate::relation::{AnnotatedRelation, AttrType};
use crate::value::{attr, Attr};

pub struct Pivot {
    pub attrs: BTreeSet<Attr>,
    pub cjt: Cjt,
    /// Absorption of every bag, indexed by bag id.
    pub absorptions: Vec<Arc<AnnotatedRelation>>,
}

pub struct PivotSet {
    pub k: usize,
    pub universe: Vec<String>,
    pub base: QuerySpec,
    pub pivots: Vec<Pivot>,
    pub messages_computed: usize,
    pub materialized_rows: usize,
}

/// Categorical attributes of the graph, sorted.
pub fn default_universe(entry: &GraphEntry) -> Vec<String> {
    let mut out: BTreeSet<String> = BTreeSet::new();
    for r in entry.graph.relations() {
        for a in &r.schema.attributes {
            if a.ty == AttrType::Categorical {
                out.insert(a.name.clone());
            }
        }
    }
    out.into_iter().collect()
}

/// All `k`-subsets of `items` in lexicographic order.
pub fn subsets<T: Clone>(items: &[T], k: usize) -> Vec<Vec<T>> {
    fn rec<T: Clone>(items: &[T], k: usize, start: usize, cur: &mut Vec<T>, out: &mut Vec<Vec<T>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i].clone());
            rec(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if k <= items.len() {
        rec(items, k, 0, &mut Vec::new(), &mut out);
    }
    out
}

/// Calibrates `base` grouped by every `k`-subset of `universe` and stores
/// each bag's absorption. Fails once stored rows pass `row_budget`.
pub fn build_pivots(
    entry: &Arc<GraphEntry>,
    base: &QuerySpec,
    k: usize,
    universe: Option<&[String]>,
    row_budget: usize,
) -> Result<PivotSet> {
    let universe: Vec<String> = match universe {
        Some(u) => u.to_vec(),
        None => default_universe(entry),
    };
    for a in &universe {
        if entry.jt.bags_with(a).is_empty() {
            return Err(Error::UnknownAttribute(a.clone()));
        }
    }
    let mut pivots = Vec::new();
    let mut messages = 0;
    let mut rows = 0;
    for subset in subsets(&universe, k) {
        let mut q = base.clone();
        q.group_by = subset.clone();
        let cjt = Cjt::calibrated(entry, &q, &BindOptions::default())?;
        messages += cjt.store.read().unwrap().len();
        let exec = cjt.executor();
        let mut absorptions = Vec::with_capacity(entry.jt.len());
        {
            let store = cjt.store.read().unwrap();
            for b in 0..entry.jt.len() {
                let a = exec.absorption(b, &store)?;
                rows += a.len();
                if rows > row_budget {
                    return Err(Error::BudgetExceeded { rows, budget: row_budget });
                }
                absorptions.push(Arc::new(a));
            }
        }
        drop(exec);
        pivots.push(Pivot { attrs: subset.iter().map(|a| attr(a)).collect(), cjt, absorptions });
    }
    Ok(PivotSet { k, universe, base: base.clone(), pivots, messages_computed: messages, materialized_rows: rows })
}

#[derive(Debug, Clone, Serialize)]
pub struct CuboidStats {
    pub pivot: usize,
    pub steiner_bags: usize,
    pub messages_computed: usize,
    /// Answered by re-marginalizing a stored absorption.
    pub from_absorption: bool,
}

pub struct CuboidAnswer {
    pub relation: AnnotatedRelation,
    pub stats: CuboidStats,
    pub plan: SteinerPlan,
}

/// Answers the group-by over `attrs` from the pivot with the smallest
/// Steiner tree (then fewest scheduled messages, then lowest index). Pivots
/// whose attributes are a subset of `attrs` are preferred.
pub fn answer_cuboid(ps: &PivotSet, attrs: &[&str]) -> Result<CuboidAnswer> {
    let target: BTreeSet<Attr> = attrs.iter().map(|a| attr(a)).collect();
    let mut q = ps.base.clone();
    q.group_by = attrs.iter().map(|a| a.to_string()).collect();
    // a pivot grouped by a superset marginalizes down from any stored absorption
    if let Some(i) = ps.pivots.iter().position(|p| target.is_subset(&p.attrs)) {
        let pivot = &ps.pivots[i];
        let root = (0..pivot.absorptions.len()).min_by_key(|b| pivot.absorptions[*b].len()).unwrap_or(0);
        let plan = plan_against(&pivot.cjt, &q, &PlanOptions::default(), None)?;
        let relation = pivot.absorptions[root].project_onto(&target);
        let stats = CuboidStats { pivot: i, steiner_bags: 0, messages_computed: 0, from_absorption: true };
        return Ok(CuboidAnswer { relation, stats, plan });
    }
    let inside: Vec<usize> = (0..ps.pivots.len()).filter(|i| ps.pivots[*i].attrs.is_subset(&target)).collect();
    let candidates: Vec<usize> = if inside.is_empty() { (0..ps.pivots.len()).collect() } else { inside };
    let mut best: Option<(usize, SteinerPlan)> = None;
    for i in candidates {
        let plan = plan_against(&ps.pivots[i].cjt, &q, &PlanOptions::default(), None)?;
        let better = match &best {
            None => true,
            Some((_, p)) => (plan.tree.len(), plan.schedule.len()) < (p.tree.len(), p.schedule.len()),
        };
        if better {
            best = Some((i, plan));
        }
    }
    let (i, plan) = best.ok_or_else(|| Error::InvalidQuery("no pivots".into()))?;
    let pivot = &ps.pivots[i];
    let residual: BTreeSet<Attr> = target.difference(&pivot.attrs).cloned().collect();
    let direct: Option<BagId> = if plan.schedule.is_empty() && plan.tree.len() <= 1 && pivot.attrs.is_subset(&target) {
        let root = plan.root;
        residual.is_subset(&pivot.cjt.jt.bags()[root].attrs).then_some(root)
    } else {
        None
    };
    if let Some(root) = direct {
        let relation = pivot.absorptions[root].project_onto(&target);
        let stats = CuboidStats { pivot: i, steiner_bags: plan.tree.len(), messages_computed: 0, from_absorption: true };
        return Ok(CuboidAnswer { relation, stats, plan });
    }
    let d = execute_plan(&pivot.cjt, &plan, &q, None)?;
    let stats = CuboidStats { pivot: i, steiner_bags: plan.tree.len(), messages_computed: d.computed, from_absorption: false };
    Ok(CuboidAnswer { relation: d.answer, stats, plan })
}

pub struct Cube {
    pub pivots: PivotSet,
    pub cuboids: BTreeMap<Vec<String>, AnnotatedRelation>,
    pub stats: BTreeMap<Vec<String>, CuboidStats>,
}

impl Cube {
    pub fn cuboid_messages(&self) -> usize {
        self.stats.values().map(|s| s.messages_computed).sum()
    }
}

/// Every cuboid of arity ≤ `h`, answered from pivots of arity `h − 1`.
pub fn build_cube(entry: &Arc<GraphEntry>, base: &QuerySpec, h: usize, universe: Option<&[String]>, row_budget: usize) -> Result<Cube> {
    if h < 1 {
        return Err(Error::InvalidParameter("cube arity must be at least 1".into()));
    }
    let pivots = build_pivots(entry, base, h - 1, universe, row_budget)?;
    let mut cuboids = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for arity in 0..=h {
        for subset in subsets(&pivots.universe, arity) {
            let names: Vec<&str> = subset.iter().map(String::as_str).collect();
            let ans = answer_cuboid(&pivots, &names)?;
            cuboids.insert(subset.clone(), ans.relation);
            stats.insert(subset, ans.stats);
        }
    }
    Ok(Cube { pivots, cuboids, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::oracle_execute;
    use crate::synth::{gen_chain, ChainParams};

    fn chain_entry(r: usize, f: usize, d: usize) -> Arc<GraphEntry> {
        Arc::new(GraphEntry::new(gen_chain(ChainParams::new(r, f, d), 11).unwrap()).unwrap())
    }

    #[test]
    fn subset_enumeration() {
        assert_eq!(subsets(&[1, 2, 3, 4], 0), vec![Vec::<i32>::new()]);
        assert_eq!(subsets(&[1, 2, 3, 4], 1).len(), 4);
        assert_eq!(subsets(&[1, 2, 3, 4], 2).len(), 6);
        assert!(subsets(&[1], 2).is_empty());
    }

    #[test]
    fn pivot_counts() {
        let e = chain_entry(3, 2, 3);
        let m = default_universe(&e).len();
        assert_eq!(m, 4);
        let p0 = build_pivots(&e, &QuerySpec::count(), 0, None, 1 << 20).unwrap();
        assert_eq!(p0.pivots.len(), 1);
        let p1 = build_pivots(&e, &QuerySpec::count(), 1, None, 1 << 20).unwrap();
        assert_eq!(p1.pivots.len(), 4);
        assert_eq!(p1.messages_computed, 4 * 2 * (e.jt.len() - 1));
        let stored: usize = p1.pivots.iter().flat_map(|p| p.absorptions.iter()).map(|a| a.len()).sum();
        assert_eq!(p1.materialized_rows, stored);
        assert!(matches!(build_pivots(&e, &QuerySpec::count(), 1, None, 3), Err(Error::BudgetExceeded { .. })));
    }

    #[test]
    fn cuboids_match_brute_force() {
        let e = chain_entry(4, 2, 3);
        let cube = build_cube(&e, &QuerySpec::count(), 2, None, 1 << 22).unwrap();
        assert_eq!(cube.cuboids.len(), 1 + 5 + 10);
        for (attrs, rel) in &cube.cuboids {
            let names: Vec<&str> = attrs.iter().map(String::as_str).collect();
            let oracle = oracle_execute(&e.graph, &QuerySpec::count().group_by(&names), 1 << 22).unwrap();
            assert_eq!(*rel, oracle, "cuboid {attrs:?}");
        }
        // a pair inside one relation is read off an absorption
        let s = &cube.stats[&vec!["A1".to_string(), "A2".to_string()]];
        assert!(s.from_absorption);
        assert_eq!(s.messages_computed, 0);
        // h = k: exact pivot
        let s = &cube.stats[&vec!["A3".to_string()]];
        assert!(s.from_absorption);
    }

    #[test]
    fn smaller_targets_marginalize_a_covering_pivot() {
        let e = chain_entry(4, 2, 3);
        let ps = build_pivots(&e, &QuerySpec::count(), 2, None, 1 << 22).unwrap();
        for t in [vec![], vec!["A2"], vec!["A1", "A5"]] {
            let ans = answer_cuboid(&ps, &t).unwrap();
            assert!(ans.stats.from_absorption);
            assert_eq!(ans.stats.messages_computed, 0);
            assert_eq!(ans.relation, oracle_execute(&e.graph, &QuerySpec::count().group_by(&t), 1 << 22).unwrap(), "{t:?}");
        }
    }

    #[test]
    fn shared_key_cube_enumeration() {
        let entry = Arc::new(GraphEntry::new(crate::synth::shared_key_graph()).unwrap());
        let cube = build_cube(&entry, &QuerySpec::count(), 1, None, 1 << 20).unwrap();
        let keys: Vec<Vec<String>> = cube.cuboids.keys().cloned().collect();
        let expect: Vec<Vec<String>> =
            vec![vec![], vec!["A".into()], vec!["B".into()], vec!["C".into()], vec!["D".into()]];
        assert_eq!(keys, expect);
    }

    #[test]
    fn more_pivot_attributes_never_cost_more() {
        use rand::seq::IndexedRandom;
        let e = chain_entry(5, 2, 3);
        let universe = default_universe(&e);
        let sets: Vec<Vec<PivotSet>> = vec![(0..=3).map(|k| build_pivots(&e, &QuerySpec::count(), k, None, 1 << 24).unwrap()).collect()];
        let mut rng = crate::synth::rng(4);
        for _ in 0..25 {
            let mut attrs: Vec<&str> = universe.choose_multiple(&mut rng, 3).map(String::as_str).collect();
            attrs.sort();
            let mut last = usize::MAX;
            for ps in &sets[0] {
                let ans = answer_cuboid(ps, &attrs).unwrap();
                assert!(ans.stats.messages_computed <= last, "{attrs:?} k={}", ps.k);
                last = ans.stats.messages_computed;
            }
        }
    }
}
