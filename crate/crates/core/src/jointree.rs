//! Join graphs, junction hypertrees and the bag annotations of a query.
//!
//! A [`JoinGraph`] holds the raw base tables (with versions). Joins are natural
//! joins: attributes with equal names are join keys. [`build_jt`] turns an
//! acyclic graph into a [`JunctionHypertree`] with one bag per relation;
//! [`bind_annotations`] places a [`QuerySpec`]'s group-bys, filters,
//! exclusions and version updates onto bags.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::predicate::Predicate;
use crate::relation::{AnnotatedRelation, CsvOptions, Schema, Table};
use crate::semiring::SemiringSpec;
use crate::value::{attr, Attr};

pub type BagId = usize;

pub const DEFAULT_VERSION: &str = "v1";

#[derive(Debug, Clone)]
pub struct BaseRelation {
    pub name: String,
    pub schema: Schema,
    pub versions: BTreeMap<String, Arc<Table>>,
    pub default_version: String,
}

impl BaseRelation {
    pub fn attrs(&self) -> BTreeSet<Attr> {
        self.schema.names().map(attr).collect()
    }

    pub fn table(&self, version: &str) -> Result<&Arc<Table>> {
        self.versions.get(version).ok_or_else(|| Error::UnknownVersion {
            relation: self.name.clone(),
            version: version.to_string(),
        })
    }
}

/// Optional structure declared next to the relations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    /// Explicit tree edges between relation bags, replacing the spanning tree.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<(String, String)>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_bags: Vec<EmptyBagDecl>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmptyBagDecl {
    pub attrs: Vec<String>,
    /// Relation names whose bags the new bag is spliced between.
    pub neighbors: Vec<String>,
}

type AnnotatedKey = (String, String, SemiringSpec);

/// Named base relations joined on equally named attributes.
#[derive(Debug, Default)]
pub struct JoinGraph {
    relations: BTreeMap<String, BaseRelation>,
    pub layout: Layout,
    annotated: Mutex<HashMap<AnnotatedKey, Arc<AnnotatedRelation>>>,
}

impl Clone for JoinGraph {
    fn clone(&self) -> JoinGraph {
        JoinGraph { relations: self.relations.clone(), layout: self.layout.clone(), annotated: Mutex::default() }
    }
}

impl JoinGraph {
    pub fn new() -> JoinGraph {
        JoinGraph::default()
    }

    pub fn add_relation(&mut self, name: &str, table: Table) -> Result<()> {
        self.add_version(name, DEFAULT_VERSION, table)
    }

    /// Adds a version of a relation. The first version added becomes the
    /// default; all versions must share one schema.
    pub fn add_version(&mut self, name: &str, version: &str, table: Table) -> Result<()> {
        match self.relations.get_mut(name) {
            Some(rel) => {
                let same = rel.schema.names().eq(table.schema.names());
                if !same {
                    return Err(Error::InvalidSchema(format!(
                        "version `{version}` of `{name}` has a different schema"
                    )));
                }
                rel.versions.insert(version.to_string(), Arc::new(table));
            }
            None => {
                let mut versions = BTreeMap::new();
                let schema = table.schema.clone();
                versions.insert(version.to_string(), Arc::new(table));
                self.relations.insert(
                    name.to_string(),
                    BaseRelation {
                        name: name.to_string(),
                        schema,
                        versions,
                        default_version: version.to_string(),
                    },
                );
            }
        }
        self.annotated.lock().unwrap().retain(|k, _| k.0 != name);
        Ok(())
    }

    pub fn relation(&self, name: &str) -> Result<&BaseRelation> {
        self.relations.get(name).ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn relations(&self) -> impl Iterator<Item = &BaseRelation> {
        self.relations.values()
    }

    pub fn relation_names(&self) -> Vec<String> {
        self.relations.keys().cloned().collect()
    }

    pub fn schemas(&self) -> Vec<(String, BTreeSet<Attr>)> {
        self.relations.values().map(|r| (r.name.clone(), r.attrs())).collect()
    }

    pub fn attributes(&self) -> BTreeSet<Attr> {
        self.relations.values().flat_map(|r| r.attrs()).collect()
    }

    /// Relations whose schema contains `a`.
    pub fn providers(&self, a: &str) -> Vec<&str> {
        self.relations
            .values()
            .filter(|r| r.schema.position(a).is_some())
            .map(|r| r.name.as_str())
            .collect()
    }

    /// Observed number of distinct values per attribute over all versions.
    pub fn domain_sizes(&self) -> BTreeMap<Attr, usize> {
        let mut seen: BTreeMap<Attr, BTreeSet<crate::value::Value>> = BTreeMap::new();
        for rel in self.relations.values() {
            for table in rel.versions.values() {
                for (i, def) in table.schema.attributes.iter().enumerate() {
                    let set = seen.entry(attr(&def.name)).or_default();
                    set.extend(table.rows.iter().map(|r| r[i]));
                }
            }
        }
        seen.into_iter().map(|(k, v)| (k, v.len().max(1))).collect()
    }

    /// Content digest over relation names, versions and rows.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for rel in self.relations.values() {
            h.update(rel.name.as_bytes());
            h.update([0]);
            for (ver, table) in &rel.versions {
                h.update(ver.as_bytes());
                h.update([1]);
                for name in table.schema.names() {
                    h.update(name.as_bytes());
                    h.update([2]);
                }
                for row in &table.rows {
                    for v in row.iter() {
                        h.update(v.to_string().as_bytes());
                        h.update([if v.is_numeric() { 3 } else { 4 }]);
                    }
                }
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    /// The relation lifted under `spec`; cached per (relation, version, spec).
    ///
    /// Lift attributes present in the relation are consumed by the lift.
    pub fn annotated(&self, name: &str, version: &str, spec: &SemiringSpec) -> Result<Arc<AnnotatedRelation>> {
        let key = (name.to_string(), version.to_string(), spec.clone());
        if let Some(r) = self.annotated.lock().unwrap().get(&key) {
            return Ok(r.clone());
        }
        let rel = self.relation(name)?;
        let table = rel.table(version)?;
        let annotated = Arc::new(table.annotate(spec, &|a| rel.schema.position(a).is_some(), false)?);
        self.annotated.lock().unwrap().insert(key, annotated.clone());
        Ok(annotated)
    }

    /// Like [`JoinGraph::annotated`] but filters raw rows before the lift, so
    /// predicates may reference lift attributes. Not cached.
    pub fn annotated_filtered(
        &self,
        name: &str,
        version: &str,
        spec: &SemiringSpec,
        preds: &[&Predicate],
    ) -> Result<AnnotatedRelation> {
        let rel = self.relation(name)?;
        let table = rel.table(version)?;
        let cols: Vec<Attr> = rel.schema.names().map(attr).collect();
        let compiled = preds.iter().map(|p| p.compile(&cols)).collect::<Result<Vec<_>>>()?;
        let mut rows = Vec::new();
        for row in &table.rows {
            let mut keep = true;
            for c in &compiled {
                if !c.eval(row)? {
                    keep = false;
                    break;
                }
            }
            if keep {
                rows.push(row.clone());
            }
        }
        let filtered = Table { schema: table.schema.clone(), rows };
        filtered.annotate(spec, &|a| rel.schema.position(a).is_some(), false)
    }

    /// Loads a graph document: relations with CSV paths and schemas, plus an
    /// optional layout. Relative paths resolve against the document's folder.
    pub fn load(path: &Path) -> Result<JoinGraph> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let doc: GraphDoc = serde_json::from_str(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        JoinGraph::from_doc(&doc, &base)
    }

    pub fn from_doc(doc: &GraphDoc, base: &Path) -> Result<JoinGraph> {
        let resolve = |p: &str| -> PathBuf {
            let p = PathBuf::from(p);
            if p.is_absolute() {
                p
            } else {
                base.join(p)
            }
        };
        let mut g = JoinGraph::new();
        for rel in &doc.relations {
            let schema = match &rel.schema {
                SchemaRef::Inline(s) => {
                    s.validate()?;
                    s.clone()
                }
                SchemaRef::Path(p) => Schema::from_json_file(&resolve(p))?,
            };
            let opts = CsvOptions {
                delimiter: rel.delimiter.map(|c| c as u8).unwrap_or(b','),
            };
            let load = |csv: &str, rows: &Option<Vec<Vec<serde_json::Value>>>, what: &str| -> Result<Table> {
                match (rows, csv.is_empty()) {
                    (Some(rows), _) => Table::from_json_rows(schema.clone(), rows),
                    (None, false) => Table::load_csv(&resolve(csv), &schema, &opts),
                    (None, true) => Err(Error::InvalidSchema(format!("{what} needs `csv` or `rows`"))),
                }
            };
            let version = rel.version.clone().unwrap_or_else(|| DEFAULT_VERSION.to_string());
            g.add_version(&rel.name, &version, load(&rel.csv, &rel.rows, &rel.name)?)?;
            for extra in &rel.versions {
                let what = format!("{} version {}", rel.name, extra.version);
                g.add_version(&rel.name, &extra.version, load(&extra.csv, &extra.rows, &what)?)?;
            }
        }
        g.layout = doc.layout.clone();
        Ok(g)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphDoc {
    pub relations: Vec<RelationDoc>,
    #[serde(flatten)]
    pub layout: Layout,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelationDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub csv: String,
    /// Inline data instead of a CSV file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<serde_json::Value>>>,
    pub schema: SchemaRef,
    #[serde(default)]
    pub version: Option<String>,
    #[serde(default)]
    pub delimiter: Option<char>,
    #[serde(default)]
    pub versions: Vec<VersionDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionDoc {
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub csv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rows: Option<Vec<Vec<serde_json::Value>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaRef {
    Path(String),
    Inline(Schema),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct GyoResult {
    pub acyclic: bool,
    pub elimination_order: Vec<Attr>,
    /// Relations left when the reduction got stuck (empty when acyclic).
    pub remaining: Vec<String>,
}

/// GYO reduction: alternately eliminate attributes that occur in a single
/// relation and drop relations contained in another, until nothing changes.
pub fn gyo_check(schemas: &[(String, BTreeSet<Attr>)]) -> GyoResult {
    let mut live: Vec<(String, BTreeSet<Attr>)> = schemas.to_vec();
    let mut order = Vec::new();
    loop {
        let mut changed = false;
        let mut counts: BTreeMap<Attr, usize> = BTreeMap::new();
        for (_, s) in &live {
            for a in s {
                *counts.entry(a.clone()).or_default() += 1;
            }
        }
        let lonely: Vec<Attr> = counts.into_iter().filter(|(_, c)| *c == 1).map(|(a, _)| a).collect();
        if !lonely.is_empty() {
            for (_, s) in live.iter_mut() {
                s.retain(|a| !lonely.contains(a));
            }
            order.extend(lonely);
            changed = true;
        }
        // absorb a relation into another that contains it; empty ones go too
        let mut i = 0;
        while i < live.len() {
            let contained = live[i].1.is_empty() && live.len() > 1
                || (0..live.len()).any(|j| j != i && live[i].1.is_subset(&live[j].1));
            if contained {
                live.remove(i);
                changed = true;
            } else {
                i += 1;
            }
        }
        if !changed {
            break;
        }
    }
    let acyclic = live.iter().all(|(_, s)| s.is_empty());
    GyoResult {
        acyclic,
        elimination_order: order,
        remaining: if acyclic { vec![] } else { live.into_iter().map(|(n, _)| n).collect() },
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Bag {
    pub id: BagId,
    pub attrs: BTreeSet<Attr>,
    /// Base relations mapped to this bag. Empty for an empty bag.
    pub relations: Vec<String>,
}

impl Bag {
    pub fn is_empty_bag(&self) -> bool {
        self.relations.is_empty()
    }

    pub fn label(&self) -> String {
        self.attrs.iter().map(|a| &**a).collect::<Vec<_>>().join(",")
    }
}

/// Tree of bags. Bag ids are indices and stay stable under edits that add bags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct JunctionHypertree {
    bags: Vec<Bag>,
    adj: Vec<BTreeSet<BagId>>,
    mapping: BTreeMap<String, BagId>,
    relation_attrs: BTreeMap<String, BTreeSet<Attr>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    NotATree,
    VertexCoverage,
    RunningIntersection,
    EdgeCoverage,
    Mapping,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    /// The attribute, relation or edge that witnesses the violation.
    pub witness: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}: {}", self.kind, self.witness)
    }
}

impl JunctionHypertree {
    /// Assembles a hypertree without validating it.
    pub fn from_parts(
        bags: Vec<(BTreeSet<Attr>, Vec<String>)>,
        edges: &[(BagId, BagId)],
        relation_attrs: BTreeMap<String, BTreeSet<Attr>>,
    ) -> JunctionHypertree {
        let mut mapping = BTreeMap::new();
        let bags: Vec<Bag> = bags
            .into_iter()
            .enumerate()
            .map(|(id, (attrs, relations))| {
                for r in &relations {
                    mapping.insert(r.clone(), id);
                }
                Bag { id, attrs, relations }
            })
            .collect();
        let mut adj = vec![BTreeSet::new(); bags.len()];
        for &(a, b) in edges {
            adj[a].insert(b);
            adj[b].insert(a);
        }
        JunctionHypertree { bags, adj, mapping, relation_attrs }
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn bag(&self, id: BagId) -> Result<&Bag> {
        self.bags.get(id).ok_or(Error::UnknownBag(id))
    }

    pub fn neighbors(&self, id: BagId) -> impl Iterator<Item = BagId> + '_ {
        self.adj[id].iter().copied()
    }

    pub fn degree(&self, id: BagId) -> usize {
        self.adj[id].len()
    }

    pub fn is_leaf(&self, id: BagId) -> bool {
        self.adj[id].len() <= 1
    }

    pub fn adjacent(&self, a: BagId, b: BagId) -> bool {
        self.adj.get(a).is_some_and(|s| s.contains(&b))
    }

    /// Undirected edges as `(low, high)` pairs in ascending order.
    pub fn edges(&self) -> Vec<(BagId, BagId)> {
        let mut out = Vec::new();
        for (a, ns) in self.adj.iter().enumerate() {
            for &b in ns {
                if a < b {
                    out.push((a, b));
                }
            }
        }
        out
    }

    pub fn mapped_bag(&self, relation: &str) -> Result<BagId> {
        self.mapping.get(relation).copied().ok_or_else(|| Error::UnknownRelation(relation.to_string()))
    }

    pub fn relation_attrs(&self) -> &BTreeMap<String, BTreeSet<Attr>> {
        &self.relation_attrs
    }

    pub fn shared(&self, a: BagId, b: BagId) -> BTreeSet<Attr> {
        self.bags[a].attrs.intersection(&self.bags[b].attrs).cloned().collect()
    }

    /// Bags holding `a`.
    pub fn bags_with(&self, a: &str) -> Vec<BagId> {
        self.bags.iter().filter(|b| b.attrs.iter().any(|x| &**x == a)).map(|b| b.id).collect()
    }

    /// Bags on `u`'s side of the edge `u–v`, `u` first, breadth-first.
    pub fn side(&self, u: BagId, v: BagId) -> Vec<BagId> {
        let mut out = vec![u];
        let mut queue = VecDeque::from([(u, v)]);
        while let Some((x, parent)) = queue.pop_front() {
            for y in self.neighbors(x) {
                if y != parent {
                    out.push(y);
                    queue.push_back((y, x));
                }
            }
        }
        out
    }

    /// Parent of every bag when the tree hangs from `root` (root maps to itself).
    pub fn parents(&self, root: BagId) -> Vec<BagId> {
        let mut parent = vec![usize::MAX; self.bags.len()];
        parent[root] = root;
        let mut queue = VecDeque::from([root]);
        while let Some(x) = queue.pop_front() {
            for y in self.neighbors(x) {
                if parent[y] == usize::MAX {
                    parent[y] = x;
                    queue.push_back(y);
                }
            }
        }
        parent
    }

    /// Directed edges toward `root`, each listed after all edges feeding it.
    pub fn upward_edges(&self, root: BagId) -> Vec<(BagId, BagId)> {
        let parent = self.parents(root);
        let mut order = Vec::with_capacity(self.bags.len());
        let mut stack = vec![(root, false)];
        // iterative post-order with children in ascending id order
        while let Some((x, done)) = stack.pop() {
            if done {
                if x != root {
                    order.push((x, parent[x]));
                }
                continue;
            }
            stack.push((x, true));
            let children: Vec<BagId> = self.neighbors(x).filter(|y| parent[*y] == x && *y != x).collect();
            for c in children.into_iter().rev() {
                stack.push((c, false));
            }
        }
        order
    }

    /// Directed edges away from `root`, parents before children.
    pub fn downward_edges(&self, root: BagId) -> Vec<(BagId, BagId)> {
        let mut out: Vec<(BagId, BagId)> = self.upward_edges(root).into_iter().map(|(c, p)| (p, c)).collect();
        out.reverse();
        out
    }

    /// Bags on the path from `a` to `b`, both included.
    pub fn path(&self, a: BagId, b: BagId) -> Vec<BagId> {
        let parent = self.parents(b);
        let mut out = vec![a];
        let mut x = a;
        while x != b {
            x = parent[x];
            out.push(x);
        }
        out
    }

    pub fn validate(&self) -> std::result::Result<(), Violation> {
        let n = self.bags.len();
        let edge_count: usize = self.adj.iter().map(BTreeSet::len).sum::<usize>() / 2;
        let violation = |kind, witness: String| Err(Violation { kind, witness });
        if n == 0 {
            return violation(ViolationKind::NotATree, "no bags".into());
        }
        if edge_count != n - 1 {
            return violation(ViolationKind::NotATree, format!("{edge_count} edges for {n} bags"));
        }
        let parent = self.parents(0);
        if let Some(orphan) = parent.iter().position(|p| *p == usize::MAX) {
            return violation(ViolationKind::NotATree, format!("bag {orphan} is unreachable"));
        }
        let rel_attrs: BTreeSet<Attr> = self.relation_attrs.values().flatten().cloned().collect();
        let bag_attrs: BTreeSet<Attr> = self.bags.iter().flat_map(|b| b.attrs.iter().cloned()).collect();
        if let Some(a) = rel_attrs.symmetric_difference(&bag_attrs).next() {
            return violation(ViolationKind::VertexCoverage, a.to_string());
        }
        for a in &bag_attrs {
            let holders = self.bags_with(a);
            // a connected induced subgraph on a tree has |holders| - 1 edges
            let inner = holders
                .iter()
                .map(|h| self.adj[*h].iter().filter(|x| holders.contains(x)).count())
                .sum::<usize>()
                / 2;
            if inner + 1 != holders.len() {
                return violation(ViolationKind::RunningIntersection, a.to_string());
            }
        }
        for (rel, attrs) in &self.relation_attrs {
            let Some(&b) = self.mapping.get(rel) else {
                return violation(ViolationKind::Mapping, rel.clone());
            };
            if !self.bags[b].relations.contains(rel) {
                return violation(ViolationKind::Mapping, rel.clone());
            }
            if !attrs.is_subset(&self.bags[b].attrs) {
                return violation(ViolationKind::EdgeCoverage, rel.clone());
            }
        }
        for b in &self.bags {
            for r in &b.relations {
                if self.mapping.get(r) != Some(&b.id) {
                    return violation(ViolationKind::Mapping, r.clone());
                }
            }
        }
        Ok(())
    }

    /// Splices a new empty bag over `attrs` between `neighbors`. Tree edges
    /// among the neighbors are replaced by edges to the new bag.
    pub fn add_empty_bag(&self, attrs: &BTreeSet<Attr>, neighbors: &[BagId]) -> Result<(JunctionHypertree, BagId)> {
        if neighbors.is_empty() {
            return Err(Error::InvalidJoinTree("an empty bag needs at least one neighbor".into()));
        }
        let mut union = BTreeSet::new();
        for &n in neighbors {
            union.extend(self.bag(n)?.attrs.iter().cloned());
        }
        if let Some(a) = attrs.difference(&union).next() {
            return Err(Error::InvalidJoinTree(format!("attribute `{a}` is in no neighbor bag")));
        }
        let mut next = self.clone();
        let id = next.bags.len();
        next.bags.push(Bag { id, attrs: attrs.clone(), relations: vec![] });
        next.adj.push(BTreeSet::new());
        for &a in neighbors {
            for &b in neighbors {
                if a < b && next.adj[a].contains(&b) {
                    next.adj[a].remove(&b);
                    next.adj[b].remove(&a);
                }
            }
        }
        for &n in neighbors {
            next.adj[n].insert(id);
            next.adj[id].insert(n);
        }
        next.validate().map_err(|v| Error::InvalidJoinTree(v.to_string()))?;
        Ok((next, id))
    }

    /// Adds a new leaf bag for a relation that is not part of the graph yet.
    pub fn attach_leaf(&self, relation: &str, attrs: BTreeSet<Attr>, to: BagId) -> Result<(JunctionHypertree, BagId)> {
        self.bag(to)?;
        if self.mapping.contains_key(relation) {
            return Err(Error::Conflict(format!("relation `{relation}` already exists")));
        }
        let mut next = self.clone();
        let id = next.bags.len();
        next.bags.push(Bag { id, attrs: attrs.clone(), relations: vec![relation.to_string()] });
        next.adj.push(BTreeSet::from([to]));
        next.adj[to].insert(id);
        next.mapping.insert(relation.to_string(), id);
        next.relation_attrs.insert(relation.to_string(), attrs);
        Ok((next, id))
    }
}

/// Builds a hypertree with one bag per relation. Tree edges come from the
/// graph layout if given, otherwise from a maximum spanning tree over
/// shared-attribute counts (ties broken by bag ids). Declared empty bags are
/// spliced in afterwards.
pub fn build_jt(g: &JoinGraph) -> Result<JunctionHypertree> {
    let schemas = g.schemas();
    if schemas.is_empty() {
        return Err(Error::InvalidJoinTree("join graph has no relations".into()));
    }
    let gyo = gyo_check(&schemas);
    if !gyo.acyclic {
        return Err(Error::CyclicGraph { remaining: gyo.remaining });
    }
    let n = schemas.len();
    let index: BTreeMap<&str, usize> = schemas.iter().enumerate().map(|(i, (n, _))| (n.as_str(), i)).collect();
    let edges: Vec<(BagId, BagId)> = if g.layout.edges.is_empty() {
        let mut candidates = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let w = schemas[i].1.intersection(&schemas[j].1).count();
                if w > 0 {
                    candidates.push((w, i, j));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut comp: Vec<usize> = (0..n).collect();
        fn find(c: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while c[r] != r {
                r = c[r];
            }
            c[x] = r;
            r
        }
        let mut chosen = Vec::new();
        for (_, i, j) in candidates {
            let (a, b) = (find(&mut comp, i), find(&mut comp, j));
            if a != b {
                comp[a] = b;
                chosen.push((i, j));
            }
        }
        if chosen.len() + 1 != n {
            let root = find(&mut comp, 0);
            let apart: Vec<&str> =
                (0..n).filter(|i| find(&mut comp, *i) != root).map(|i| schemas[i].0.as_str()).collect();
            return Err(Error::DisconnectedGraph(format!("not connected to `{}`: {apart:?}", schemas[0].0)));
        }
        chosen
    } else {
        let mut out = Vec::new();
        for (a, b) in &g.layout.edges {
            let ia = *index.get(a.as_str()).ok_or_else(|| Error::UnknownRelation(a.clone()))?;
            let ib = *index.get(b.as_str()).ok_or_else(|| Error::UnknownRelation(b.clone()))?;
            out.push((ia, ib));
        }
        out
    };
    let relation_attrs: BTreeMap<String, BTreeSet<Attr>> = schemas.iter().cloned().collect();
    let bags = schemas.iter().map(|(name, attrs)| (attrs.clone(), vec![name.clone()])).collect();
    let mut jt = JunctionHypertree::from_parts(bags, &edges, relation_attrs);
    jt.validate().map_err(|v| Error::InvalidJoinTree(v.to_string()))?;
    for decl in &g.layout.empty_bags {
        let attrs: BTreeSet<Attr> = decl.attrs.iter().map(|a| attr(a)).collect();
        let neighbors = decl.neighbors.iter().map(|r| jt.mapped_bag(r)).collect::<Result<Vec<_>>>()?;
        jt = jt.add_empty_bag(&attrs, &neighbors)?.0;
    }
    Ok(jt)
}

/// An aggregate query over the join graph.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QuerySpec {
    #[serde(default)]
    pub aggregate: SemiringSpec,
    #[serde(default)]
    pub group_by: Vec<String>,
    /// Each entry becomes one selection annotation on one bag.
    #[serde(default)]
    pub filters: Vec<Predicate>,
    #[serde(default)]
    pub exclude: Vec<String>,
    /// relation → version
    #[serde(default)]
    pub updates: BTreeMap<String, String>,
}

impl QuerySpec {
    pub fn count() -> QuerySpec {
        QuerySpec::default()
    }

    pub fn with_aggregate(mut self, spec: SemiringSpec) -> QuerySpec {
        self.aggregate = spec;
        self
    }

    pub fn group_by(mut self, attrs: &[&str]) -> QuerySpec {
        self.group_by = attrs.iter().map(|a| a.to_string()).collect();
        self
    }

    pub fn filter(mut self, p: impl Into<Predicate>) -> QuerySpec {
        self.filters.push(p.into());
        self
    }

    pub fn exclude(mut self, relation: &str) -> QuerySpec {
        self.exclude.push(relation.to_string());
        self
    }

    pub fn update(mut self, relation: &str, version: &str) -> QuerySpec {
        self.updates.insert(relation.to_string(), version.to_string());
        self
    }

    pub fn group_set(&self) -> BTreeSet<Attr> {
        self.group_by.iter().map(|a| attr(a)).collect()
    }
}

/// One annotation placed on a bag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BagAnnotation {
    /// γ: keep the attribute in every message downstream of the bag.
    GroupBy { attr: String },
    /// Σ: cancel an inherited γ from this bag on.
    Marginalize { attr: String },
    /// σ
    Select { predicate: Predicate },
    Exclude { relation: String },
    Update { relation: String, version: String },
}

impl BagAnnotation {
    pub fn canonical(&self) -> String {
        match self {
            BagAnnotation::GroupBy { attr } => format!("gamma({attr})"),
            BagAnnotation::Marginalize { attr } => format!("sum({attr})"),
            BagAnnotation::Select { predicate } => format!("sigma({})", predicate.canonical()),
            BagAnnotation::Exclude { relation } => format!("exclude({relation})"),
            BagAnnotation::Update { relation, version } => format!("update({relation}@{version})"),
        }
    }

    /// σ, γ and Σ may be moved to other bags holding their attributes.
    pub fn is_movable(&self) -> bool {
        matches!(
            self,
            BagAnnotation::GroupBy { .. } | BagAnnotation::Marginalize { .. } | BagAnnotation::Select { .. }
        )
    }

    pub fn attrs(&self) -> BTreeSet<Attr> {
        match self {
            BagAnnotation::GroupBy { attr: a } | BagAnnotation::Marginalize { attr: a } => BTreeSet::from([attr(a)]),
            BagAnnotation::Select { predicate } => predicate.attrs().into_iter().map(attr).collect(),
            _ => BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    pub bag: BagId,
    pub annotation: BagAnnotation,
}

/// Bound annotations of one query: placements plus the output group-by set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSet {
    pub aggregate: SemiringSpec,
    pub group_by: BTreeSet<Attr>,
    placements: Vec<Placement>,
}

impl AnnotationSet {
    pub fn new(aggregate: SemiringSpec, group_by: BTreeSet<Attr>, placements: Vec<Placement>) -> AnnotationSet {
        let mut s = AnnotationSet { aggregate, group_by, placements };
        s.normalize();
        s
    }

    fn normalize(&mut self) {
        self.placements.sort_by_cached_key(|p| (p.bag, p.annotation.canonical()));
        self.placements.dedup();
    }

    pub fn placements(&self) -> &[Placement] {
        &self.placements
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty() && self.group_by.is_empty()
    }

    pub fn on_bag(&self, bag: BagId) -> impl Iterator<Item = &BagAnnotation> {
        self.placements.iter().filter(move |p| p.bag == bag).map(|p| &p.annotation)
    }

    /// Sorted canonical forms of the bag's annotations.
    pub fn canonical_on_bag(&self, bag: BagId) -> Vec<String> {
        self.on_bag(bag).map(BagAnnotation::canonical).collect()
    }

    pub fn push(&mut self, bag: BagId, annotation: BagAnnotation) {
        self.placements.push(Placement { bag, annotation });
        self.normalize();
    }

    /// Removes one placement; returns whether it was present.
    pub fn remove(&mut self, bag: BagId, annotation: &BagAnnotation) -> bool {
        let before = self.placements.len();
        self.placements.retain(|p| !(p.bag == bag && &p.annotation == annotation));
        before != self.placements.len()
    }

    pub fn find_bag(&self, pred: impl Fn(&BagAnnotation) -> bool) -> Option<BagId> {
        self.placements.iter().find(|p| pred(&p.annotation)).map(|p| p.bag)
    }

    pub fn gammas(&self, bag: BagId) -> impl Iterator<Item = Attr> + '_ {
        self.on_bag(bag).filter_map(|a| match a {
            BagAnnotation::GroupBy { attr: x } => Some(attr(x)),
            _ => None,
        })
    }

    pub fn sums(&self, bag: BagId) -> impl Iterator<Item = Attr> + '_ {
        self.on_bag(bag).filter_map(|a| match a {
            BagAnnotation::Marginalize { attr: x } => Some(attr(x)),
            _ => None,
        })
    }

    pub fn selections(&self, bag: BagId) -> impl Iterator<Item = &Predicate> {
        self.on_bag(bag).filter_map(|a| match a {
            BagAnnotation::Select { predicate } => Some(predicate),
            _ => None,
        })
    }

    pub fn has_marginalize(&self) -> bool {
        self.placements.iter().any(|p| matches!(p.annotation, BagAnnotation::Marginalize { .. }))
    }

    pub fn is_excluded(&self, relation: &str) -> bool {
        self.placements
            .iter()
            .any(|p| matches!(&p.annotation, BagAnnotation::Exclude { relation: r } if r == relation))
    }

    /// Version of `relation` under this query.
    pub fn version_of<'a>(&'a self, g: &'a JoinGraph, relation: &str) -> Result<&'a str> {
        for p in &self.placements {
            if let BagAnnotation::Update { relation: r, version } = &p.annotation {
                if r == relation {
                    return Ok(version);
                }
            }
        }
        Ok(&g.relation(relation)?.default_version)
    }

    /// Mapped relations of a bag that take part in the join.
    pub fn included<'a>(&'a self, jt: &'a JunctionHypertree, bag: BagId) -> impl Iterator<Item = &'a String> {
        jt.bags[bag].relations.iter().filter(move |r| !self.is_excluded(r))
    }

    /// Checks Table-1 applicability of every placement against `jt`.
    pub fn check(&self, g: &JoinGraph, jt: &JunctionHypertree) -> Result<()> {
        for p in &self.placements {
            let bag = jt.bag(p.bag)?;
            let bad = |msg: String| Err(Error::InvalidAnnotation(msg));
            match &p.annotation {
                BagAnnotation::GroupBy { attr: a } | BagAnnotation::Marginalize { attr: a } => {
                    if !bag.attrs.contains(&attr(a)) {
                        return bad(format!("`{a}` is not in bag {}", p.bag));
                    }
                }
                BagAnnotation::Select { predicate } => {
                    let cover: BTreeSet<String> = self
                        .included(jt, p.bag)
                        .flat_map(|r| jt.relation_attrs[r].iter().map(|a| a.to_string()))
                        .collect();
                    if predicate.attrs().iter().any(|a| !cover.contains(*a)) {
                        return bad(format!(
                            "no included relation of bag {} covers `{}`",
                            p.bag,
                            predicate.canonical()
                        ));
                    }
                }
                BagAnnotation::Exclude { relation } | BagAnnotation::Update { relation, .. } => {
                    if jt.mapped_bag(relation)? != p.bag {
                        return bad(format!("`{relation}` is not mapped to bag {}", p.bag));
                    }
                    if let BagAnnotation::Update { version, .. } = &p.annotation {
                        g.relation(relation)?.table(version)?;
                    }
                    if matches!(p.annotation, BagAnnotation::Exclude { .. })
                        && !jt.is_leaf(p.bag)
                        && self.included(jt, p.bag).next().is_none()
                    {
                        return bad(format!("excluding `{relation}` empties interior bag {}", p.bag));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Placement policy for [`bind_annotations`].
#[derive(Debug, Clone, Default)]
pub struct BindOptions {
    /// Place σ as far from the reference root as possible instead of near it.
    pub pushdown: bool,
    /// Bag that placement distances are measured from; defaults to the bag
    /// with the largest mapped relation.
    pub reference_root: Option<BagId>,
}

/// Bag whose mapped relations have the most rows; ties go to the lower id.
pub fn largest_bag(g: &JoinGraph, jt: &JunctionHypertree) -> BagId {
    let size = |b: &Bag| -> usize {
        b.relations
            .iter()
            .filter_map(|r| g.relation(r).ok())
            .map(|r| r.versions.get(&r.default_version).map_or(0, |t| t.rows.len()))
            .sum()
    };
    jt.bags
        .iter()
        .map(|b| (size(b), std::cmp::Reverse(b.id)))
        .max()
        .map(|(_, std::cmp::Reverse(id))| id)
        .unwrap_or(0)
}

fn distances(jt: &JunctionHypertree, from: BagId) -> Vec<usize> {
    let mut d = vec![usize::MAX; jt.len()];
    d[from] = 0;
    let mut queue = VecDeque::from([from]);
    while let Some(x) = queue.pop_front() {
        for y in jt.neighbors(x) {
            if d[y] == usize::MAX {
                d[y] = d[x] + 1;
                queue.push_back(y);
            }
        }
    }
    d
}

/// Validates a query against the graph and places its annotations.
///
/// γ and σ go to the qualifying bag nearest the reference root (farthest for
/// σ in pushdown mode), ties to the lower bag id. A γ prefers bags where an
/// included relation provides the attribute.
pub fn bind_annotations(
    g: &JoinGraph,
    jt: &JunctionHypertree,
    q: &QuerySpec,
    opts: &BindOptions,
) -> Result<AnnotationSet> {
    let excluded: BTreeSet<&str> = q.exclude.iter().map(String::as_str).collect();
    for r in &q.exclude {
        g.relation(r)?;
    }
    let included_provides = |a: &str| -> Vec<String> {
        g.providers(a).into_iter().filter(|r| !excluded.contains(r)).map(str::to_string).collect()
    };
    let lift_attrs: BTreeSet<&str> = q.aggregate.lift_attrs().into_iter().collect();
    for a in &lift_attrs {
        let providers = g.providers(a);
        if providers.len() != 1 {
            return Err(Error::InvalidQuery(format!(
                "aggregated attribute `{a}` must belong to exactly one relation, found {providers:?}"
            )));
        }
        if excluded.contains(providers[0]) {
            return Err(Error::InvalidQuery(format!("aggregated attribute `{a}` belongs to an excluded relation")));
        }
    }
    let root = opts.reference_root.unwrap_or_else(|| largest_bag(g, jt));
    let dist = distances(jt, root);
    let nearest = |cands: &[BagId], far: bool| -> Option<BagId> {
        cands.iter().copied().min_by_key(|b| (if far { usize::MAX - dist[*b] } else { dist[*b] }, *b))
    };

    let mut placements = Vec::new();
    let mut group_by = BTreeSet::new();
    for a in &q.group_by {
        if lift_attrs.contains(a.as_str()) {
            return Err(Error::InvalidQuery(format!("cannot group by aggregated attribute `{a}`")));
        }
        let providers = included_provides(a);
        if providers.is_empty() {
            return Err(Error::UnknownAttribute(a.clone()));
        }
        let backed: Vec<BagId> = providers.iter().map(|r| jt.mapped_bag(r)).collect::<Result<_>>()?;
        let bag = nearest(&backed, false).expect("providers are mapped");
        group_by.insert(attr(a));
        placements.push(Placement { bag, annotation: BagAnnotation::GroupBy { attr: a.clone() } });
    }
    for p in &q.filters {
        let need = p.attrs();
        for a in &need {
            if included_provides(a).is_empty() {
                return Err(Error::UnknownAttribute(a.to_string()));
            }
        }
        let cands: Vec<BagId> = jt
            .bags
            .iter()
            .filter(|b| {
                let cover: BTreeSet<&str> = b
                    .relations
                    .iter()
                    .filter(|r| !excluded.contains(r.as_str()))
                    .flat_map(|r| jt.relation_attrs[r].iter().map(|a| &**a))
                    .collect();
                need.iter().all(|a| cover.contains(a))
            })
            .map(|b| b.id)
            .collect();
        let bag = nearest(&cands, opts.pushdown).ok_or_else(|| Error::UnsupportedPredicate(p.canonical()))?;
        placements.push(Placement { bag, annotation: BagAnnotation::Select { predicate: p.clone() } });
    }
    for r in &q.exclude {
        placements.push(Placement {
            bag: jt.mapped_bag(r)?,
            annotation: BagAnnotation::Exclude { relation: r.clone() },
        });
    }
    for (r, v) in &q.updates {
        g.relation(r)?.table(v)?;
        placements.push(Placement {
            bag: jt.mapped_bag(r)?,
            annotation: BagAnnotation::Update { relation: r.clone(), version: v.clone() },
        });
    }
    let set = AnnotationSet::new(q.aggregate.clone(), group_by, placements);
    set.check(g, jt)?;
    Ok(set)
}
