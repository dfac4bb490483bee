//! Raw tables, annotated relations, and the three operators that message
//! passing is built from: natural join, marginalization and selection.
//!
//! An [`AnnotatedRelation`] keeps its attributes in ascending name order and its
//! rows sorted by tuple. Two relations holding the same annotated tuple set are
//! therefore structurally equal, which is what makes message reuse checkable
//! by plain `==`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::predicate::Predicate;
use crate::semiring::{Annotation, SemiringKind, SemiringSpec};
use crate::value::{attr, Attr, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttrType {
    #[default]
    Categorical,
    Numeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrDef {
    pub name: String,
    #[serde(rename = "type", default)]
    pub ty: AttrType,
    /// Explicit domain. Absent means the domain is whatever is observed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<Vec<String>>,
}

impl AttrDef {
    pub fn categorical(name: &str) -> AttrDef {
        AttrDef { name: name.to_string(), ty: AttrType::Categorical, domain: None }
    }

    pub fn numeric(name: &str) -> AttrDef {
        AttrDef { name: name.to_string(), ty: AttrType::Numeric, domain: None }
    }
}

/// Declared schema of a stored table, as read from a schema JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub attributes: Vec<AttrDef>,
    /// Default aggregate when the table is loaded on its own.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lift: Option<SemiringSpec>,
}

impl Schema {
    pub fn new(attributes: Vec<AttrDef>) -> Result<Schema> {
        let s = Schema { attributes, lift: None };
        s.validate()?;
        Ok(s)
    }

    pub fn categorical(names: &[&str]) -> Schema {
        Schema::new(names.iter().map(|n| AttrDef::categorical(n)).collect())
            .expect("duplicate attribute name")
    }

    pub fn from_json_file(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let s: Schema = serde_json::from_str(&text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::InvalidSchema(format!("duplicate attribute `{}`", a.name)));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.attributes.iter().map(|a| a.name.as_str())
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        CsvOptions { delimiter: b',' }
    }
}

/// Un-annotated stored rows, in schema column order. Duplicates are kept.
#[derive(Debug, Clone)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Box<[Value]>>,
}

impl Table {
    pub fn new(schema: Schema, rows: Vec<Vec<Value>>) -> Result<Table> {
        schema.validate()?;
        let width = schema.attributes.len();
        let mut out = Vec::with_capacity(rows.len());
        for r in rows {
            if r.len() != width {
                return Err(Error::InvalidSchema(format!(
                    "row has {} values, schema has {width} attributes",
                    r.len()
                )));
            }
            out.push(r.into_boxed_slice());
        }
        Ok(Table { schema, rows: out })
    }

    /// Rows given as JSON arrays. Categorical cells may be strings or
    /// numbers (kept as their text); numeric cells must be numbers or numeric
    /// strings.
    pub fn from_json_rows(schema: Schema, rows: &[Vec<serde_json::Value>]) -> Result<Table> {
        let mut out = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != schema.attributes.len() {
                return Err(Error::InvalidSchema(format!(
                    "row has {} values, schema has {} attributes",
                    row.len(),
                    schema.attributes.len()
                )));
            }
            let mut vals = Vec::with_capacity(row.len());
            for (cell, def) in row.iter().zip(&schema.attributes) {
                let text = match cell {
                    serde_json::Value::String(s) => s.clone(),
                    serde_json::Value::Number(n) => n.to_string(),
                    other => {
                        return Err(Error::TypeMismatch { attr: def.name.clone(), detail: format!("unsupported cell {other}") })
                    }
                };
                vals.push(match def.ty {
                    AttrType::Categorical => Value::cat(&text),
                    AttrType::Numeric => Value::num(text.trim().parse::<f64>().map_err(|_| Error::TypeMismatch {
                        attr: def.name.clone(),
                        detail: format!("`{text}` is not numeric"),
                    })?),
                });
            }
            out.push(vals);
        }
        Table::new(schema, out)
    }

    pub fn load_csv(path: &Path, schema: &Schema, opts: &CsvOptions) -> Result<Table> {
        let file =
            std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(opts.delimiter)
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(file);
        let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let mut columns = Vec::with_capacity(schema.attributes.len());
        for a in &schema.attributes {
            let idx = header.iter().position(|h| h == a.name).ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: a.name.clone(),
            })?;
            columns.push(idx);
        }
        let domains: Vec<Option<BTreeSet<&str>>> = schema
            .attributes
            .iter()
            .map(|a| a.domain.as_ref().map(|d| d.iter().map(String::as_str).collect()))
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                parse_err(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let mut row = Vec::with_capacity(columns.len());
            for (i, def) in schema.attributes.iter().enumerate() {
                let field = record.get(columns[i]).ok_or_else(|| {
                    parse_err(line, format!("missing field for `{}`", def.name))
                })?;
                if let Some(domain) = &domains[i] {
                    if !domain.contains(field) {
                        return Err(Error::DomainViolation {
                            path: path.to_path_buf(),
                            line,
                            attr: def.name.clone(),
                            value: field.to_string(),
                        });
                    }
                }
                let v = match def.ty {
                    AttrType::Categorical => Value::cat(field),
                    AttrType::Numeric => Value::num(field.parse::<f64>().map_err(|_| {
                        parse_err(line, format!("`{field}` is not a number (column `{}`)", def.name))
                    })?),
                };
                row.push(v);
            }
            rows.push(row.into_boxed_slice());
        }
        Ok(Table { schema: schema.clone(), rows })
    }

    pub fn value(&self, row: usize, name: &str) -> Option<Value> {
        self.schema.position(name).map(|i| self.rows[row][i])
    }

    /// Annotates every row, folds duplicates with ⊕ and drops zero rows.
    ///
    /// Lift attributes for which `owns` holds are consumed by the lift and do
    /// not appear in the result's schema. With `strict`, every lift attribute
    /// must be owned and present.
    pub fn annotate(
        &self,
        spec: &SemiringSpec,
        owns: &dyn Fn(&str) -> bool,
        strict: bool,
    ) -> Result<AnnotatedRelation> {
        let lift_attrs: BTreeSet<&str> = spec.lift_attrs().into_iter().collect();
        let consumed: Vec<bool> = self
            .schema
            .attributes
            .iter()
            .map(|a| lift_attrs.contains(a.name.as_str()) && owns(&a.name))
            .collect();
        let kept: Vec<Attr> = self
            .schema
            .attributes
            .iter()
            .zip(&consumed)
            .filter(|(_, c)| !**c)
            .map(|(a, _)| attr(&a.name))
            .collect();
        let mut rows = Vec::with_capacity(self.rows.len());
        for row in &self.rows {
            let get = |name: &str| {
                self.schema.position(name).filter(|i| consumed[*i]).map(|i| row[i])
            };
            let ann = if strict { spec.lift(get)? } else { spec.lift_partial(get)? };
            let tuple: Vec<Value> =
                row.iter().zip(&consumed).filter(|(_, c)| !**c).map(|(v, _)| *v).collect();
            rows.push((tuple, ann));
        }
        AnnotatedRelation::from_rows(kept, spec.kind(), rows)
    }
}

/// Deduplicated tuple set where each tuple carries one semi-ring annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedRelation {
    attrs: Vec<Attr>,
    rows: Vec<(Box<[Value]>, Annotation)>,
    kind: SemiringKind,
}

impl AnnotatedRelation {
    pub fn empty(attrs: Vec<Attr>, kind: SemiringKind) -> AnnotatedRelation {
        let mut attrs = attrs;
        attrs.sort();
        attrs.dedup();
        AnnotatedRelation { attrs, rows: Vec::new(), kind }
    }

    /// The join-neutral relation: no attributes, one empty tuple annotated 1.
    pub fn unit(kind: SemiringKind) -> AnnotatedRelation {
        AnnotatedRelation { attrs: Vec::new(), rows: vec![(Box::new([]), Annotation::one(kind))], kind }
    }

    /// Builds a relation from rows in the given attribute order. Duplicate
    /// tuples are ⊕-folded and zero rows dropped.
    pub fn from_rows(
        attrs: Vec<Attr>,
        kind: SemiringKind,
        rows: impl IntoIterator<Item = (Vec<Value>, Annotation)>,
    ) -> Result<AnnotatedRelation> {
        let mut order: Vec<usize> = (0..attrs.len()).collect();
        order.sort_by(|a, b| attrs[*a].cmp(&attrs[*b]));
        for w in order.windows(2) {
            if attrs[w[0]] == attrs[w[1]] {
                return Err(Error::InvalidSchema(format!("duplicate attribute `{}`", attrs[w[0]])));
            }
        }
        let sorted_attrs: Vec<Attr> = order.iter().map(|i| attrs[*i].clone()).collect();
        let mut groups: HashMap<Box<[Value]>, Annotation> = HashMap::new();
        for (tuple, ann) in rows {
            if tuple.len() != attrs.len() {
                return Err(Error::InvalidSchema(format!(
                    "tuple has {} values, relation has {} attributes",
                    tuple.len(),
                    attrs.len()
                )));
            }
            if ann.kind() != kind {
                return Err(Error::KindMismatch { left: kind, right: ann.kind() });
            }
            let key: Box<[Value]> = order.iter().map(|i| tuple[*i]).collect();
            match groups.get_mut(&key) {
                Some(acc) => acc.add_assign_unchecked(&ann),
                None => {
                    groups.insert(key, ann);
                }
            }
        }
        Ok(Self::finish(sorted_attrs, kind, groups.into_iter()))
    }

    fn finish(
        attrs: Vec<Attr>,
        kind: SemiringKind,
        rows: impl Iterator<Item = (Box<[Value]>, Annotation)>,
    ) -> AnnotatedRelation {
        let mut rows: Vec<_> = rows.filter(|(_, a)| !a.is_zero()).collect();
        rows.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        AnnotatedRelation { attrs, rows, kind }
    }

    pub fn load_csv(
        path: &Path,
        schema: &Schema,
        spec: &SemiringSpec,
        opts: &CsvOptions,
    ) -> Result<AnnotatedRelation> {
        Table::load_csv(path, schema, opts)?.annotate(spec, &|_| true, true)
    }

    pub fn attrs(&self) -> &[Attr] {
        &self.attrs
    }

    pub fn attr_set(&self) -> BTreeSet<Attr> {
        self.attrs.iter().cloned().collect()
    }

    pub fn has_attr(&self, name: &str) -> bool {
        self.attrs.iter().any(|a| &**a == name)
    }

    pub fn kind(&self) -> SemiringKind {
        self.kind
    }

    pub fn rows(&self) -> &[(Box<[Value]>, Annotation)] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Annotation of the tuple given as `(attribute, value)` pairs, in any order.
    pub fn get(&self, pairs: &[(&str, Value)]) -> Option<&Annotation> {
        if pairs.len() != self.attrs.len() {
            return None;
        }
        let mut key = Vec::with_capacity(pairs.len());
        for a in &self.attrs {
            key.push(pairs.iter().find(|(n, _)| *n == &**a)?.1);
        }
        self.rows
            .binary_search_by(|(t, _)| (**t).cmp(&key[..]))
            .ok()
            .map(|i| &self.rows[i].1)
    }

    /// ⊕ over every row: the aggregate of the whole relation.
    pub fn total(&self) -> Annotation {
        let mut acc = Annotation::zero(self.kind);
        for (_, a) in &self.rows {
            acc.add_assign_unchecked(a);
        }
        acc
    }

    /// Natural join on equally named attributes; annotations multiply.
    pub fn join(&self, other: &AnnotatedRelation) -> Result<AnnotatedRelation> {
        if self.kind != other.kind {
            return Err(Error::KindMismatch { left: self.kind, right: other.kind });
        }
        // build on the smaller side
        let (build, probe) = if self.len() <= other.len() { (self, other) } else { (other, self) };
        let shared: Vec<Attr> =
            build.attrs.iter().filter(|a| probe.attrs.contains(a)).cloned().collect();
        let pos = |rel: &AnnotatedRelation, a: &Attr| rel.attrs.iter().position(|x| x == a).unwrap();
        let build_key: Vec<usize> = shared.iter().map(|a| pos(build, a)).collect();
        let probe_key: Vec<usize> = shared.iter().map(|a| pos(probe, a)).collect();

        let mut out_attrs: Vec<Attr> = build.attrs.iter().chain(&probe.attrs).cloned().collect();
        out_attrs.sort();
        out_attrs.dedup();
        // (from probe side?, index)
        let sources: Vec<(bool, usize)> = out_attrs
            .iter()
            .map(|a| match probe.attrs.iter().position(|x| x == a) {
                Some(i) => (true, i),
                None => (false, pos(build, a)),
            })
            .collect();

        let mut table: HashMap<Vec<Value>, Vec<usize>> = HashMap::with_capacity(build.len());
        for (i, (t, _)) in build.rows.iter().enumerate() {
            table.entry(build_key.iter().map(|k| t[*k]).collect()).or_default().push(i);
        }
        let mut out = Vec::new();
        let mut key = Vec::with_capacity(probe_key.len());
        for (pt, pa) in &probe.rows {
            key.clear();
            key.extend(probe_key.iter().map(|k| pt[*k]));
            if let Some(matches) = table.get(&key) {
                for &bi in matches {
                    let (bt, ba) = &build.rows[bi];
                    let tuple: Box<[Value]> = sources
                        .iter()
                        .map(|(from_probe, i)| if *from_probe { pt[*i] } else { bt[*i] })
                        .collect();
                    out.push((tuple, ba.mul_unchecked(pa)));
                }
            }
        }
        // each output tuple determines both inputs, so no folding is needed
        Ok(Self::finish(out_attrs, self.kind, out.into_iter()))
    }

    /// Sums out `out_attrs`, grouping by the remaining attributes.
    pub fn marginalize(&self, out_attrs: &[Attr]) -> Result<AnnotatedRelation> {
        for a in out_attrs {
            if !self.attrs.contains(a) {
                return Err(Error::UnknownAttribute(a.to_string()));
            }
        }
        if out_attrs.is_empty() {
            return Ok(self.clone());
        }
        let keep: BTreeSet<Attr> =
            self.attrs.iter().filter(|a| !out_attrs.contains(a)).cloned().collect();
        Ok(self.project_onto(&keep))
    }

    /// Sums out every attribute not in `keep`. Names in `keep` that the
    /// relation lacks are ignored.
    pub fn project_onto(&self, keep: &BTreeSet<Attr>) -> AnnotatedRelation {
        let positions: Vec<usize> =
            (0..self.attrs.len()).filter(|i| keep.contains(&self.attrs[*i])).collect();
        if positions.len() == self.attrs.len() {
            return self.clone();
        }
        let attrs: Vec<Attr> = positions.iter().map(|i| self.attrs[*i].clone()).collect();
        let mut groups: HashMap<Box<[Value]>, Annotation> = HashMap::new();
        for (t, a) in &self.rows {
            let key: Box<[Value]> = positions.iter().map(|i| t[*i]).collect();
            match groups.get_mut(&key) {
                Some(acc) => acc.add_assign_unchecked(a),
                None => {
                    groups.insert(key, a.clone());
                }
            }
        }
        Self::finish(attrs, self.kind, groups.into_iter())
    }

    /// Keeps the rows satisfying `pred`; annotations are unchanged.
    pub fn select(&self, pred: &Predicate) -> Result<AnnotatedRelation> {
        let compiled = pred.compile(&self.attrs)?;
        let mut rows = Vec::with_capacity(self.rows.len());
        for (t, a) in &self.rows {
            if compiled.eval(t)? {
                rows.push((t.clone(), a.clone()));
            }
        }
        Ok(AnnotatedRelation { attrs: self.attrs.clone(), rows, kind: self.kind })
    }

    /// Same attributes, same tuples, annotations equal within `rel`.
    pub fn approx_eq(&self, other: &AnnotatedRelation, rel: f64) -> bool {
        self.attrs == other.attrs
            && self.kind == other.kind
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|((t1, a1), (t2, a2))| {
                t1 == t2 && a1.approx_eq(a2, rel)
            })
    }

    /// Rows as `{"group": [...], "value": ...}` objects, sorted by value order.
    pub fn to_json_rows(&self) -> Vec<serde_json::Value> {
        let mut rows: Vec<&(Box<[Value]>, Annotation)> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            a.0.iter()
                .zip(b.0.iter())
                .map(|(x, y)| x.cmp_semantic(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        rows.into_iter()
            .map(|(t, a)| {
                serde_json::json!({
                    "group": t.iter().map(Value::to_json).collect::<Vec<_>>(),
                    "value": a.to_json(),
                })
            })
            .collect()
    }

    /// Writes `attrs..., annotation` as CSV, rows in value order.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let to_err = |e: csv::Error| Error::InvalidParameter(format!("csv write failed: {e}"));
        let mut header: Vec<String> = self.attrs.iter().map(|a| a.to_string()).collect();
        header.push("annotation".into());
        out.write_record(&header).map_err(to_err)?;
        for row in self.to_json_rows() {
            let mut rec: Vec<String> = row["group"]
                .as_array()
                .unwrap()
                .iter()
                .map(|v| match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                })
                .collect();
            rec.push(row["value"].to_string());
            out.write_record(&rec).map_err(to_err)?;
        }
        out.flush().map_err(|source| Error::Io { path: "<csv>".into(), source })?;
        Ok(())
    }
}
