//! Selection predicates: conjunctions of `attr op constant` and `attr IN (…)`.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::value::{Attr, Sym, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = "=")]
    Eq,
    #[serde(rename = "!=", alias = "<>")]
    Ne,
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl CmpOp {
    pub fn sql(self) -> &'static str {
        match self {
            CmpOp::Eq => "=",
            CmpOp::Ne => "<>",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }

    fn holds(self, ord: Ordering) -> bool {
        match self {
            CmpOp::Eq => ord == Ordering::Equal,
            CmpOp::Ne => ord != Ordering::Equal,
            CmpOp::Lt => ord == Ordering::Less,
            CmpOp::Le => ord != Ordering::Greater,
            CmpOp::Gt => ord == Ordering::Greater,
            CmpOp::Ge => ord != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Literal {
    Num(OrderedFloat<f64>),
    Str(String),
}

impl Literal {
    pub fn str(s: &str) -> Literal {
        Literal::Str(s.to_string())
    }

    pub fn num(x: f64) -> Literal {
        Literal::Num(OrderedFloat(x))
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Num(x) => write!(f, "{}", x.0),
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
        }
    }
}

/// One conjunct.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "AtomRepr", into = "AtomRepr")]
pub enum Atom {
    Cmp { attr: String, op: CmpOp, value: Literal },
    In { attr: String, values: Vec<Literal> },
}

#[derive(Serialize, Deserialize)]
struct AtomRepr {
    attr: String,
    op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<Literal>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<Literal>>,
}

impl TryFrom<AtomRepr> for Atom {
    type Error = String;

    fn try_from(r: AtomRepr) -> std::result::Result<Self, String> {
        if r.op.eq_ignore_ascii_case("in") {
            let values = r.values.ok_or("`in` needs a `values` list")?;
            return Ok(Atom::In { attr: r.attr, values });
        }
        let op: CmpOp = serde_json::from_value(serde_json::Value::String(r.op.clone()))
            .map_err(|_| format!("unknown operator `{}`", r.op))?;
        let value = r.value.ok_or("comparison needs a `value`")?;
        Ok(Atom::Cmp { attr: r.attr, op, value })
    }
}

impl From<Atom> for AtomRepr {
    fn from(a: Atom) -> Self {
        match a {
            Atom::Cmp { attr, op, value } => AtomRepr {
                attr,
                op: op.sql().replace("<>", "!="),
                value: Some(value),
                values: None,
            },
            Atom::In { attr, values } => {
                AtomRepr { attr, op: "in".into(), value: None, values: Some(values) }
            }
        }
    }
}

impl Atom {
    pub fn eq(attr: &str, value: Literal) -> Atom {
        Atom::Cmp { attr: attr.to_string(), op: CmpOp::Eq, value }
    }

    pub fn cmp(attr: &str, op: CmpOp, value: Literal) -> Atom {
        Atom::Cmp { attr: attr.to_string(), op, value }
    }

    pub fn is_in(attr: &str, values: Vec<Literal>) -> Atom {
        Atom::In { attr: attr.to_string(), values }
    }

    pub fn attr(&self) -> &str {
        match self {
            Atom::Cmp { attr, .. } | Atom::In { attr, .. } => attr,
        }
    }

    /// Renders the atom with a caller-chosen column reference.
    pub fn render(&self, column: &dyn Fn(&str) -> String) -> String {
        match self {
            Atom::Cmp { attr, op, value } => format!("{} {} {}", column(attr), op.sql(), value),
            Atom::In { attr, values } => {
                let mut vs: Vec<&Literal> = values.iter().collect();
                vs.sort();
                vs.dedup();
                let list: Vec<String> = vs.iter().map(ToString::to_string).collect();
                format!("{} IN ({})", column(attr), list.join(", "))
            }
        }
    }
}

/// Conjunction of atoms. Serialized as a list of atoms; a single atom object
/// is accepted on input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "PredicateRepr", into = "Vec<Atom>")]
pub struct Predicate {
    pub atoms: Vec<Atom>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum PredicateRepr {
    Many(Vec<Atom>),
    One(Atom),
}

impl From<PredicateRepr> for Predicate {
    fn from(r: PredicateRepr) -> Self {
        match r {
            PredicateRepr::Many(atoms) => Predicate { atoms },
            PredicateRepr::One(a) => Predicate { atoms: vec![a] },
        }
    }
}

impl From<Predicate> for Vec<Atom> {
    fn from(p: Predicate) -> Self {
        p.atoms
    }
}

impl From<Atom> for Predicate {
    fn from(a: Atom) -> Self {
        Predicate { atoms: vec![a] }
    }
}

impl Predicate {
    pub fn new(atoms: Vec<Atom>) -> Predicate {
        Predicate { atoms }
    }

    pub fn attrs(&self) -> BTreeSet<&str> {
        self.atoms.iter().map(Atom::attr).collect()
    }

    /// Deterministic text form: atoms sorted, IN lists sorted and deduplicated.
    /// Two predicates with equal canonical forms select the same rows.
    pub fn canonical(&self) -> String {
        self.render(&|a| a.to_string())
    }

    pub fn render(&self, column: &dyn Fn(&str) -> String) -> String {
        if self.atoms.is_empty() {
            return "1 = 1".to_string();
        }
        let mut parts: Vec<(String, String)> =
            self.atoms.iter().map(|a| (a.render(&|x| x.to_string()), a.render(column))).collect();
        parts.sort();
        parts.dedup();
        parts.into_iter().map(|(_, r)| r).collect::<Vec<_>>().join(" AND ")
    }

    /// Binds attribute names to tuple positions.
    pub fn compile(&self, attrs: &[Attr]) -> Result<CompiledPredicate> {
        let mut checks = Vec::with_capacity(self.atoms.len());
        for atom in &self.atoms {
            let pos = attrs
                .iter()
                .position(|a| &**a == atom.attr())
                .ok_or_else(|| Error::UnknownAttribute(atom.attr().to_string()))?;
            let check = match atom {
                Atom::Cmp { op, value, .. } => Check::Cmp { op: *op, value: Bound::new(value) },
                Atom::In { values, .. } => Check::In(values.iter().map(Bound::new).collect()),
            };
            checks.push((pos, atom.attr().to_string(), check));
        }
        Ok(CompiledPredicate { checks })
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.canonical())
    }
}

#[derive(Debug, Clone)]
enum Bound {
    Num(f64),
    Str { text: String, sym: Option<Sym> },
}

impl Bound {
    fn new(l: &Literal) -> Bound {
        match l {
            Literal::Num(x) => Bound::Num(x.0),
            Literal::Str(s) => Bound::Str { text: s.clone(), sym: Sym::lookup(s) },
        }
    }

    fn compare(&self, v: &Value, attr: &str) -> Result<Ordering> {
        match (self, v) {
            (Bound::Num(b), Value::Num(x)) => Ok(x.0.total_cmp(b)),
            (Bound::Str { text, sym }, Value::Cat(s)) => Ok(if Some(*s) == *sym {
                Ordering::Equal
            } else {
                (*s.as_str()).cmp(text.as_str())
            }),
            (Bound::Num(_), Value::Cat(_)) => Err(Error::TypeMismatch {
                attr: attr.to_string(),
                detail: format!("categorical value `{v}` compared with a number"),
            }),
            (Bound::Str { text, .. }, Value::Num(_)) => Err(Error::TypeMismatch {
                attr: attr.to_string(),
                detail: format!("numeric value `{v}` compared with string '{text}'"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
enum Check {
    Cmp { op: CmpOp, value: Bound },
    In(Vec<Bound>),
}

#[derive(Debug, Clone)]
pub struct CompiledPredicate {
    checks: Vec<(usize, String, Check)>,
}

impl CompiledPredicate {
    pub fn eval(&self, tuple: &[Value]) -> Result<bool> {
        for (pos, attr, check) in &self.checks {
            let v = &tuple[*pos];
            let ok = match check {
                Check::Cmp { op, value } => op.holds(value.compare(v, attr)?),
                Check::In(values) => {
                    let mut hit = false;
                    for b in values {
                        if b.compare(v, attr)? == Ordering::Equal {
                            hit = true;
                            break;
                        }
                    }
                    hit
                }
            };
            if !ok {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::value::attr;

    #[test]
    fn json_forms() {
        let p: Predicate = serde_json::from_str(r#"{"attr":"C","op":"=","value":"c1"}"#).unwrap();
        assert_eq!(p.canonical(), "C = 'c1'");
        let p: Predicate = serde_json::from_str(
            r#"[{"attr":"B","op":"in","values":["y","x","x"]},{"attr":"A","op":">=","value":3}]"#,
        )
        .unwrap();
        assert_eq!(p.canonical(), "A >= 3 AND B IN ('x', 'y')");
        let back: Predicate = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
        assert_eq!(back, p);
        assert!(serde_json::from_str::<Predicate>(r#"{"attr":"C","op":"~","value":1}"#).is_err());
    }

    #[test]
    fn canonical_form_ignores_atom_order() {
        let a = Predicate::new(vec![Atom::eq("A", Literal::num(1.0)), Atom::eq("B", Literal::str("b"))]);
        let b = Predicate::new(vec![Atom::eq("B", Literal::str("b")), Atom::eq("A", Literal::num(1.0))]);
        assert_eq!(a.canonical(), b.canonical());
    }

    #[test]
    fn eval_and_type_errors() {
        let attrs = vec![attr("A"), attr("C")];
        let p = Predicate::new(vec![Atom::cmp("A", CmpOp::Lt, Literal::num(5.0))]).compile(&attrs).unwrap();
        assert!(p.eval(&[Value::num(3.0), Value::cat("c1")]).unwrap());
        assert!(!p.eval(&[Value::num(7.0), Value::cat("c1")]).unwrap());
        assert!(matches!(p.eval(&[Value::cat("x"), Value::cat("c1")]), Err(Error::TypeMismatch { .. })));
        let p = Predicate::new(vec![Atom::cmp("C", CmpOp::Ge, Literal::str("c2"))]).compile(&attrs).unwrap();
        assert!(p.eval(&[Value::num(0.0), Value::cat("c3")]).unwrap());
        assert!(!p.eval(&[Value::num(0.0), Value::cat("c1")]).unwrap());
        let unknown = Predicate::from(Atom::eq("Z", Literal::num(1.0))).compile(&attrs);
        assert!(matches!(unknown, Err(Error::UnknownAttribute(_))));
    }
}
