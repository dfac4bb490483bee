//! Attribute values and the process-wide string interner.
//!
//! Categorical values are interned to dense `u32` ids so tuples stay small and
//! hash quickly. Ids are only meaningful inside one process; anything that
//! leaves the process (CSV, JSON, SQL) goes through [`Value::to_string`].

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, LazyLock, RwLock};

use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

/// Attribute name. Cheap to clone, compared by content.
pub type Attr = Arc<str>;

pub fn attr(name: &str) -> Attr {
    Arc::from(name)
}

#[derive(Default)]
struct Interner {
    strings: Vec<Arc<str>>,
    index: HashMap<Arc<str>, u32>,
}

static INTERNER: LazyLock<RwLock<Interner>> = LazyLock::new(Default::default);

/// Interned categorical value.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sym(u32);

impl Sym {
    pub fn intern(s: &str) -> Sym {
        if let Some(id) = INTERNER.read().unwrap().index.get(s) {
            return Sym(*id);
        }
        let mut guard = INTERNER.write().unwrap();
        if let Some(id) = guard.index.get(s) {
            return Sym(*id);
        }
        let id = guard.strings.len() as u32;
        let s: Arc<str> = Arc::from(s);
        guard.strings.push(s.clone());
        guard.index.insert(s, id);
        Sym(id)
    }

    /// Looks up an already interned string without interning it.
    pub fn lookup(s: &str) -> Option<Sym> {
        INTERNER.read().unwrap().index.get(s).map(|id| Sym(*id))
    }

    pub fn as_str(self) -> Arc<str> {
        INTERNER.read().unwrap().strings[self.0 as usize].clone()
    }
}

impl fmt::Debug for Sym {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", &*self.as_str())
    }
}

/// One attribute value of a tuple.
///
/// Ordering is total but process-specific for categorical values (it follows
/// interning order); use [`Value::cmp_semantic`] for predicate comparisons.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Num(OrderedFloat<f64>),
    Cat(Sym),
}

impl Value {
    pub fn cat(s: &str) -> Value {
        Value::Cat(Sym::intern(s))
    }

    pub fn num(x: f64) -> Value {
        Value::Num(OrderedFloat(x))
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(x.0),
            Value::Cat(_) => None,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Value::Num(_))
    }

    /// Value order used by predicates and by user-facing sorting: numbers
    /// numerically, strings lexicographically, numbers before strings.
    pub fn cmp_semantic(&self, other: &Value) -> std::cmp::Ordering {
        match (self, other) {
            (Value::Num(a), Value::Num(b)) => a.cmp(b),
            (Value::Cat(a), Value::Cat(b)) => {
                if a == b {
                    std::cmp::Ordering::Equal
                } else {
                    a.as_str().cmp(&b.as_str())
                }
            }
            (Value::Num(_), Value::Cat(_)) => std::cmp::Ordering::Less,
            (Value::Cat(_), Value::Num(_)) => std::cmp::Ordering::Greater,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            Value::Num(x) => serde_json::json!(x.0),
            Value::Cat(s) => serde_json::Value::String(s.as_str().to_string()),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{}", x.0),
            Value::Cat(s) => f.write_str(&s.as_str()),
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{}", x.0),
            Value::Cat(s) => write!(f, "{s:?}"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Value::Num(x) => serializer.serialize_f64(x.0),
            Value::Cat(s) => serializer.serialize_str(&s.as_str()),
        }
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        Ok(match Raw::deserialize(deserializer)? {
            Raw::Num(x) => Value::num(x),
            Raw::Str(s) => Value::cat(&s),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_is_stable() {
        let a = Sym::intern("alpha-test-value");
        let b = Sym::intern("alpha-test-value");
        assert_eq!(a, b);
        assert_eq!(&*a.as_str(), "alpha-test-value");
        assert_eq!(Sym::lookup("alpha-test-value"), Some(a));
        assert_eq!(Sym::lookup("never-interned-value-xyz"), None);
    }

    #[test]
    fn semantic_order() {
        use std::cmp::Ordering::*;
        // intern in reverse lexical order so id order disagrees with string order
        let z = Value::cat("zz-order");
        let a = Value::cat("aa-order");
        assert_eq!(a.cmp_semantic(&z), Less);
        assert_eq!(Value::num(2.0).cmp_semantic(&Value::num(10.0)), Less);
        assert_eq!(Value::num(2.0).cmp_semantic(&a), Less);
    }
}
