//! User-defined map and reduce functions, resolved by name.
//!
//! Workers never receive code. A job names its functions, and every process
//! resolves those names against a [`Catalog`] built at startup. Built-ins are
//! `wordcount_map`, `identity_map` and `sum_reduce`; deployments add their
//! own with [`Catalog::with_map`] / [`Catalog::with_reduce`] before sharing
//! the catalog.
//!
//! A reduce function that is also used as a combiner must be associative and
//! commutative over its values. That is the caller's obligation; nothing here
//! checks it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record::Record;

pub type Params = BTreeMap<String, String>;

/// `map(k1, v1) -> list(k2, v2)`
pub type MapFn = dyn Fn(&[u8], &[u8], &Params) -> Result<Vec<Record>, UdfError> + Send + Sync;

/// `reduce(k2, list(v2)) -> (k2, v2)`
pub type ReduceFn = dyn Fn(&[u8], &[Vec<u8>], &Params) -> Result<Record, UdfError> + Send + Sync;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("{0}")]
pub struct UdfError(pub String);

impl UdfError {
    pub fn new(msg: impl Into<String>) -> Self {
        UdfError(msg.into())
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum CatalogError {
    #[error("unknown {kind} function `{name}`")]
    UnknownFunction { kind: FunctionKind, name: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionKind {
    Map,
    Reduce,
}

impl fmt::Display for FunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FunctionKind::Map => "map",
            FunctionKind::Reduce => "reduce",
        })
    }
}

/// Reference to a catalog function, with optional parameters.
///
/// In job documents it may be written either as a bare name
/// (`"wordcount_map"`) or as `{"name": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "FunctionRefRepr", into = "FunctionRefRepr")]
pub struct FunctionRef {
    pub name: String,
    pub params: Params,
}

impl FunctionRef {
    pub fn new(name: impl Into<String>) -> Self {
        FunctionRef {
            name: name.into(),
            params: Params::new(),
        }
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

impl From<&str> for FunctionRef {
    fn from(name: &str) -> Self {
        FunctionRef::new(name)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum FunctionRefRepr {
    Name(String),
    Full {
        name: String,
        #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
        params: Params,
    },
}

impl From<FunctionRefRepr> for FunctionRef {
    fn from(r: FunctionRefRepr) -> Self {
        match r {
            FunctionRefRepr::Name(name) => FunctionRef::new(name),
            FunctionRefRepr::Full { name, params } => FunctionRef { name, params },
        }
    }
}

impl From<FunctionRef> for FunctionRefRepr {
    fn from(r: FunctionRef) -> Self {
        if r.params.is_empty() {
            FunctionRefRepr::Name(r.name)
        } else {
            FunctionRefRepr::Full {
                name: r.name,
                params: r.params,
            }
        }
    }
}

/// A map function bound to the parameters of one [`FunctionRef`].
#[derive(Clone)]
pub struct MapUdf {
    name: String,
    f: Arc<MapFn>,
    params: Params,
}

impl MapUdf {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, key: &[u8], payload: &[u8]) -> Result<Vec<Record>, UdfError> {
        (self.f)(key, payload, &self.params)
    }
}

impl fmt::Debug for MapUdf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MapUdf").field("name", &self.name).finish()
    }
}

/// A reduce function bound to the parameters of one [`FunctionRef`].
#[derive(Clone)]
pub struct ReduceUdf {
    name: String,
    f: Arc<ReduceFn>,
    params: Params,
}

impl ReduceUdf {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn call(&self, key: &[u8], values: &[Vec<u8>]) -> Result<Record, UdfError> {
        (self.f)(key, values, &self.params)
    }
}

impl fmt::Debug for ReduceUdf {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReduceUdf").field("name", &self.name).finish()
    }
}

/// Name-to-function registry shared read-only by every worker.
#[derive(Clone, Default)]
pub struct Catalog {
    maps: HashMap<String, Arc<MapFn>>,
    reduces: HashMap<String, Arc<ReduceFn>>,
}

impl fmt::Debug for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut maps: Vec<_> = self.maps.keys().collect();
        let mut reduces: Vec<_> = self.reduces.keys().collect();
        maps.sort();
        reduces.sort();
        f.debug_struct("Catalog")
            .field("maps", &maps)
            .field("reduces", &reduces)
            .finish()
    }
}

impl Catalog {
    /// An empty catalog.
    pub fn empty() -> Self {
        Self::default()
    }

    /// The catalog with every built-in function registered.
    pub fn builtin() -> Self {
        Catalog::empty()
            .with_map("wordcount_map", wordcount_map)
            .with_map("identity_map", identity_map)
            .with_reduce("sum_reduce", sum_reduce)
    }

    pub fn with_map<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&[u8], &[u8], &Params) -> Result<Vec<Record>, UdfError> + Send + Sync + 'static,
    {
        self.maps.insert(name.to_string(), Arc::new(f));
        self
    }

    pub fn with_reduce<F>(mut self, name: &str, f: F) -> Self
    where
        F: Fn(&[u8], &[Vec<u8>], &Params) -> Result<Record, UdfError> + Send + Sync + 'static,
    {
        self.reduces.insert(name.to_string(), Arc::new(f));
        self
    }

    pub fn map(&self, r: &FunctionRef) -> Result<MapUdf, CatalogError> {
        let f = self
            .maps
            .get(&r.name)
            .ok_or_else(|| CatalogError::UnknownFunction {
                kind: FunctionKind::Map,
                name: r.name.clone(),
            })?;
        Ok(MapUdf {
            name: r.name.clone(),
            f: Arc::clone(f),
            params: r.params.clone(),
        })
    }

    pub fn reduce(&self, r: &FunctionRef) -> Result<ReduceUdf, CatalogError> {
        let f = self
            .reduces
            .get(&r.name)
            .ok_or_else(|| CatalogError::UnknownFunction {
                kind: FunctionKind::Reduce,
                name: r.name.clone(),
            })?;
        Ok(ReduceUdf {
            name: r.name.clone(),
            f: Arc::clone(f),
            params: r.params.clone(),
        })
    }
}

/// Splits the payload on ASCII whitespace and emits `(word, "1")` per word.
pub fn wordcount_map(_key: &[u8], payload: &[u8], _: &Params) -> Result<Vec<Record>, UdfError> {
    Ok(payload
        .split(|b| b.is_ascii_whitespace())
        .filter(|w| !w.is_empty())
        .map(|w| Record::new(w, "1"))
        .collect())
}

/// Emits the input pair unchanged.
pub fn identity_map(key: &[u8], payload: &[u8], _: &Params) -> Result<Vec<Record>, UdfError> {
    Ok(vec![Record::new(key, payload)])
}

/// Sums decimal integer values.
pub fn sum_reduce(key: &[u8], values: &[Vec<u8>], _: &Params) -> Result<Record, UdfError> {
    let mut total: i64 = 0;
    for v in values {
        let n: i64 = std::str::from_utf8(v)
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| {
                UdfError::new(format!(
                    "sum_reduce: value {:?} is not an integer",
                    String::from_utf8_lossy(v)
                ))
            })?;
        total = total
            .checked_add(n)
            .ok_or_else(|| UdfError::new("sum_reduce: overflow"))?;
    }
    Ok(Record::new(key, total.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    #[test]
    fn wordcount_map_yields_one_per_word() {
        let cat = Catalog::builtin();
        let map = cat.map(&"wordcount_map".into()).unwrap();
        let out = map.call(b"chunk", b"a b a").unwrap();
        assert_eq!(
            out,
            vec![Record::new("a", "1"), Record::new("b", "1"), Record::new("a", "1")]
        );
        assert!(map.call(b"k", b" \n\t ").unwrap().is_empty());
    }

    #[test]
    fn sum_reduce_adds_values() {
        let cat = Catalog::builtin();
        let red = cat.reduce(&"sum_reduce".into()).unwrap();
        let out = red.call(b"a", &[b"1".to_vec(), b"1".to_vec()]).unwrap();
        assert_eq!(out, Record::new("a", "2"));
        assert!(red.call(b"a", &[b"x".to_vec()]).is_err());
    }

    #[test]
    fn unknown_names_are_rejected() {
        let cat = Catalog::builtin();
        assert_eq!(
            cat.map(&"no_such_fn".into()).unwrap_err(),
            CatalogError::UnknownFunction {
                kind: FunctionKind::Map,
                name: "no_such_fn".into()
            }
        );
        // kinds are separate namespaces
        assert!(cat.reduce(&"wordcount_map".into()).is_err());
    }

    #[test]
    fn registered_functions_receive_params() {
        let cat = Catalog::builtin().with_map("tag", |_, payload, params| {
            Ok(vec![Record::new(params["tag"].as_bytes(), payload)])
        });
        let f = cat.map(&FunctionRef::new("tag").with_param("tag", "t1")).unwrap();
        assert_eq!(f.call(b"", b"x").unwrap(), vec![Record::new("t1", "x")]);
    }

    #[test]
    fn function_ref_accepts_both_spellings() {
        let a: FunctionRef = serde_json::from_str("\"sum_reduce\"").unwrap();
        let b: FunctionRef = serde_json::from_str(r#"{"name":"sum_reduce"}"#).unwrap();
        assert_eq!(a, b);
        let c: FunctionRef =
            serde_json::from_str(r#"{"name":"m","params":{"marker":"x"}}"#).unwrap();
        assert_eq!(c.params["marker"], "x");
        assert_eq!(serde_json::to_string(&a).unwrap(), "\"sum_reduce\"");
    }

    #[test]
    fn map_then_group_then_sum_matches_hash_count() {
        let text = b"the cat the dog\nthe  end\tcat\n";
        let cat = Catalog::builtin();
        let map = cat.map(&"wordcount_map".into()).unwrap();
        let red = cat.reduce(&"sum_reduce".into()).unwrap();
        let mut grouped: std::collections::BTreeMap<Vec<u8>, Vec<Vec<u8>>> = Default::default();
        for r in map.call(b"", text).unwrap() {
            grouped.entry(r.key).or_default().push(r.value);
        }
        let got: HashMap<String, i64> = grouped
            .iter()
            .map(|(k, vs)| {
                let r = red.call(k, vs).unwrap();
                (
                    String::from_utf8(r.key).unwrap(),
                    String::from_utf8(r.value).unwrap().parse().unwrap(),
                )
            })
            .collect();
        let mut oracle: HashMap<String, i64> = HashMap::new();
        for w in std::str::from_utf8(text).unwrap().split_whitespace() {
            *oracle.entry(w.to_string()).or_default() += 1;
        }
        assert_eq!(got, oracle);
    }
}
