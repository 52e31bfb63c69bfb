use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use super::{KvBackend, MetaError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KvValue {
    Bytes(Vec<u8>),
    Set(BTreeSet<String>),
}

#[derive(Debug, Default)]
struct Inner {
    map: Mutex<BTreeMap<String, KvValue>>,
    down: AtomicBool,
}

/// Process-local backend. Clones share the same data.
#[derive(Debug, Clone, Default)]
pub struct MemoryKv {
    inner: Arc<Inner>,
}

impl MemoryKv {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulates an outage: every call fails with `Unavailable` until
    /// re-enabled.
    pub fn set_available(&self, available: bool) {
        self.inner.down.store(!available, Ordering::SeqCst);
    }

    /// A copy of every key and value, for before/after comparisons.
    pub fn snapshot(&self) -> BTreeMap<String, KvValue> {
        self.inner.map.lock().unwrap().clone()
    }

    fn lock(&self) -> Result<MutexGuard<'_, BTreeMap<String, KvValue>>, MetaError> {
        if self.inner.down.load(Ordering::SeqCst) {
            return Err(MetaError::Unavailable("memory metastore disabled".into()));
        }
        Ok(self.inner.map.lock().unwrap_or_else(|p| p.into_inner()))
    }
}

fn wrong_type(key: &str) -> MetaError {
    MetaError::Corrupt {
        key: key.to_string(),
        reason: "value has the wrong type".into(),
    }
}

fn bytes_of<'a>(map: &'a BTreeMap<String, KvValue>, key: &str) -> Result<Option<&'a [u8]>, MetaError> {
    match map.get(key) {
        None => Ok(None),
        Some(KvValue::Bytes(b)) => Ok(Some(b)),
        Some(KvValue::Set(_)) => Err(wrong_type(key)),
    }
}

impl KvBackend for MemoryKv {
    fn get(&self, key: &str) -> Result<Option<Vec<u8>>, MetaError> {
        let map = self.lock()?;
        Ok(bytes_of(&map, key)?.map(<[u8]>::to_vec))
    }

    fn set(&self, key: &str, value: &[u8]) -> Result<(), MetaError> {
        self.lock()?.insert(key.to_string(), KvValue::Bytes(value.to_vec()));
        Ok(())
    }

    fn set_if_absent(&self, key: &str, value: &[u8]) -> Result<bool, MetaError> {
        let mut map = self.lock()?;
        if map.contains_key(key) {
            return Ok(false);
        }
        map.insert(key.to_string(), KvValue::Bytes(value.to_vec()));
        Ok(true)
    }

    fn update(
        &self,
        key: &str,
        f: &mut dyn FnMut(Option<&[u8]>) -> Result<Vec<u8>, MetaError>,
    ) -> Result<Vec<u8>, MetaError> {
        let mut map = self.lock()?;
        let next = f(bytes_of(&map, key)?)?;
        map.insert(key.to_string(), KvValue::Bytes(next.clone()));
        Ok(next)
    }

    fn guarded_set_add(
        &self,
        guard: &str,
        check: &mut dyn FnMut(Option<&[u8]>) -> Result<(), MetaError>,
        set_key: &str,
        member: &str,
    ) -> Result<usize, MetaError> {
        let mut map = self.lock()?;
        check(bytes_of(&map, guard)?)?;
        let entry = map
            .entry(set_key.to_string())
            .or_insert_with(|| KvValue::Set(BTreeSet::new()));
        match entry {
            KvValue::Set(s) => {
                s.insert(member.to_string());
                Ok(s.len())
            }
            KvValue::Bytes(_) => Err(wrong_type(set_key)),
        }
    }

    fn set_len(&self, set_key: &str) -> Result<usize, MetaError> {
        match self.lock()?.get(set_key) {
            None => Ok(0),
            Some(KvValue::Set(s)) => Ok(s.len()),
            Some(KvValue::Bytes(_)) => Err(wrong_type(set_key)),
        }
    }

    fn keys_with_prefix(&self, prefix: &str) -> Result<Vec<String>, MetaError> {
        let map = self.lock()?;
        Ok(map
            .range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, _)| k.clone())
            .collect())
    }

    fn delete(&self, keys: &[String]) -> Result<usize, MetaError> {
        let mut map = self.lock()?;
        Ok(keys.iter().filter(|k| map.remove(k.as_str()).is_some()).count())
    }
}
