use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use super::{ByteRange, ObjectInfo, ObjectPath, ObjectStore, StoreError, UploadSink};

type Buckets = BTreeMap<String, BTreeMap<String, Arc<Vec<u8>>>>;

/// Process-local object store.
#[derive(Debug, Default, Clone)]
pub struct MemoryStore {
    inner: Arc<Inner>,
}

#[derive(Debug, Default)]
struct Inner {
    objects: Mutex<Buckets>,
    unavailable: AtomicBool,
    completed_uploads: AtomicUsize,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Simulates an outage: every call fails with `StoreUnavailable` until
    /// re-enabled.
    pub fn set_available(&self, available: bool) {
        self.inner.unavailable.store(!available, Ordering::SeqCst);
    }

    /// Number of multipart uploads committed so far.
    pub fn completed_multipart_uploads(&self) -> usize {
        self.inner.completed_uploads.load(Ordering::SeqCst)
    }

    fn check(&self) -> Result<(), StoreError> {
        if self.inner.unavailable.load(Ordering::SeqCst) {
            Err(StoreError::StoreUnavailable("memory store disabled".into()))
        } else {
            Ok(())
        }
    }

    fn get(&self, path: &ObjectPath) -> Result<Arc<Vec<u8>>, StoreError> {
        self.check()?;
        let objects = self.inner.objects.lock().unwrap();
        objects
            .get(path.bucket())
            .and_then(|b| b.get(path.key()))
            .cloned()
            .ok_or_else(|| StoreError::NoSuchObject(path.to_string()))
    }
}

impl ObjectStore for MemoryStore {
    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> Result<(), StoreError> {
        self.check()?;
        let mut objects = self.inner.objects.lock().unwrap();
        objects
            .entry(path.bucket().to_string())
            .or_default()
            .insert(path.key().to_string(), Arc::new(payload.to_vec()));
        Ok(())
    }

    fn get_object_range(&self, path: &ObjectPath, range: ByteRange) -> Result<Vec<u8>, StoreError> {
        let data = self.get(path)?;
        let size = data.len() as u64;
        if range.start() >= size {
            return Err(StoreError::InvalidRange {
                path: path.to_string(),
                start: range.start(),
                end: range.end(),
                size,
            });
        }
        let end = range.end().min(size);
        Ok(data[range.start() as usize..end as usize].to_vec())
    }

    fn list_objects(&self, bucket: &str, prefix: &str) -> Result<Vec<ObjectInfo>, StoreError> {
        self.check()?;
        let objects = self.inner.objects.lock().unwrap();
        let Some(b) = objects.get(bucket) else {
            return Ok(Vec::new());
        };
        // BTreeMap<String> iterates in bytewise key order.
        b.range(prefix.to_string()..)
            .take_while(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| {
                Ok(ObjectInfo {
                    path: ObjectPath::new(bucket, k.clone())?,
                    size: v.len() as u64,
                })
            })
            .collect()
    }

    fn object_size(&self, path: &ObjectPath) -> Result<u64, StoreError> {
        Ok(self.get(path)?.len() as u64)
    }

    fn delete_object(&self, path: &ObjectPath) -> Result<(), StoreError> {
        self.check()?;
        let mut objects = self.inner.objects.lock().unwrap();
        if let Some(b) = objects.get_mut(path.bucket()) {
            b.remove(path.key());
        }
        Ok(())
    }

    fn start_upload(&self, path: &ObjectPath) -> Result<Box<dyn UploadSink>, StoreError> {
        self.check()?;
        Ok(Box::new(MemoryUpload {
            store: self.clone(),
            path: path.clone(),
            data: Vec::new(),
        }))
    }
}

struct MemoryUpload {
    store: MemoryStore,
    path: ObjectPath,
    data: Vec<u8>,
}

impl UploadSink for MemoryUpload {
    fn put_part(&mut self, _part_number: u32, bytes: &[u8]) -> Result<(), StoreError> {
        self.store.check()?;
        self.data.extend_from_slice(bytes);
        Ok(())
    }

    fn complete(self: Box<Self>) -> Result<(), StoreError> {
        self.store.put_object(&self.path, &self.data)?;
        self.store
            .inner
            .completed_uploads
            .fetch_add(1, Ordering::SeqCst);
        Ok(())
    }

    fn abort(self: Box<Self>) -> Result<(), StoreError> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn outage_reports_unavailable() {
        let s = MemoryStore::new();
        s.set_available(false);
        let p = ObjectPath::new("b", "x").unwrap();
        assert!(matches!(s.put_object(&p, b"a"), Err(StoreError::StoreUnavailable(_))));
        s.set_available(true);
        s.put_object(&p, b"a").unwrap();
    }
}
