//! Object storage: flat, key-addressed, immutable objects.
//!
//! Three backends implement [`ObjectStore`]: [`LocalStore`] (a directory
//! tree), [`MemoryStore`] (process-local, for tests and embedded runs) and
//! [`S3Store`] (any S3-compatible HTTP endpoint). Writers either put a whole
//! object or stream it through a [`MultipartUpload`]; in both cases the
//! object becomes visible atomically when the write commits.

mod local;
mod memory;
mod s3;
pub mod sigv4;

use std::fmt;

use thiserror::Error;

pub use local::LocalStore;
pub use memory::MemoryStore;
pub use s3::{S3Config, S3Store};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("object store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("access denied: {0}")]
    AccessDenied(String),
    #[error("no such object: {0}")]
    NoSuchObject(String),
    #[error("invalid range [{start}, {end}) for {path} of size {size}")]
    InvalidRange {
        path: String,
        start: u64,
        end: u64,
        size: u64,
    },
    #[error("multipart part {part_number} is {size} bytes, below the {min} byte minimum")]
    PartTooSmall { part_number: u32, size: u64, min: u64 },
    #[error("multipart upload to {0} was aborted")]
    AbortedUpload(String),
    #[error("invalid object path: {0}")]
    InvalidPath(String),
}

/// Bucket plus slash-separated key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "RawObjectPath")]
pub struct ObjectPath {
    bucket: String,
    key: String,
}

impl ObjectPath {
    pub fn new(bucket: impl Into<String>, key: impl Into<String>) -> Result<Self, StoreError> {
        let bucket = bucket.into();
        let key = key.into();
        validate_bucket(&bucket)?;
        validate_key(&key)?;
        Ok(ObjectPath { bucket, key })
    }

    pub fn bucket(&self) -> &str {
        &self.bucket
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    /// Last slash-separated segment of the key.
    pub fn file_name(&self) -> &str {
        self.key.rsplit('/').next().unwrap_or(&self.key)
    }
}

impl fmt::Display for ObjectPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.bucket, self.key)
    }
}

#[derive(serde::Deserialize)]
struct RawObjectPath {
    bucket: String,
    key: String,
}

impl TryFrom<RawObjectPath> for ObjectPath {
    type Error = StoreError;
    fn try_from(raw: RawObjectPath) -> Result<Self, StoreError> {
        ObjectPath::new(raw.bucket, raw.key)
    }
}

fn validate_bucket(bucket: &str) -> Result<(), StoreError> {
    let ok = !bucket.is_empty()
        && !bucket.starts_with('.')
        && bucket
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidPath(format!("bad bucket name `{bucket}`")))
    }
}

fn validate_key(key: &str) -> Result<(), StoreError> {
    if key.is_empty() || key.starts_with('/') || key.ends_with('/') {
        return Err(StoreError::InvalidPath(format!(
            "key `{key}` must be non-empty without leading or trailing '/'"
        )));
    }
    if key.split('/').any(|seg| seg.is_empty() || seg == "." || seg == "..") {
        return Err(StoreError::InvalidPath(format!(
            "key `{key}` has an empty, `.` or `..` segment"
        )));
    }
    Ok(())
}

/// Joins a key prefix and a name with exactly one slash between them.
pub fn join_key(prefix: &str, name: &str) -> String {
    let prefix = prefix.trim_end_matches('/');
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

/// Half-open byte interval `[start, end)` with `start < end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "(u64, u64)", into = "(u64, u64)")]
pub struct ByteRange {
    start: u64,
    end: u64,
}

impl ByteRange {
    pub fn new(start: u64, end: u64) -> Option<Self> {
        (start < end).then_some(ByteRange { start, end })
    }

    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TryFrom<(u64, u64)> for ByteRange {
    type Error = String;
    fn try_from((s, e): (u64, u64)) -> Result<Self, String> {
        ByteRange::new(s, e).ok_or_else(|| format!("empty or inverted byte range [{s}, {e})"))
    }
}

impl From<ByteRange> for (u64, u64) {
    fn from(r: ByteRange) -> Self {
        (r.start, r.end)
    }
}

impl fmt::Display for ByteRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectInfo {
    pub path: ObjectPath,
    pub size: u64,
}

/// Backend half of a multipart upload. Parts arrive numbered from 1.
pub trait UploadSink: Send {
    fn put_part(&mut self, part_number: u32, bytes: &[u8]) -> Result<(), StoreError>;
    fn complete(self: Box<Self>) -> Result<(), StoreError>;
    fn abort(self: Box<Self>) -> Result<(), StoreError>;
}

pub trait ObjectStore: Send + Sync + fmt::Debug {
    /// Writes a whole object, replacing any previous content atomically.
    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> Result<(), StoreError>;

    /// Returns bytes `[start, min(end, size))`; errors if `start >= size`.
    fn get_object_range(&self, path: &ObjectPath, range: ByteRange) -> Result<Vec<u8>, StoreError>;

    /// Objects whose key starts with `prefix`, sorted bytewise by key.
    fn list_objects(&self, bucket: &str, prefix: &str) -> Result<Vec<ObjectInfo>, StoreError>;

    fn object_size(&self, path: &ObjectPath) -> Result<u64, StoreError>;

    fn delete_object(&self, path: &ObjectPath) -> Result<(), StoreError>;

    /// Starts the backend side of a multipart upload. Prefer
    /// [`ObjectStore::begin_multipart`], which also enforces part sizes.
    fn start_upload(&self, path: &ObjectPath) -> Result<Box<dyn UploadSink>, StoreError>;

    fn begin_multipart(
        &self,
        path: &ObjectPath,
        min_part_bytes: u64,
    ) -> Result<MultipartUpload, StoreError> {
        Ok(MultipartUpload {
            sink: Some(self.start_upload(path)?),
            path: path.to_string(),
            min_part_bytes,
            parts: 0,
            last_len: None,
        })
    }
}

/// An in-progress multipart upload.
///
/// Every part except the last must be at least `min_part_bytes` long; the
/// violation surfaces when the part after the short one arrives. Dropping an
/// upload without completing it aborts it.
pub struct MultipartUpload {
    sink: Option<Box<dyn UploadSink>>,
    path: String,
    min_part_bytes: u64,
    parts: u32,
    last_len: Option<u64>,
}

impl fmt::Debug for MultipartUpload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MultipartUpload")
            .field("path", &self.path)
            .field("parts", &self.parts)
            .finish()
    }
}

impl MultipartUpload {
    pub fn put_part(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        let Some(sink) = self.sink.as_mut() else {
            return Err(StoreError::AbortedUpload(self.path.clone()));
        };
        if let Some(prev) = self.last_len {
            if prev < self.min_part_bytes {
                let err = StoreError::PartTooSmall {
                    part_number: self.parts,
                    size: prev,
                    min: self.min_part_bytes,
                };
                self.abort_inner();
                return Err(err);
            }
        }
        self.parts += 1;
        if let Err(e) = sink.put_part(self.parts, bytes) {
            self.abort_inner();
            return Err(e);
        }
        self.last_len = Some(bytes.len() as u64);
        Ok(())
    }

    pub fn parts(&self) -> u32 {
        self.parts
    }

    /// Commits the object. An upload with no parts commits an empty object.
    pub fn complete(mut self) -> Result<(), StoreError> {
        let sink = self
            .sink
            .take()
            .ok_or_else(|| StoreError::AbortedUpload(self.path.clone()))?;
        sink.complete()
    }

    pub fn abort(mut self) -> Result<(), StoreError> {
        match self.sink.take() {
            Some(sink) => sink.abort(),
            None => Ok(()),
        }
    }

    fn abort_inner(&mut self) {
        if let Some(sink) = self.sink.take() {
            if let Err(e) = sink.abort() {
                log::warn!("aborting upload to {}: {e}", self.path);
            }
        }
    }
}

impl Drop for MultipartUpload {
    fn drop(&mut self) {
        self.abort_inner();
    }
}

/// Uploads `parts` as one object, aborting on the first failure.
pub fn multipart_put<I>(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    parts: I,
    min_part_bytes: u64,
) -> Result<(), StoreError>
where
    I: IntoIterator,
    I::Item: AsRef<[u8]>,
{
    let mut upload = store.begin_multipart(path, min_part_bytes)?;
    for part in parts {
        upload.put_part(part.as_ref())?;
    }
    upload.complete()
}

/// Reads a whole object. Empty objects yield an empty vector.
pub fn read_object(store: &dyn ObjectStore, path: &ObjectPath) -> Result<Vec<u8>, StoreError> {
    let size = store.object_size(path)?;
    match ByteRange::new(0, size) {
        Some(r) => store.get_object_range(path, r),
        None => Ok(Vec::new()),
    }
}

/// Streams `[start, end)` of an object in windows of at most `window` bytes.
#[derive(Debug)]
pub struct WindowReader<'a> {
    store: &'a dyn ObjectStore,
    path: ObjectPath,
    pos: u64,
    end: u64,
    window: u64,
}

impl<'a> WindowReader<'a> {
    pub fn new(store: &'a dyn ObjectStore, path: ObjectPath, start: u64, end: u64, window: u64) -> Self {
        WindowReader {
            store,
            path,
            pos: start,
            end,
            window: window.max(1),
        }
    }

    /// Reader over the whole object.
    pub fn whole(store: &'a dyn ObjectStore, path: ObjectPath, window: u64) -> Result<Self, StoreError> {
        let size = store.object_size(&path)?;
        Ok(WindowReader::new(store, path, 0, size, window))
    }

    /// Absolute offset of the next byte to be read.
    pub fn position(&self) -> u64 {
        self.pos
    }
}

impl Iterator for WindowReader<'_> {
    type Item = Result<Vec<u8>, StoreError>;

    fn next(&mut self) -> Option<Self::Item> {
        let range = ByteRange::new(self.pos, self.end.min(self.pos.saturating_add(self.window)))?;
        let res = self.store.get_object_range(&self.path, range);
        match &res {
            Ok(bytes) if bytes.is_empty() => {
                self.pos = self.end;
                return None;
            }
            Ok(bytes) => self.pos += bytes.len() as u64,
            Err(_) => self.pos = self.end,
        }
        Some(res)
    }
}

/// Buffered streaming writer that uploads fixed-size parts.
///
/// Objects that never exceed one part are written with a single put;
/// larger ones switch to a multipart upload whose parts are exactly
/// `part_bytes` long except the last.
pub struct PartWriter<'a> {
    store: &'a dyn ObjectStore,
    path: ObjectPath,
    part_bytes: usize,
    buf: Vec<u8>,
    upload: Option<MultipartUpload>,
    written: u64,
    peak_buffered: usize,
}

impl fmt::Debug for PartWriter<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PartWriter")
            .field("path", &self.path)
            .field("written", &self.written)
            .finish()
    }
}

impl<'a> PartWriter<'a> {
    pub fn new(store: &'a dyn ObjectStore, path: ObjectPath, part_bytes: u64) -> Self {
        PartWriter {
            store,
            path,
            part_bytes: part_bytes.max(1) as usize,
            buf: Vec::new(),
            upload: None,
            written: 0,
            peak_buffered: 0,
        }
    }

    pub fn write(&mut self, bytes: &[u8]) -> Result<(), StoreError> {
        self.buf.extend_from_slice(bytes);
        self.written += bytes.len() as u64;
        self.peak_buffered = self.peak_buffered.max(self.buf.len());
        // Keep at least one byte back so the final part is never empty.
        while self.buf.len() > self.part_bytes {
            if self.upload.is_none() {
                self.upload = Some(self.store.begin_multipart(&self.path, self.part_bytes as u64)?);
            }
            let upload = self.upload.as_mut().unwrap();
            upload.put_part(&self.buf[..self.part_bytes])?;
            self.buf.drain(..self.part_bytes);
        }
        Ok(())
    }

    /// Total bytes accepted so far.
    pub fn written(&self) -> u64 {
        self.written
    }

    /// Largest number of bytes held in memory at once.
    pub fn peak_buffered(&self) -> usize {
        self.peak_buffered
    }

    /// Commits the object; returns its size.
    pub fn finish(mut self) -> Result<u64, StoreError> {
        match self.upload.take() {
            None => self.store.put_object(&self.path, &self.buf)?,
            Some(mut upload) => {
                if !self.buf.is_empty() {
                    upload.put_part(&self.buf)?;
                }
                upload.complete()?;
            }
        }
        Ok(self.written)
    }

    /// Abandons the write; nothing becomes visible.
    pub fn abort(mut self) -> Result<(), StoreError> {
        match self.upload.take() {
            Some(u) => u.abort(),
            None => Ok(()),
        }
    }
}
