use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use walkdir::WalkDir;

use super::{ByteRange, ObjectInfo, ObjectPath, ObjectStore, StoreError, UploadSink};

const STAGING_DIR: &str = ".staging";

/// Directory-backed store laid out as `<root>/<bucket>/<key>`.
///
/// Writes land in `<root>/.staging/` and are renamed into place on commit,
/// so readers see either the old object or the new one, never a partial
/// file. The root must already exist.
#[derive(Debug, Clone)]
pub struct LocalStore {
    root: PathBuf,
}

fn map_io(err: io::Error, what: &dyn std::fmt::Display) -> StoreError {
    match err.kind() {
        io::ErrorKind::NotFound => StoreError::NoSuchObject(what.to_string()),
        io::ErrorKind::PermissionDenied => StoreError::AccessDenied(format!("{what}: {err}")),
        _ => StoreError::StoreUnavailable(format!("{what}: {err}")),
    }
}

fn unavailable(err: io::Error, what: &dyn std::fmt::Display) -> StoreError {
    match err.kind() {
        io::ErrorKind::PermissionDenied => StoreError::AccessDenied(format!("{what}: {err}")),
        _ => StoreError::StoreUnavailable(format!("{what}: {err}")),
    }
}

impl LocalStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        LocalStore { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_root(&self) -> Result<(), StoreError> {
        if self.root.is_dir() {
            Ok(())
        } else {
            Err(StoreError::StoreUnavailable(format!(
                "store root {} is not a directory",
                self.root.display()
            )))
        }
    }

    fn file_path(&self, path: &ObjectPath) -> PathBuf {
        let mut p = self.root.join(path.bucket());
        p.extend(path.key().split('/'));
        p
    }

    fn staging_file(&self) -> Result<(PathBuf, File), StoreError> {
        let dir = self.root.join(STAGING_DIR);
        fs::create_dir_all(&dir).map_err(|e| unavailable(e, &dir.display()))?;
        let path = dir.join(uuid::Uuid::new_v4().simple().to_string());
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| unavailable(e, &path.display()))?;
        Ok((path, file))
    }

    fn commit(&self, staged: &Path, path: &ObjectPath) -> Result<(), StoreError> {
        let dest = self.file_path(path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).map_err(|e| unavailable(e, path))?;
        }
        if dest.is_dir() {
            let _ = fs::remove_file(staged);
            return Err(StoreError::InvalidPath(format!(
                "{path} collides with an existing key prefix"
            )));
        }
        fs::rename(staged, &dest).map_err(|e| {
            let _ = fs::remove_file(staged);
            unavailable(e, path)
        })
    }
}

impl ObjectStore for LocalStore {
    fn put_object(&self, path: &ObjectPath, payload: &[u8]) -> Result<(), StoreError> {
        self.check_root()?;
        let (staged, mut file) = self.staging_file()?;
        if let Err(e) = file.write_all(payload) {
            let _ = fs::remove_file(&staged);
            return Err(unavailable(e, path));
        }
        drop(file);
        self.commit(&staged, path)
    }

    fn get_object_range(&self, path: &ObjectPath, range: ByteRange) -> Result<Vec<u8>, StoreError> {
        self.check_root()?;
        let fp = self.file_path(path);
        if fp.is_dir() {
            return Err(StoreError::NoSuchObject(path.to_string()));
        }
        let mut file = File::open(&fp).map_err(|e| map_io(e, path))?;
        let size = file.metadata().map_err(|e| map_io(e, path))?.len();
        if range.start() >= size {
            return Err(StoreError::InvalidRange {
                path: path.to_string(),
                start: range.start(),
                end: range.end(),
                size,
            });
        }
        let len = range.end().min(size) - range.start();
        file.seek(SeekFrom::Start(range.start()))
            .map_err(|e| map_io(e, path))?;
        let mut out = Vec::with_capacity(len as usize);
        file.take(len)
            .read_to_end(&mut out)
            .map_err(|e| map_io(e, path))?;
        Ok(out)
    }

    fn list_objects(&self, bucket: &str, prefix: &str) -> Result<Vec<ObjectInfo>, StoreError> {
        self.check_root()?;
        let base = self.root.join(bucket);
        if !base.is_dir() {
            return Ok(Vec::new());
        }
        // Only descend into the directory that can contain the prefix.
        let dir_part = match prefix.rfind('/') {
            Some(i) => &prefix[..i],
            None => "",
        };
        let mut start = base.clone();
        if !dir_part.is_empty() {
            start.extend(dir_part.split('/'));
        }
        if !start.is_dir() {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for entry in WalkDir::new(&start).follow_links(false) {
            let entry = entry.map_err(|e| {
                StoreError::StoreUnavailable(format!("listing {bucket}/{prefix}: {e}"))
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let rel = entry
                .path()
                .strip_prefix(&base)
                .expect("walk stays under the bucket directory");
            let key = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            if !key.starts_with(prefix) {
                continue;
            }
            let size = entry
                .metadata()
                .map_err(|e| StoreError::StoreUnavailable(e.to_string()))?
                .len();
            out.push(ObjectInfo {
                path: ObjectPath::new(bucket, key)?,
                size,
            });
        }
        out.sort_by(|a, b| a.path.key().as_bytes().cmp(b.path.key().as_bytes()));
        Ok(out)
    }

    fn object_size(&self, path: &ObjectPath) -> Result<u64, StoreError> {
        self.check_root()?;
        let fp = self.file_path(path);
        let meta = fs::metadata(&fp).map_err(|e| map_io(e, path))?;
        if !meta.is_file() {
            return Err(StoreError::NoSuchObject(path.to_string()));
        }
        Ok(meta.len())
    }

    fn delete_object(&self, path: &ObjectPath) -> Result<(), StoreError> {
        self.check_root()?;
        match fs::remove_file(self.file_path(path)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(unavailable(e, path)),
        }
    }

    fn start_upload(&self, path: &ObjectPath) -> Result<Box<dyn UploadSink>, StoreError> {
        self.check_root()?;
        let (staged, file) = self.staging_file()?;
        Ok(Box::new(LocalUpload {
            store: self.clone(),
            path: path.clone(),
            staged,
            file: Some(file),
        }))
    }
}

struct LocalUpload {
    store: LocalStore,
    path: ObjectPath,
    staged: PathBuf,
    file: Option<File>,
}

impl UploadSink for LocalUpload {
    fn put_part(&mut self, _part_number: u32, bytes: &[u8]) -> Result<(), StoreError> {
        let file = self
            .file
            .as_mut()
            .ok_or_else(|| StoreError::AbortedUpload(self.path.to_string()))?;
        file.write_all(bytes).map_err(|e| unavailable(e, &self.path))
    }

    fn complete(mut self: Box<Self>) -> Result<(), StoreError> {
        drop(self.file.take());
        self.store.commit(&self.staged, &self.path)
    }

    fn abort(mut self: Box<Self>) -> Result<(), StoreError> {
        drop(self.file.take());
        match fs::remove_file(&self.staged) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(unavailable(e, &self.path)),
        }
    }
}
