//! Storage interface: versioned documents with optimistic concurrency and
//! append-only record streams.
//!
//! [`FileStore`] lays data out under a root directory:
//!
//! ```text
//! root/
//!   studies/<study>/study.doc
//!   studies/<study>/sessions/<key>.doc
//!   studies/<study>/responses/<key>.doc
//!   studies/<study>/events.log
//!   admin_accounts/<key>.doc
//!   credentials/<key>.doc
//!   provider_configs/<key>.doc
//! ```
//!
//! A document file starts with a `version <n>` line followed by the body.
//! Writes go to a temporary file that is synced and renamed over the old one.
//! Streams are newline-delimited; a record is acknowledged only after its
//! line has been synced, and a torn trailing line is discarded on open.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Collection {
    Studies,
    Sessions,
    Responses,
    AdminAccounts,
    Credentials,
    /// Non-secret provider settings, keyed by the reference studies use.
    ProviderConfigs,
}

impl Collection {
    /// Study-scoped collections take keys of the form `<study>/<name>`.
    pub fn is_study_scoped(self) -> bool {
        matches!(self, Collection::Sessions | Collection::Responses)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DocumentRef {
    pub collection: Collection,
    pub key: String,
}

impl DocumentRef {
    pub fn new(collection: Collection, key: impl Into<String>) -> Self {
        Self { collection, key: key.into() }
    }

    pub fn scoped(collection: Collection, study: &str, name: &str) -> Self {
        Self::new(collection, format!("{study}/{name}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Versioned<T> {
    pub version: u64,
    pub value: T,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("version conflict: expected {expected}, stored {actual}")]
    VersionConflict { expected: u64, actual: u64 },
    #[error("invalid storage key {0:?}")]
    InvalidKey(String),
    #[error("stream records may not contain newlines")]
    InvalidRecord,
    #[error("corrupt document {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("storage failure: {0}")]
    Io(#[from] io::Error),
    #[error("serialization failure: {0}")]
    Serde(#[from] serde_json::Error),
}

pub trait Store: Send + Sync {
    fn get(&self, doc: &DocumentRef) -> Result<Option<Versioned<Vec<u8>>>, StoreError>;

    /// Writes `value` if the stored version equals `expected_version` (0 for
    /// a document that does not exist yet). Returns the new version.
    fn put(&self, doc: &DocumentRef, value: &[u8], expected_version: u64) -> Result<u64, StoreError>;

    fn delete(&self, doc: &DocumentRef, expected_version: u64) -> Result<(), StoreError>;

    /// Keys in `collection`. Study-scoped collections need `study`.
    fn list(&self, collection: Collection, study: Option<&str>) -> Result<Vec<String>, StoreError>;

    /// Appends one record and returns its offset (0-based, dense).
    fn append(&self, stream: &str, record: &[u8]) -> Result<u64, StoreError>;

    /// Records from `from` onward, in offset order. Unknown streams are empty.
    fn scan(&self, stream: &str, from: u64) -> Result<Vec<Vec<u8>>, StoreError>;

    /// Every stream key that has been written.
    fn streams(&self) -> Result<Vec<String>, StoreError>;
}

/// JSON convenience layer over any [`Store`].
pub trait StoreExt: Store {
    fn get_json<T: DeserializeOwned>(&self, doc: &DocumentRef) -> Result<Option<Versioned<T>>, StoreError> {
        match self.get(doc)? {
            None => Ok(None),
            Some(v) => Ok(Some(Versioned { version: v.version, value: serde_json::from_slice(&v.value)? })),
        }
    }

    fn put_json<T: Serialize>(&self, doc: &DocumentRef, value: &T, expected_version: u64) -> Result<u64, StoreError> {
        self.put(doc, &serde_json::to_vec_pretty(value)?, expected_version)
    }
}

impl<S: Store + ?Sized> StoreExt for S {}

struct StreamFile {
    file: File,
    len: u64,
}

pub struct FileStore {
    root: PathBuf,
    doc_locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
    streams: Mutex<HashMap<String, Arc<Mutex<Option<StreamFile>>>>>,
}

fn check_component(c: &str) -> bool {
    !c.is_empty()
        && !c.starts_with('.')
        && c.chars().all(|ch| ch.is_ascii_alphanumeric() || matches!(ch, '-' | '_' | '.'))
}

/// Whether `s` can be used as one path component of a storage key.
pub fn is_valid_key_component(s: &str) -> bool {
    check_component(s)
}

impl FileStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            doc_locks: Mutex::new(HashMap::new()),
            streams: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn doc_path(&self, doc: &DocumentRef) -> Result<PathBuf, StoreError> {
        let parts: Vec<&str> = doc.key.split('/').collect();
        if !parts.iter().all(|p| check_component(p)) {
            return Err(StoreError::InvalidKey(doc.key.clone()));
        }
        let bad = || StoreError::InvalidKey(doc.key.clone());
        Ok(match doc.collection {
            Collection::Studies => {
                let [study] = parts.as_slice() else { return Err(bad()) };
                self.root.join("studies").join(study).join("study.doc")
            }
            Collection::Sessions | Collection::Responses => {
                let [study, name] = parts.as_slice() else { return Err(bad()) };
                let dir = if doc.collection == Collection::Sessions { "sessions" } else { "responses" };
                self.root.join("studies").join(study).join(dir).join(format!("{name}.doc"))
            }
            Collection::AdminAccounts | Collection::Credentials | Collection::ProviderConfigs => {
                let [name] = parts.as_slice() else { return Err(bad()) };
                self.root.join(top_dir(doc.collection)).join(format!("{name}.doc"))
            }
        })
    }

    fn stream_path(&self, stream: &str) -> Result<PathBuf, StoreError> {
        if !stream.split('/').all(check_component) {
            return Err(StoreError::InvalidKey(stream.to_owned()));
        }
        Ok(self.root.join(format!("{stream}.log")))
    }

    fn doc_lock(&self, path: &Path) -> Arc<Mutex<()>> {
        let mut locks = self.doc_locks.lock().expect("lock table poisoned");
        locks.entry(path.to_path_buf()).or_default().clone()
    }

    fn read_doc(path: &Path) -> Result<Option<Versioned<Vec<u8>>>, StoreError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| StoreError::Corrupt { path: path.display().to_string(), reason: reason.into() };
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| corrupt("missing header"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| corrupt("header is not utf-8"))?;
        let version = header
            .strip_prefix("version ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| corrupt("bad version header"))?;
        Ok(Some(Versioned { version, value: bytes[nl + 1..].to_vec() }))
    }

    fn stream_handle(&self, stream: &str) -> Arc<Mutex<Option<StreamFile>>> {
        let mut map = self.streams.lock().expect("stream table poisoned");
        map.entry(stream.to_owned()).or_default().clone()
    }

    /// Opens a stream for appending, dropping any unacknowledged partial
    /// record left by a crash.
    fn open_stream(path: &Path) -> Result<StreamFile, StoreError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut contents = Vec::new();
        file.read_to_end(&mut contents)?;
        let complete = contents.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        if complete < contents.len() {
            file.set_len(complete as u64)?;
            file.sync_all()?;
        }
        let len = contents[..complete].iter().filter(|&&b| b == b'\n').count() as u64;
        Ok(StreamFile { file, len })
    }
}

fn top_dir(collection: Collection) -> &'static str {
    match collection {
        Collection::AdminAccounts => "admin_accounts",
        Collection::Credentials => "credentials",
        _ => "provider_configs",
    }
}

fn sync_dir(dir: &Path) -> io::Result<()> {
    // Directory fsync is how renames become durable on Linux.
    File::open(dir)?.sync_all()
}

impl Store for FileStore {
    fn get(&self, doc: &DocumentRef) -> Result<Option<Versioned<Vec<u8>>>, StoreError> {
        let path = self.doc_path(doc)?;
        let lock = self.doc_lock(&path);
        let _guard = lock.lock().expect("document lock poisoned");
        Self::read_doc(&path)
    }

    fn put(&self, doc: &DocumentRef, value: &[u8], expected_version: u64) -> Result<u64, StoreError> {
        let path = self.doc_path(doc)?;
        let lock = self.doc_lock(&path);
        let _guard = lock.lock().expect("document lock poisoned");

        let actual = Self::read_doc(&path)?.map_or(0, |d| d.version);
        if actual != expected_version {
            return Err(StoreError::VersionConflict { expected: expected_version, actual });
        }
        let version = actual + 1;
        let dir = path.parent().expect("document paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = path.with_extension("doc.tmp");
        {
            let mut f = File::create(&tmp)?;
            write!(f, "version {version}\n")?;
            f.write_all(value)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        sync_dir(dir)?;
        Ok(version)
    }

    fn delete(&self, doc: &DocumentRef, expected_version: u64) -> Result<(), StoreError> {
        let path = self.doc_path(doc)?;
        let lock = self.doc_lock(&path);
        let _guard = lock.lock().expect("document lock poisoned");
        let actual = Self::read_doc(&path)?.map_or(0, |d| d.version);
        if actual != expected_version {
            return Err(StoreError::VersionConflict { expected: expected_version, actual });
        }
        if actual > 0 {
            fs::remove_file(&path)?;
            sync_dir(path.parent().expect("document paths have a parent"))?;
        }
        Ok(())
    }

    fn list(&self, collection: Collection, study: Option<&str>) -> Result<Vec<String>, StoreError> {
        let (dir, prefix) = match (collection, study) {
            (Collection::Studies, _) => {
                let dir = self.root.join("studies");
                let mut keys = Vec::new();
                if dir.is_dir() {
                    for entry in fs::read_dir(&dir)? {
                        let entry = entry?;
                        let name = entry.file_name().to_string_lossy().into_owned();
                        if check_component(&name) && entry.path().join("study.doc").is_file() {
                            keys.push(name);
                        }
                    }
                }
                keys.sort();
                return Ok(keys);
            }
            (Collection::Sessions | Collection::Responses, Some(study)) => {
                if !check_component(study) {
                    return Err(StoreError::InvalidKey(study.to_owned()));
                }
                let sub = if collection == Collection::Sessions { "sessions" } else { "responses" };
                (self.root.join("studies").join(study).join(sub), format!("{study}/"))
            }
            (Collection::Sessions | Collection::Responses, None) => {
                return Err(StoreError::InvalidKey("study-scoped listing needs a study".into()))
            }
            (c, _) => (self.root.join(top_dir(c)), String::new()),
        };
        let mut keys = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(&dir)? {
                let name = entry?.file_name().to_string_lossy().into_owned();
                if let Some(stem) = name.strip_suffix(".doc") {
                    keys.push(format!("{prefix}{stem}"));
                }
            }
        }
        keys.sort();
        Ok(keys)
    }

    fn append(&self, stream: &str, record: &[u8]) -> Result<u64, StoreError> {
        if record.contains(&b'\n') {
            return Err(StoreError::InvalidRecord);
        }
        let path = self.stream_path(stream)?;
        let handle = self.stream_handle(stream);
        let mut slot = handle.lock().expect("stream lock poisoned");
        if slot.is_none() {
            *slot = Some(Self::open_stream(&path)?);
        }
        let sf = slot.as_mut().expect("stream opened above");

        let mut line = Vec::with_capacity(record.len() + 1);
        line.extend_from_slice(record);
        line.push(b'\n');
        let before = sf.file.metadata()?.len();
        if let Err(e) = sf.file.write_all(&line).and_then(|_| sf.file.sync_data()) {
            // Leave no half-written record behind.
            let _ = sf.file.set_len(before);
            return Err(e.into());
        }
        let offset = sf.len;
        sf.len += 1;
        Ok(offset)
    }

    fn scan(&self, stream: &str, from: u64) -> Result<Vec<Vec<u8>>, StoreError> {
        let path = self.stream_path(stream)?;
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(e.into()),
        };
        // Only newline-terminated records are acknowledged.
        let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
        let mut records: Vec<&[u8]> = bytes[..complete].split(|&b| b == b'\n').collect();
        // the split after the final newline is empty
        records.pop();
        Ok(records.into_iter().skip(from as usize).map(<[u8]>::to_vec).collect())
    }

    fn streams(&self) -> Result<Vec<String>, StoreError> {
        fn walk(root: &Path, dir: &Path, out: &mut Vec<String>) -> io::Result<()> {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    walk(root, &path, out)?;
                } else if path.extension().is_some_and(|e| e == "log") {
                    let rel = path.strip_prefix(root).expect("walk stays under root").with_extension("");
                    out.push(rel.to_string_lossy().replace('\\', "/"));
                }
            }
            Ok(())
        }
        let mut out = Vec::new();
        walk(&self.root, &self.root, &mut out)?;
        out.sort();
        Ok(out)
    }
}
