//! Session persistence.
//!
//! Each session owns one session document, one append-only trail of
//! newline-terminated records, and a blob store for full model transcripts.
//! Stores deal in raw lines; record structure belongs to the audit module.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::ids::SessionId;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("session `{0}` does not exist in the store")]
    Missing(String),
    #[error("session `{0}` already exists in the store")]
    AlreadyExists(String),
    #[error("storage failure: {0}")]
    Injected(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Complete trail lines plus any unterminated tail left by an interrupted write.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrailLines {
    pub lines: Vec<String>,
    pub torn_tail: Option<String>,
}

impl TrailLines {
    fn parse(text: &str) -> Self {
        let (complete, tail) = match text.rfind('\n') {
            Some(i) => (&text[..i], &text[i + 1..]),
            None => ("", text),
        };
        let lines = if complete.is_empty() && !text.starts_with('\n') {
            Vec::new()
        } else {
            complete.split('\n').map(str::to_owned).collect()
        };
        Self {
            lines,
            torn_tail: (!tail.is_empty()).then(|| tail.to_owned()),
        }
    }
}

pub trait SessionStore: Send + Sync {
    /// Creates the session's storage and writes the trail's first line.
    fn create_session(&self, id: &SessionId, header_line: &str) -> Result<(), StoreError>;

    /// Durably appends one line to the trail.
    fn append_line(&self, id: &SessionId, line: &str) -> Result<(), StoreError>;

    fn read_trail(&self, id: &SessionId) -> Result<TrailLines, StoreError>;

    /// Drops an unterminated tail; returns whether anything was removed.
    fn repair_trail(&self, id: &SessionId) -> Result<bool, StoreError>;

    /// Replaces the session document atomically.
    fn write_session_document(&self, id: &SessionId, text: &str) -> Result<(), StoreError>;

    fn read_session_document(&self, id: &SessionId) -> Result<Option<String>, StoreError>;

    fn put_blob(&self, id: &SessionId, digest: &str, bytes: &[u8]) -> Result<(), StoreError>;

    fn get_blob(&self, id: &SessionId, digest: &str) -> Result<Option<Vec<u8>>, StoreError>;

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError>;

    fn exists(&self, id: &SessionId) -> Result<bool, StoreError> {
        Ok(self.list_sessions()?.contains(id))
    }
}

/// Directory-per-session store: `root/sessions/<id>/{session.json, trail.ndjson, blobs/}`.
#[derive(Debug, Clone)]
pub struct FsStore {
    root: PathBuf,
}

impl FsStore {
    /// Opens (and creates if needed) a store rooted at `root`, failing if the
    /// directory is not writable.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let sessions = root.join("sessions");
        fs::create_dir_all(&sessions).map_err(io_err(&sessions))?;
        let probe = sessions.join(".write-probe");
        fs::write(&probe, b"").map_err(io_err(&probe))?;
        fs::remove_file(&probe).map_err(io_err(&probe))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn session_dir(&self, id: &SessionId) -> PathBuf {
        self.root.join("sessions").join(id.as_str())
    }

    pub fn session_document_path(&self, id: &SessionId) -> PathBuf {
        self.session_dir(id).join("session.json")
    }

    pub fn trail_path(&self, id: &SessionId) -> PathBuf {
        self.session_dir(id).join("trail.ndjson")
    }

    fn blob_path(&self, id: &SessionId, digest: &str) -> PathBuf {
        self.session_dir(id)
            .join("blobs")
            .join(format!("{digest}.json"))
    }

    fn require(&self, id: &SessionId) -> Result<PathBuf, StoreError> {
        let dir = self.session_dir(id);
        if dir.is_dir() {
            Ok(dir)
        } else {
            Err(StoreError::Missing(id.0.clone()))
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(io_err(&tmp))?;
    file.write_all(bytes).map_err(io_err(&tmp))?;
    file.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

impl SessionStore for FsStore {
    fn create_session(&self, id: &SessionId, header_line: &str) -> Result<(), StoreError> {
        let dir = self.session_dir(id);
        if dir.exists() {
            return Err(StoreError::AlreadyExists(id.0.clone()));
        }
        let blobs = dir.join("blobs");
        fs::create_dir_all(&blobs).map_err(io_err(&blobs))?;
        let trail = self.trail_path(id);
        write_atomic(&trail, format!("{header_line}\n").as_bytes())
    }

    fn append_line(&self, id: &SessionId, line: &str) -> Result<(), StoreError> {
        debug_assert!(!line.contains('\n'));
        self.require(id)?;
        let path = self.trail_path(id);
        let mut file = OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut record = String::with_capacity(line.len() + 1);
        record.push_str(line);
        record.push('\n');
        file.write_all(record.as_bytes()).map_err(io_err(&path))?;
        file.sync_data().map_err(io_err(&path))
    }

    fn read_trail(&self, id: &SessionId) -> Result<TrailLines, StoreError> {
        self.require(id)?;
        let path = self.trail_path(id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(TrailLines::parse(&text))
    }

    fn repair_trail(&self, id: &SessionId) -> Result<bool, StoreError> {
        self.require(id)?;
        let path = self.trail_path(id);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let keep = text.rfind('\n').map_or(0, |i| i + 1);
        if keep == text.len() {
            return Ok(false);
        }
        let file = OpenOptions::new()
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.set_len(keep as u64).map_err(io_err(&path))?;
        file.sync_all().map_err(io_err(&path))?;
        Ok(true)
    }

    fn write_session_document(&self, id: &SessionId, text: &str) -> Result<(), StoreError> {
        self.require(id)?;
        write_atomic(&self.session_document_path(id), text.as_bytes())
    }

    fn read_session_document(&self, id: &SessionId) -> Result<Option<String>, StoreError> {
        self.require(id)?;
        let path = self.session_document_path(id);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(Some(text)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn put_blob(&self, id: &SessionId, digest: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.require(id)?;
        let path = self.blob_path(id, digest);
        if path.exists() {
            return Ok(());
        }
        write_atomic(&path, bytes)
    }

    fn get_blob(&self, id: &SessionId, digest: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.require(id)?;
        let path = self.blob_path(id, digest);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError> {
        let dir = self.root.join("sessions");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
            let entry = entry.map_err(io_err(&dir))?;
            if entry.path().join("trail.ndjson").is_file() {
                ids.push(SessionId(entry.file_name().to_string_lossy().into_owned()));
            }
        }
        ids.sort();
        Ok(ids)
    }

    fn exists(&self, id: &SessionId) -> Result<bool, StoreError> {
        Ok(self.trail_path(id).is_file())
    }
}

#[derive(Debug, Default)]
struct MemorySession {
    trail: String,
    document: Option<String>,
    blobs: HashMap<String, Vec<u8>>,
}

/// In-process store, used for evaluation runs and tests.
#[derive(Debug, Default)]
pub struct MemoryStore {
    sessions: Mutex<HashMap<SessionId, MemorySession>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn with<T>(
        &self,
        id: &SessionId,
        f: impl FnOnce(&mut MemorySession) -> T,
    ) -> Result<T, StoreError> {
        let mut sessions = self.sessions.lock().expect("memory store poisoned");
        let session = sessions
            .get_mut(id)
            .ok_or_else(|| StoreError::Missing(id.0.clone()))?;
        Ok(f(session))
    }

    /// Raw trail text, for tests that tamper with it.
    pub fn trail_text(&self, id: &SessionId) -> Option<String> {
        self.with(id, |s| s.trail.clone()).ok()
    }

    pub fn set_trail_text(&self, id: &SessionId, text: String) -> Result<(), StoreError> {
        self.with(id, |s| s.trail = text)
    }
}

impl SessionStore for MemoryStore {
    fn create_session(&self, id: &SessionId, header_line: &str) -> Result<(), StoreError> {
        let mut sessions = self.sessions.lock().expect("memory store poisoned");
        if sessions.contains_key(id) {
            return Err(StoreError::AlreadyExists(id.0.clone()));
        }
        sessions.insert(
            id.clone(),
            MemorySession {
                trail: format!("{header_line}\n"),
                ..MemorySession::default()
            },
        );
        Ok(())
    }

    fn append_line(&self, id: &SessionId, line: &str) -> Result<(), StoreError> {
        self.with(id, |s| {
            s.trail.push_str(line);
            s.trail.push('\n');
        })
    }

    fn read_trail(&self, id: &SessionId) -> Result<TrailLines, StoreError> {
        self.with(id, |s| TrailLines::parse(&s.trail))
    }

    fn repair_trail(&self, id: &SessionId) -> Result<bool, StoreError> {
        self.with(id, |s| {
            let keep = s.trail.rfind('\n').map_or(0, |i| i + 1);
            let torn = keep != s.trail.len();
            s.trail.truncate(keep);
            torn
        })
    }

    fn write_session_document(&self, id: &SessionId, text: &str) -> Result<(), StoreError> {
        self.with(id, |s| s.document = Some(text.to_owned()))
    }

    fn read_session_document(&self, id: &SessionId) -> Result<Option<String>, StoreError> {
        self.with(id, |s| s.document.clone())
    }

    fn put_blob(&self, id: &SessionId, digest: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.with(id, |s| {
            s.blobs
                .entry(digest.to_owned())
                .or_insert_with(|| bytes.to_vec());
        })
    }

    fn get_blob(&self, id: &SessionId, digest: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.with(id, |s| s.blobs.get(digest).cloned())
    }

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError> {
        let mut ids: Vec<SessionId> = self
            .sessions
            .lock()
            .expect("memory store poisoned")
            .keys()
            .cloned()
            .collect();
        ids.sort();
        Ok(ids)
    }
}

/// Wraps a store and fails trail appends on demand.
///
/// `fail_appends_from(n)` makes the n-th and every later append (1-based,
/// counted from construction) fail with an injected error.
#[derive(Debug)]
pub struct FaultyStore {
    inner: Arc<dyn SessionStore>,
    appends: AtomicU64,
    fail_from: AtomicU64,
}

impl std::fmt::Debug for dyn SessionStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SessionStore")
    }
}

impl FaultyStore {
    pub fn new(inner: Arc<dyn SessionStore>) -> Self {
        Self {
            inner,
            appends: AtomicU64::new(0),
            fail_from: AtomicU64::new(u64::MAX),
        }
    }

    pub fn fail_appends_from(&self, n: u64) {
        self.fail_from.store(n, Ordering::SeqCst);
    }

    /// Fails every append from now on.
    pub fn fail_next_appends(&self) {
        self.fail_from
            .store(self.appends.load(Ordering::SeqCst) + 1, Ordering::SeqCst);
    }

    pub fn heal(&self) {
        self.fail_from.store(u64::MAX, Ordering::SeqCst);
    }

    pub fn appends(&self) -> u64 {
        self.appends.load(Ordering::SeqCst)
    }
}

impl SessionStore for FaultyStore {
    fn create_session(&self, id: &SessionId, header_line: &str) -> Result<(), StoreError> {
        self.inner.create_session(id, header_line)
    }

    fn append_line(&self, id: &SessionId, line: &str) -> Result<(), StoreError> {
        let n = self.appends.fetch_add(1, Ordering::SeqCst) + 1;
        if n >= self.fail_from.load(Ordering::SeqCst) {
            return Err(StoreError::Injected(format!("append {n} refused")));
        }
        self.inner.append_line(id, line)
    }

    fn read_trail(&self, id: &SessionId) -> Result<TrailLines, StoreError> {
        self.inner.read_trail(id)
    }

    fn repair_trail(&self, id: &SessionId) -> Result<bool, StoreError> {
        self.inner.repair_trail(id)
    }

    fn write_session_document(&self, id: &SessionId, text: &str) -> Result<(), StoreError> {
        self.inner.write_session_document(id, text)
    }

    fn read_session_document(&self, id: &SessionId) -> Result<Option<String>, StoreError> {
        self.inner.read_session_document(id)
    }

    fn put_blob(&self, id: &SessionId, digest: &str, bytes: &[u8]) -> Result<(), StoreError> {
        self.inner.put_blob(id, digest, bytes)
    }

    fn get_blob(&self, id: &SessionId, digest: &str) -> Result<Option<Vec<u8>>, StoreError> {
        self.inner.get_blob(id, digest)
    }

    fn list_sessions(&self) -> Result<Vec<SessionId>, StoreError> {
        self.inner.list_sessions()
    }
}
