//! Append-only persistence: one directory per session holding JSON-lines
//! files, plus lesson manifests.
//!
//! ```text
//! <root>/lessons/<id>.json
//! <root>/sessions/<id>/meta.json
//! <root>/sessions/<id>/rows.jsonl         one EpochRecord per line
//! <root>/sessions/<id>/events.jsonl       one Transition per line
//! <root>/sessions/<id>/commands.jsonl     operator commands with their epoch
//! ```
//!
//! Appends are written with a single `write_all` and `sync_data` before
//! returning, so an `Ok` is an acknowledgment that the rows survive a crash.
//! A torn final line (no trailing newline) is ignored on read and cut off by
//! the next append.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{ErrorKind, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use eduloop_core::pipeline::EpochRecord;
use eduloop_core::session::{
    load_lesson, replay, Lesson, Policy, ReplayInput, RunMode, SessionCommand, SessionError, Transition,
};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("session {0} not found")]
    SessionNotFound(String),
    #[error("lesson {0} not found")]
    LessonNotFound(String),
    #[error("session {0} already exists")]
    Exists(String),
    #[error("invalid id {0:?}")]
    InvalidId(String),
    #[error("epoch index {got} does not follow {last} in session {session}")]
    OutOfOrder { session: String, last: u64, got: u64 },
    #[error("{path}:{line}: {message}")]
    Corrupt { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Lesson(#[from] SessionError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// What was fixed at session creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub id: String,
    pub user: String,
    pub lesson_id: String,
    pub lesson: Lesson,
    pub policy: Policy,
    pub run_mode: RunMode,
    pub step_s: f64,
    pub seed: u64,
    pub source: String,
    pub created_unix_ms: u64,
}

/// An operator command applied before epoch `before_epoch`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandRecord {
    pub before_epoch: u64,
    pub command: SessionCommand,
}

const ROWS: &str = "rows.jsonl";
const EVENTS: &str = "events.jsonl";
const COMMANDS: &str = "commands.jsonl";

#[derive(Debug)]
pub struct Store {
    root: PathBuf,
    /// Last persisted epoch per session, loaded on first append.
    last_epoch: Mutex<HashMap<String, Option<u64>>>,
}

fn check_id(id: &str) -> Result<(), StoreError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidId(id.to_string()))
    }
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["lessons", "sessions"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        Ok(Self {
            root,
            last_epoch: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn lesson_path(&self, id: &str) -> PathBuf {
        self.root.join("lessons").join(format!("{id}.json"))
    }

    fn session_dir(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(id)
    }

    /// Validates and stores a lesson manifest, replacing any previous one.
    pub fn put_lesson(&self, id: &str, manifest: &str) -> Result<Lesson, StoreError> {
        check_id(id)?;
        let lesson = load_lesson(manifest)?;
        write_atomic(&self.lesson_path(id), lesson.to_json().as_bytes())?;
        Ok(lesson)
    }

    pub fn lesson(&self, id: &str) -> Result<Lesson, StoreError> {
        check_id(id).map_err(|_| StoreError::LessonNotFound(id.to_string()))?;
        let path = self.lesson_path(id);
        match fs::read_to_string(&path) {
            Ok(text) => Ok(load_lesson(&text)?),
            Err(e) if e.kind() == ErrorKind::NotFound => Err(StoreError::LessonNotFound(id.to_string())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    pub fn lesson_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = list_dir(&self.root.join("lessons"))?
            .into_iter()
            .filter_map(|n| n.strip_suffix(".json").map(str::to_string))
            .collect::<Vec<_>>();
        ids.sort();
        Ok(ids)
    }

    pub fn create_session(&self, meta: &SessionMeta) -> Result<(), StoreError> {
        check_id(&meta.id)?;
        let dir = self.session_dir(&meta.id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::AlreadyExists => return Err(StoreError::Exists(meta.id.clone())),
            Err(e) => return Err(io_err(&dir)(e)),
        }
        let text = serde_json::to_string_pretty(meta).expect("meta serializes");
        write_atomic(&dir.join("meta.json"), text.as_bytes())?;
        for f in [ROWS, EVENTS, COMMANDS] {
            let p = dir.join(f);
            File::create(&p).map_err(io_err(&p))?;
        }
        sync_dir(&dir)?;
        Ok(())
    }

    pub fn session_meta(&self, id: &str) -> Result<SessionMeta, StoreError> {
        let path = self.existing(id)?.join("meta.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn session_ids(&self) -> Result<Vec<String>, StoreError> {
        let mut ids = list_dir(&self.root.join("sessions"))?;
        ids.retain(|id| check_id(id).is_ok());
        ids.sort();
        Ok(ids)
    }

    fn existing(&self, id: &str) -> Result<PathBuf, StoreError> {
        let dir = self.session_dir(id);
        if check_id(id).is_err() || !dir.join("meta.json").is_file() {
            return Err(StoreError::SessionNotFound(id.to_string()));
        }
        Ok(dir)
    }

    /// Durably appends epoch rows; indices must keep increasing.
    pub fn append_rows(&self, id: &str, rows: &[EpochRecord]) -> Result<(), StoreError> {
        let dir = self.existing(id)?;
        let mut last_map = self.last_epoch.lock().unwrap();
        let last = match last_map.get(id) {
            Some(v) => *v,
            None => self.rows(id)?.last().map(|r| r.epoch_index),
        };
        let mut prev = last;
        for r in rows {
            if let Some(p) = prev {
                if r.epoch_index <= p {
                    return Err(StoreError::OutOfOrder {
                        session: id.to_string(),
                        last: p,
                        got: r.epoch_index,
                    });
                }
            }
            prev = Some(r.epoch_index);
        }
        append_lines(&dir.join(ROWS), rows)?;
        last_map.insert(id.to_string(), prev);
        Ok(())
    }

    pub fn append_transitions(&self, id: &str, log: &[Transition]) -> Result<(), StoreError> {
        let dir = self.existing(id)?;
        append_lines(&dir.join(EVENTS), log)
    }

    pub fn append_command(&self, id: &str, record: &CommandRecord) -> Result<(), StoreError> {
        let dir = self.existing(id)?;
        append_lines(&dir.join(COMMANDS), std::slice::from_ref(record))
    }

    pub fn rows(&self, id: &str) -> Result<Vec<EpochRecord>, StoreError> {
        read_lines(&self.existing(id)?.join(ROWS))
    }

    pub fn transitions(&self, id: &str) -> Result<Vec<Transition>, StoreError> {
        read_lines(&self.existing(id)?.join(EVENTS))
    }

    /// The raw event log file, one transition per line.
    pub fn events_jsonl(&self, id: &str) -> Result<String, StoreError> {
        let path = self.existing(id)?.join(EVENTS);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        Ok(match text.rfind('\n') {
            Some(i) => text[..=i].to_string(),
            None => String::new(),
        })
    }

    pub fn commands(&self, id: &str) -> Result<Vec<CommandRecord>, StoreError> {
        read_lines(&self.existing(id)?.join(COMMANDS))
    }

    /// Re-derives the transition log from persisted rows and commands.
    pub fn replay(&self, id: &str) -> Result<Vec<Transition>, StoreError> {
        let meta = self.session_meta(id)?;
        let rows: Vec<ReplayInput> = self
            .rows(id)?
            .iter()
            .map(|r| ReplayInput {
                epoch_index: r.epoch_index,
                confusion: r.confusion,
                reliable: !r.artifact,
            })
            .collect();
        let commands: Vec<(u64, SessionCommand)> =
            self.commands(id)?.into_iter().map(|c| (c.before_epoch, c.command)).collect();
        Ok(replay(&meta.lesson, &meta.policy, &meta.run_mode, meta.step_s, &rows, &commands)?)
    }
}

fn list_dir(dir: &Path) -> Result<Vec<String>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if let Ok(name) = entry.file_name().into_string() {
            out.push(name);
        }
    }
    Ok(out)
}

fn append_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<(), StoreError> {
    if items.is_empty() {
        return Ok(());
    }
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    let mut f = OpenOptions::new().read(true).write(true).open(path).map_err(io_err(path))?;
    drop_torn_tail(&mut f).map_err(io_err(path))?;
    f.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    f.write_all(&buf).map_err(io_err(path))?;
    f.sync_data().map_err(io_err(path))
}

/// Cuts an unacknowledged partial line left by a crash mid-append.
fn drop_torn_tail(f: &mut File) -> std::io::Result<()> {
    let len = f.metadata()?.len();
    if len == 0 {
        return Ok(());
    }
    let mut last = [0u8];
    f.seek(SeekFrom::Start(len - 1))?;
    f.read_exact(&mut last)?;
    if last[0] == b'\n' {
        return Ok(());
    }
    let mut all = Vec::new();
    f.seek(SeekFrom::Start(0))?;
    f.read_to_end(&mut all)?;
    let keep = all.iter().rposition(|b| *b == b'\n').map_or(0, |i| i + 1);
    f.set_len(keep as u64)
}

fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let complete = match text.rfind('\n') {
        Some(i) => &text[..i],
        None => return Ok(Vec::new()),
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| StoreError::Corrupt {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))?;
    if let Some(parent) = path.parent() {
        sync_dir(parent)?;
    }
    Ok(())
}

fn sync_dir(dir: &Path) -> Result<(), StoreError> {
    // Directory fsync makes new entries durable; not every platform allows it.
    if let Ok(d) = File::open(dir) {
        let _ = d.sync_all();
    }
    Ok(())
}
