//! Annotation sessions with an append-only JSON-lines log per session.
//!
//! Each session lives in `<data_dir>/sessions/<id>.jsonl`: one `create`
//! event followed by one `answer` event per acknowledged answer. An answer
//! is applied to a scratch copy, written and synced, and only then
//! committed, so a crash loses at most the answer that was never
//! acknowledged. On startup every log is replayed; a torn final line is
//! discarded.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use ordepth_core::annotation::{Answer, AnnotationSession};
use ordepth_core::api::{AnswerView, ItemRegistry, QuestionView, SessionView};
use ordepth_core::supervision::RelationSet;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum Event {
    Create {
        session_id: String,
        item_id: String,
        order: Vec<usize>,
    },
    Answer {
        seq: usize,
        answer: Answer,
    },
}

struct Entry {
    session: AnnotationSession,
    log: Option<File>,
}

impl Entry {
    fn append(&mut self, event: &Event) -> Result<(), ServiceError> {
        if let Some(file) = &mut self.log {
            let mut line = serde_json::to_vec(event).map_err(|e| ServiceError::Internal(e.to_string()))?;
            line.push(b'\n');
            file.write_all(&line)?;
            file.sync_data()?;
        }
        Ok(())
    }
}

pub struct SessionStore {
    registry: ItemRegistry,
    dir: Option<PathBuf>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
    next_id: Mutex<u64>,
}

impl SessionStore {
    /// Store without persistence.
    pub fn in_memory(registry: ItemRegistry) -> Self {
        SessionStore {
            registry,
            dir: None,
            sessions: RwLock::new(HashMap::new()),
            next_id: Mutex::new(1),
        }
    }

    /// Store persisted under `data_dir`, replaying any existing logs.
    pub fn open(registry: ItemRegistry, data_dir: &Path) -> Result<Self, ServiceError> {
        let dir = data_dir.join("sessions");
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        let mut max_id = 0;
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            let (id, session) = replay_log(&path, &registry)?;
            max_id = max_id.max(id_number(&id).unwrap_or(0));
            let log = OpenOptions::new().append(true).open(&path)?;
            sessions.insert(id, Arc::new(Mutex::new(Entry { session, log: Some(log) })));
        }
        tracing::info!(sessions = sessions.len(), dir = %dir.display(), "session store opened");
        Ok(SessionStore {
            registry,
            dir: Some(dir),
            sessions: RwLock::new(sessions),
            next_id: Mutex::new(max_id + 1),
        })
    }

    pub fn registry(&self) -> &ItemRegistry {
        &self.registry
    }

    pub fn session_count(&self) -> usize {
        self.sessions.read().expect("store lock").len()
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ServiceError> {
        self.sessions
            .read()
            .expect("store lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("session {id:?}")))
    }

    pub fn create(&self, item_id: &str) -> Result<SessionView, ServiceError> {
        if self.registry.get(item_id).is_none() {
            return Err(ServiceError::NotFound(format!("item {item_id:?}")));
        }
        let session = AnnotationSession::for_skeleton(item_id, &self.registry.skeleton)?;
        let id = {
            let mut next = self.next_id.lock().expect("id lock");
            let id = format!("s{:06}", *next);
            *next += 1;
            id
        };
        let log = match &self.dir {
            Some(dir) => Some(
                OpenOptions::new()
                    .create_new(true)
                    .append(true)
                    .open(dir.join(format!("{id}.jsonl")))?,
            ),
            None => None,
        };
        let mut entry = Entry { session, log };
        entry.append(&Event::Create {
            session_id: id.clone(),
            item_id: item_id.into(),
            order: entry.session.insertion_order.clone(),
        })?;
        let view = SessionView::of(&id, &entry.session);
        self.sessions
            .write()
            .expect("store lock")
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(view)
    }

    pub fn question(&self, id: &str) -> Result<QuestionView, ServiceError> {
        let entry = self.entry(id)?;
        let entry = entry.lock().expect("session lock");
        Ok(QuestionView::of(id, &entry.session, &self.registry)?)
    }

    pub fn answer(&self, id: &str, answer: Answer, seq: Option<usize>) -> Result<AnswerView, ServiceError> {
        let entry = self.entry(id)?;
        let mut entry = entry.lock().expect("session lock");
        let current = entry.session.question_count;
        if let Some(seq) = seq {
            if seq != current {
                return Err(ServiceError::Conflict(format!(
                    "answer is for question {seq} but the session is at question {current}"
                )));
            }
        }
        let mut next = entry.session.clone();
        next.submit_answer(answer)?;
        entry.append(&Event::Answer { seq: current, answer })?;
        entry.session = next;
        Ok(AnswerView {
            session_id: id.into(),
            accepted: answer,
            status: entry.session.status,
            question_count: entry.session.question_count,
        })
    }

    pub fn relations(&self, id: &str) -> Result<RelationSet, ServiceError> {
        let entry = self.entry(id)?;
        let entry = entry.lock().expect("session lock");
        if !entry.session.is_complete() {
            return Err(ServiceError::Conflict(format!("session {id:?} is not complete")));
        }
        Ok(entry.session.relations()?)
    }

    /// Copy of the in-memory state, for tests and tooling.
    pub fn snapshot(&self, id: &str) -> Result<AnnotationSession, ServiceError> {
        let entry = self.entry(id)?;
        let session = entry.lock().expect("session lock").session.clone();
        Ok(session)
    }
}

fn id_number(id: &str) -> Option<u64> {
    id.strip_prefix('s')?.parse().ok()
}

fn corrupt(path: &Path, line: usize, what: impl std::fmt::Display) -> ServiceError {
    ServiceError::Internal(format!("{}:{line}: {what}", path.display()))
}

/// Rebuilds a session from its event log, truncating a torn final line.
pub fn replay_log(path: &Path, registry: &ItemRegistry) -> Result<(String, AnnotationSession), ServiceError> {
    let bytes = fs::read(path)?;
    let complete = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if complete < bytes.len() {
        tracing::warn!(path = %path.display(), "discarding torn final log line");
        OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
    }
    let mut lines = BufReader::new(&bytes[..complete]).lines();
    let first = lines.next().transpose()?.ok_or_else(|| corrupt(path, 1, "empty log"))?;
    let (id, mut session) = match serde_json::from_str(&first).map_err(|e| corrupt(path, 1, e))? {
        Event::Create {
            session_id,
            item_id,
            order,
        } => {
            if registry.get(&item_id).is_none() {
                return Err(corrupt(path, 1, format!("unknown item {item_id:?}")));
            }
            (session_id, AnnotationSession::with_order(item_id, order)?)
        }
        Event::Answer { .. } => return Err(corrupt(path, 1, "log must start with a create event")),
    };
    for (k, line) in lines.enumerate() {
        let line = line?;
        match serde_json::from_str(&line).map_err(|e| corrupt(path, k + 2, e))? {
            Event::Answer { seq, answer } if seq == session.question_count => session
                .submit_answer(answer)
                .map_err(|e| corrupt(path, k + 2, e))?,
            _ => return Err(corrupt(path, k + 2, "unexpected event")),
        }
    }
    Ok((id, session))
}
