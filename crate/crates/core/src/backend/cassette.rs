//! Append-only JSONL store of recorded request/response pairs.
//!
//! Each line is `{request_hash, request, response, response_id, recorded_at}`.
//! A hash may be recorded several times (the same prompt asked repeatedly);
//! replay hands out the recorded entries for that hash in order and keeps
//! returning the last one once they run out.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::BackendError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub request_hash: String,
    pub request: Value,
    pub response: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_id: Option<String>,
    pub recorded_at: String,
}

#[derive(Debug, Default)]
pub struct Cassette {
    entries: HashMap<String, (Vec<CassetteEntry>, AtomicUsize)>,
    writer: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl Cassette {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let file = File::open(path).map_err(|e| BackendError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut entries: HashMap<String, (Vec<CassetteEntry>, AtomicUsize)> = HashMap::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| BackendError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line).map_err(|e| {
                BackendError::Config(format!("{}:{}: bad cassette entry: {e}", path.display(), i + 1))
            })?;
            entries
                .entry(entry.request_hash.clone())
                .or_insert_with(|| (Vec::new(), AtomicUsize::new(0)))
                .0
                .push(entry);
        }
        Ok(Cassette {
            entries,
            writer: None,
            path: Some(path.to_path_buf()),
        })
    }

    /// Opens (creating if needed) a cassette for appending new recordings.
    pub fn open_for_recording(path: &Path) -> Result<Self, BackendError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| BackendError::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
        Ok(Cassette {
            entries: HashMap::new(),
            writer: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn from_entries(list: impl IntoIterator<Item = CassetteEntry>) -> Self {
        let mut entries: HashMap<String, (Vec<CassetteEntry>, AtomicUsize)> = HashMap::new();
        for e in list {
            entries
                .entry(e.request_hash.clone())
                .or_insert_with(|| (Vec::new(), AtomicUsize::new(0)))
                .0
                .push(e);
        }
        Cassette {
            entries,
            writer: None,
            path: None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(|(v, _)| v.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, hash: &str) -> bool {
        self.entries.contains_key(hash)
    }

    pub fn lookup(&self, hash: &str) -> Option<&CassetteEntry> {
        let (list, cursor) = self.entries.get(hash)?;
        let i = cursor.fetch_add(1, Ordering::Relaxed).min(list.len() - 1);
        list.get(i)
    }

    pub fn record(&self, entry: &CassetteEntry) -> Result<(), BackendError> {
        let Some(writer) = &self.writer else {
            return Err(BackendError::Config("cassette is not open for recording".into()));
        };
        let mut line = serde_json::to_string(entry).expect("entry serializes");
        line.push('\n');
        let mut file = writer.lock().unwrap_or_else(|p| p.into_inner());
        file.write_all(line.as_bytes())
            .and_then(|_| file.flush())
            .map_err(|e| BackendError::Io {
                path: self.path.clone().unwrap_or_default(),
                source: e,
            })
    }
}
