use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::ImageRef;

/// One persisted backend reply, stored as a JSON line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheRecord {
    pub image_ref: String,
    pub backend_id: String,
    pub question_id: String,
    pub prompt_text: String,
    pub raw_text: String,
    pub timestamp: u64,
}

type Key = (String, String, String);

/// Raw replies keyed by `(image content hash, backend id, prompt)`.
///
/// Backed by an append-only JSON-lines file when opened with
/// [`AnswerCache::open`]. The first record stored for a key wins; later
/// inserts for the same key return the stored text and write nothing.
pub struct AnswerCache {
    entries: Mutex<HashMap<Key, String>>,
    sink: Mutex<Option<File>>,
    path: Option<PathBuf>,
    skipped_lines: usize,
}

impl AnswerCache {
    pub fn in_memory() -> Self {
        AnswerCache {
            entries: Mutex::new(HashMap::new()),
            sink: Mutex::new(None),
            path: None,
            skipped_lines: 0,
        }
    }

    /// Loads `path` (if it exists) and opens it for appending. Lines that do
    /// not parse, such as a record torn by an interrupted run, are skipped.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        let mut skipped = 0;
        let mut needs_newline = false;
        if path.exists() {
            let mut reader = BufReader::new(File::open(path)?);
            let mut line = String::new();
            loop {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    break;
                }
                needs_newline = !line.ends_with('\n');
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheRecord>(line.trim_end()) {
                    Ok(r) => {
                        entries
                            .entry((r.image_ref, r.backend_id, r.prompt_text))
                            .or_insert(r.raw_text);
                    }
                    Err(_) => skipped += 1,
                }
            }
        } else if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if needs_newline {
            file.write_all(b"\n")?;
        }
        Ok(AnswerCache {
            entries: Mutex::new(entries),
            sink: Mutex::new(Some(file)),
            path: Some(path.to_path_buf()),
            skipped_lines: skipped,
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Lines ignored while loading.
    pub fn skipped_lines(&self) -> usize {
        self.skipped_lines
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, image: &ImageRef, backend_id: &str, prompt: &str) -> Option<String> {
        let key = (image.to_string(), backend_id.to_string(), prompt.to_string());
        self.entries.lock().unwrap().get(&key).cloned()
    }

    /// Stores the record unless its key is present; returns the stored text.
    pub fn insert(&self, record: CacheRecord) -> std::io::Result<String> {
        let key = (
            record.image_ref.clone(),
            record.backend_id.clone(),
            record.prompt_text.clone(),
        );
        let mut entries = self.entries.lock().unwrap();
        if let Some(existing) = entries.get(&key) {
            return Ok(existing.clone());
        }
        if let Some(file) = self.sink.lock().unwrap().as_mut() {
            let mut line = serde_json::to_string(&record).map_err(std::io::Error::other)?;
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        entries.insert(key, record.raw_text.clone());
        Ok(record.raw_text)
    }
}
