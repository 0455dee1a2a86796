//! Yes/no visual question answering behind a uniform gateway.
//!
//! [`VqaGateway::ask`] consults the answer cache, calls the backend with
//! bounded transport retries, parses the verdict and re-asks once with
//! [`REASK_SUFFIX`] appended when the first reply is neither yes nor no.

mod backend;
mod cache;

pub use backend::{
    register_backend, register_text_llm, BackendConfig, BackendError, BackendKind, EndpointProfile, FixtureBackend, HttpChatBackend,
    HttpChatConfig, VqaBackend,
};
pub use cache::{AnswerCache, CacheRecord};

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Appended to the prompt on the single semantic re-ask.
pub const REASK_SUFFIX: &str = " Answer yes or no.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    pub fn as_bool(self) -> bool {
        self == Verdict::Yes
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reads a yes/no verdict off the first alphabetic token, ignoring case,
/// punctuation and whitespace. Anything else is `None`.
pub fn parse_verdict(raw_text: &str) -> Option<Verdict> {
    let token: String = raw_text
        .chars()
        .skip_while(|c| !c.is_alphabetic())
        .take_while(|c| c.is_alphabetic())
        .collect();
    match token.to_lowercase().as_str() {
        "yes" => Some(Verdict::Yes),
        "no" => Some(Verdict::No),
        _ => None,
    }
}

/// Content address of an image: lowercase hex SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ImageRef(String);

impl ImageRef {
    pub fn of_bytes(bytes: &[u8]) -> Self {
        ImageRef(hex::encode(Sha256::digest(bytes)))
    }

    pub fn from_hex(hex: impl Into<String>) -> Self {
        ImageRef(hex.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Lowercase hex SHA-256 of a prompt, as used in fixture files.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Image bytes with their content address.
#[derive(Debug, Clone)]
pub struct ImageData {
    pub image_ref: ImageRef,
    pub bytes: Arc<[u8]>,
}

impl ImageData {
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>) -> Self {
        let bytes = bytes.into();
        ImageData {
            image_ref: ImageRef::of_bytes(&bytes),
            bytes,
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        Ok(Self::from_bytes(std::fs::read(path)?))
    }
}

/// A single yes/no question about one image. Temperature is always 0.
#[derive(Debug, Clone, PartialEq)]
pub struct VqaRequest {
    pub image_ref: ImageRef,
    pub prompt_text: String,
    temperature: f64,
}

impl VqaRequest {
    pub fn new(image_ref: ImageRef, prompt_text: impl Into<String>) -> Self {
        VqaRequest {
            image_ref,
            prompt_text: prompt_text.into(),
            temperature: 0.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqaAnswer {
    pub verdict: Verdict,
    pub raw_text: String,
    pub from_cache: bool,
}

#[derive(Debug, Error)]
pub enum VqaError {
    #[error("backend transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("unparseable answer after re-ask: {raw:?}")]
    Unparseable { raw: String },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("answer cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    /// Transport retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Milliseconds since the Unix epoch.
pub fn now_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Backend plus cache plus retry policy. Safe to share across threads.
pub struct VqaGateway {
    backend: Arc<dyn VqaBackend>,
    cache: Option<Arc<AnswerCache>>,
    retry: RetryPolicy,
    calls: AtomicU64,
}

impl VqaGateway {
    pub fn new(backend: Arc<dyn VqaBackend>) -> Self {
        VqaGateway {
            backend,
            cache: None,
            retry: RetryPolicy::default(),
            calls: AtomicU64::new(0),
        }
    }

    pub fn with_cache(mut self, cache: Arc<AnswerCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    /// Number of backend calls made so far (cache hits excluded).
    pub fn backend_calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn call_with_retries(&self, image: &ImageData, request: &VqaRequest) -> Result<String, VqaError> {
        let mut attempt = 0;
        loop {
            self.calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(image, request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay.saturating_mul(1 << attempt.min(16));
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    attempt += 1;
                }
                Err(e) if e.is_retryable() => {
                    return Err(VqaError::Transport {
                        attempts: attempt + 1,
                        last: e.to_string(),
                    })
                }
                Err(e) => return Err(VqaError::Backend(e.to_string())),
            }
        }
    }

    /// Raw text for a prompt, from the cache or the backend.
    fn raw_answer(&self, image: &ImageData, prompt: &str, question_id: &str) -> Result<(String, bool), VqaError> {
        let backend_id = self.backend.id();
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&image.image_ref, backend_id, prompt) {
                return Ok((hit, true));
            }
        }
        let request = VqaRequest::new(image.image_ref.clone(), prompt);
        let raw = self.call_with_retries(image, &request)?;
        match &self.cache {
            Some(cache) => {
                let stored = cache
                    .insert(CacheRecord {
                        image_ref: image.image_ref.to_string(),
                        backend_id: backend_id.to_string(),
                        question_id: question_id.to_string(),
                        prompt_text: prompt.to_string(),
                        raw_text: raw,
                        timestamp: now_millis(),
                    })
                    .map_err(|e| VqaError::Cache(e.to_string()))?;
                Ok((stored, false))
            }
            None => Ok((raw, false)),
        }
    }

    /// Asks one question about `image`.
    pub fn ask(&self, image: &ImageData, prompt: &str, question_id: &str) -> Result<VqaAnswer, VqaError> {
        let (raw, cached) = self.raw_answer(image, prompt, question_id)?;
        if let Some(verdict) = parse_verdict(&raw) {
            return Ok(VqaAnswer {
                verdict,
                raw_text: raw,
                from_cache: cached,
            });
        }
        let reask = format!("{prompt}{REASK_SUFFIX}");
        let (raw, cached_again) = self.raw_answer(image, &reask, question_id)?;
        match parse_verdict(&raw) {
            Some(verdict) => Ok(VqaAnswer {
                verdict,
                raw_text: raw,
                from_cache: cached && cached_again,
            }),
            None => Err(VqaError::Unparseable { raw }),
        }
    }
}
