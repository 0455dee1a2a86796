use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};
use thiserror::Error;

use super::{prompt_hash, ImageData, VqaRequest, REASK_SUFFIX};
use crate::schema::TextLlm;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport: {0}")]
    Transport(String),
    #[error("http status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("no fixture answer for image {image_ref} prompt {prompt:?}")]
    FixtureMiss { image_ref: String, prompt: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Transport failures, rate limiting and server errors are retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

/// A yes/no VQA model. Implementations must tolerate concurrent calls.
pub trait VqaBackend: Send + Sync {
    /// Stable identifier recorded in transcripts and cache keys.
    fn id(&self) -> &str;

    /// Raw reply text for the request.
    fn complete(&self, image: &ImageData, request: &VqaRequest) -> Result<String, BackendError>;
}

/// Deterministic lookup table keyed by `(image content hash, prompt hash)`.
///
/// File format, one entry per line: `<image_ref>\t<prompt sha256>\t<raw_text>`.
/// A re-ask prompt with no entry of its own falls back to the entry of the
/// prompt it extends.
#[derive(Debug, Clone)]
pub struct FixtureBackend {
    id: String,
    answers: HashMap<(String, String), String>,
}

impl FixtureBackend {
    pub fn from_entries(id: impl Into<String>, entries: impl IntoIterator<Item = (String, String, String)>) -> Self {
        FixtureBackend {
            id: id.into(),
            answers: entries.into_iter().map(|(i, p, r)| ((i, p), r)).collect(),
        }
    }

    pub fn parse(id: impl Into<String>, text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            match (cols.next(), cols.next(), cols.next()) {
                (Some(i), Some(p), Some(r)) => entries.push((i.trim().to_string(), p.trim().to_string(), r.to_string())),
                _ => {
                    return Err(BackendError::Config(format!(
                        "fixture line {}: expected `image_ref<TAB>prompt_hash<TAB>raw_text`",
                        n + 1
                    )))
                }
            }
        }
        Ok(Self::from_entries(id, entries))
    }

    /// Loads a fixture file. The backend id embeds a digest of the contents
    /// so edited fixtures never reuse stale cache entries.
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("cannot read fixture {}: {e}", path.display())))?;
        let digest = &prompt_hash(&text)[..12];
        Self::parse(format!("fixture:{digest}"), &text)
    }

    /// Renders entries in the fixture file format, sorted for stable output.
    pub fn to_text(&self) -> String {
        let sorted: BTreeMap<_, _> = self.answers.iter().collect();
        sorted
            .into_iter()
            .map(|((i, p), r)| format!("{i}\t{p}\t{r}\n"))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }
}

impl VqaBackend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, _image: &ImageData, request: &VqaRequest) -> Result<String, BackendError> {
        let image = request.image_ref.to_string();
        let lookup = |prompt: &str| self.answers.get(&(image.clone(), prompt_hash(prompt)));
        lookup(&request.prompt_text)
            .or_else(|| request.prompt_text.strip_suffix(REASK_SUFFIX).and_then(lookup))
            .cloned()
            .ok_or_else(|| BackendError::FixtureMiss {
                image_ref: image.clone(),
                prompt: request.prompt_text.clone(),
            })
    }
}

/// Field names of an HTTP chat endpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointProfile {
    /// `type` value of the image content part.
    pub image_part_type: String,
    /// Key holding the base64 image bytes within the image part.
    pub image_data_field: String,
    /// JSON pointer to the reply text in the response body.
    pub response_text_pointer: String,
}

impl Default for EndpointProfile {
    fn default() -> Self {
        EndpointProfile {
            image_part_type: "image".into(),
            image_data_field: "data".into(),
            response_text_pointer: "/text".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpChatConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if the endpoint needs one.
    pub api_key_env: Option<String>,
    pub timeout: Duration,
    pub profile: EndpointProfile,
}

/// A chat-style JSON endpoint taking one text part and one image part.
pub struct HttpChatBackend {
    id: String,
    config: HttpChatConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(config: HttpChatConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpChatBackend {
            id: format!("http_chat:{}@{}", config.model, config.endpoint),
            config,
            api_key,
            agent,
        }
    }

    /// Request body for a prompt and optional image bytes.
    pub fn request_body(&self, prompt: &str, image: Option<&[u8]>) -> Value {
        let mut content = vec![json!({"type": "text", "text": prompt})];
        if let Some(bytes) = image {
            let mut part = serde_json::Map::new();
            part.insert("type".into(), json!(self.config.profile.image_part_type));
            part.insert(
                self.config.profile.image_data_field.clone(),
                json!(base64::engine::general_purpose::STANDARD.encode(bytes)),
            );
            content.push(Value::Object(part));
        }
        json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [{"role": "user", "content": content}],
        })
    }

    fn post(&self, body: &Value) -> Result<String, BackendError> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let code = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&code) {
            return Err(BackendError::Status { code, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
        value
            .pointer(&self.config.profile.response_text_pointer)
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                BackendError::BadResponse(format!(
                    "no string at {} in response",
                    self.config.profile.response_text_pointer
                ))
            })
    }
}

impl VqaBackend for HttpChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, image: &ImageData, request: &VqaRequest) -> Result<String, BackendError> {
        self.post(&self.request_body(&request.prompt_text, Some(&image.bytes)))
    }
}

impl TextLlm for HttpChatBackend {
    fn complete(&self, prompt: &str) -> Result<String, String> {
        self.post(&self.request_body(prompt, None)).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Fixture { path: PathBuf },
    HttpChat(HttpChatConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    pub kind: BackendKind,
}

impl BackendConfig {
    /// Reads `kind`, `fixture`, `endpoint`, `model`, `api_key_env`,
    /// `timeout_secs`, `image_part_type`, `image_data_field` and
    /// `response_text_pointer` from a key-value map.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self, BackendError> {
        let get = |k: &str| map.get(k).map(|s| s.trim()).filter(|s| !s.is_empty());
        let need = |k: &str| get(k).ok_or_else(|| BackendError::Config(format!("missing backend key `{k}`")));
        let kind = match need("kind")? {
            "fixture" => BackendKind::Fixture {
                path: PathBuf::from(need("fixture")?),
            },
            "http_chat" => {
                let defaults = EndpointProfile::default();
                let timeout_secs = match get("timeout_secs") {
                    Some(s) => s
                        .parse::<u64>()
                        .map_err(|_| BackendError::Config(format!("bad timeout_secs {s:?}")))?,
                    None => 60,
                };
                BackendKind::HttpChat(HttpChatConfig {
                    endpoint: need("endpoint")?.to_string(),
                    model: need("model")?.to_string(),
                    api_key_env: get("api_key_env").map(str::to_string),
                    timeout: Duration::from_secs(timeout_secs),
                    profile: EndpointProfile {
                        image_part_type: get("image_part_type").map_or(defaults.image_part_type, str::to_string),
                        image_data_field: get("image_data_field").map_or(defaults.image_data_field, str::to_string),
                        response_text_pointer: get("response_text_pointer")
                            .map_or(defaults.response_text_pointer, str::to_string),
                    },
                })
            }
            other => return Err(BackendError::Config(format!("unknown backend kind {other:?}"))),
        };
        Ok(BackendConfig { kind })
    }
}

fn credentials(
    config: &HttpChatConfig,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Option<String>, BackendError> {
    match &config.api_key_env {
        None => Ok(None),
        Some(var) => env(var)
            .filter(|v| !v.is_empty())
            .map(Some)
            .ok_or_else(|| BackendError::Config(format!("credentials variable {var} is not set"))),
    }
}

/// Instantiates the configured backend. Credentials are read through `env`
/// (pass `|k| std::env::var(k).ok()` in production).
pub fn register_backend(
    config: &BackendConfig,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Arc<dyn VqaBackend>, BackendError> {
    match &config.kind {
        BackendKind::Fixture { path } => Ok(Arc::new(FixtureBackend::load(path)?)),
        BackendKind::HttpChat(http) => {
            let key = credentials(http, env)?;
            Ok(Arc::new(HttpChatBackend::new(http.clone(), key)))
        }
    }
}

/// Same as [`register_backend`] for text-only completion. Only `http_chat`
/// backends can serve text prompts.
pub fn register_text_llm(
    config: &BackendConfig,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<Arc<dyn TextLlm>, BackendError> {
    match &config.kind {
        BackendKind::HttpChat(http) => {
            let key = credentials(http, env)?;
            Ok(Arc::new(HttpChatBackend::new(http.clone(), key)))
        }
        BackendKind::Fixture { .. } => Err(BackendError::Config(
            "fixture backends answer image questions only".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vqa::ImageRef;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fixture_lookup() {
        let img = ImageData::from_bytes(b"pixels".to_vec());
        let text = format!(
            "{}\t{}\tYes, it is.\n",
            img.image_ref,
            prompt_hash("Can you see the tail?")
        );
        let fx = FixtureBackend::parse("fx", &text).unwrap();
        let req = VqaRequest::new(img.image_ref.clone(), "Can you see the tail?");
        assert_eq!(fx.complete(&img, &req).unwrap(), "Yes, it is.");
        let reask = VqaRequest::new(img.image_ref.clone(), format!("Can you see the tail?{REASK_SUFFIX}"));
        assert_eq!(fx.complete(&img, &reask).unwrap(), "Yes, it is.");
        let other = VqaRequest::new(ImageRef::of_bytes(b"other"), "Can you see the tail?");
        assert!(matches!(fx.complete(&img, &other), Err(BackendError::FixtureMiss { .. })));
        assert!(FixtureBackend::parse("fx", "only one column\n").is_err());
        assert_eq!(FixtureBackend::parse("fx", &fx.to_text()).unwrap().len(), 1);
    }

    #[test]
    fn unknown_kind() {
        let err = BackendConfig::from_map(&map(&[("kind", "grpc")])).unwrap_err();
        assert_eq!(err, BackendError::Config("unknown backend kind \"grpc\"".into()));
    }

    #[test]
    fn missing_credentials() {
        let cfg = BackendConfig::from_map(&map(&[
            ("kind", "http_chat"),
            ("endpoint", "http://127.0.0.1:9/v1"),
            ("model", "m"),
            ("api_key_env", "VQA_KEY"),
        ]))
        .unwrap();
        assert!(matches!(register_backend(&cfg, &|_| None), Err(BackendError::Config(_))));
        let b = register_backend(&cfg, &|k| (k == "VQA_KEY").then(|| "secret".to_string())).unwrap();
        assert_eq!(b.id(), "http_chat:m@http://127.0.0.1:9/v1");
    }

    #[test]
    fn retry_classes() {
        assert!(BackendError::Transport("x".into()).is_retryable());
        assert!(BackendError::Status { code: 503, body: String::new() }.is_retryable());
        assert!(BackendError::Status { code: 429, body: String::new() }.is_retryable());
        assert!(!BackendError::Status { code: 400, body: String::new() }.is_retryable());
        assert!(!BackendError::BadResponse("x".into()).is_retryable());
    }
}
