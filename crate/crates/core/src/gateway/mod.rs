//! Uniform agent-backend contract: OpenAI-compatible chat-completion
//! client, prompt templating, structured extraction, and record/replay.
//!
//! Every agent call goes through [`Gateway::complete`], keyed by a stable
//! content digest so a recorded consultation replays byte-identically
//! without network access.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[cfg(feature = "stub-server")]
pub mod stub;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("backend {backend}: transport failure after {attempts} attempt(s): {detail}")]
    Transport {
        backend: String,
        attempts: u32,
        detail: String,
    },
    #[error("backend {backend}: HTTP {status}: {body}")]
    Http {
        backend: String,
        status: u16,
        body: String,
    },
    #[error("backend {backend}: malformed completion response: {detail}")]
    BadResponse { backend: String, detail: String },
    #[error("replay miss: no recorded reply for digest {digest}")]
    ReplayMiss { digest: String },
    #[error("replay store {path}: {detail}")]
    Store { path: String, detail: String },
    #[error("template {template}: slot {slot:?} is declared but unbound")]
    UnboundSlot { template: String, slot: String },
    #[error("no fenced JSON block found in reply")]
    NoJsonBlock,
    #[error("structured block violates schema {schema}: {detail}")]
    Schema { schema: &'static str, detail: String },
    #[error("backend {backend}: API key environment variable {var} is not set")]
    MissingApiKey { backend: String, var: String },
    #[error("invalid backend config {backend}: {detail}")]
    BadConfig { backend: String, detail: String },
}

/// Retry policy for one backend: total attempt budget and the base delay
/// doubled after each failed attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(default)]
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, backoff_ms: 250 }
    }
}

/// Connection settings for one named chat-completion backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub name: String,
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    /// Name of the environment variable holding the bearer token, if the
    /// endpoint requires auth.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
}

fn default_max_tokens() -> u32 {
    2048
}

fn default_timeout_ms() -> u64 {
    60_000
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.retry.max_attempts < 1 {
            return Err(GatewayError::BadConfig {
                backend: self.name.clone(),
                detail: "retry.max_attempts must be >= 1".into(),
            });
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::BadConfig {
                backend: self.name.clone(),
                detail: "temperature must be >= 0".into(),
            });
        }
        Ok(())
    }
}

/// A prompt template: static role instructions followed by one labeled
/// section per declared slot. A slot bound to the empty string renders no
/// section; a declared slot with no binding at all is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub template_id: String,
    pub role_instructions: String,
    pub slots: Vec<String>,
}

/// Deterministic render: identical bindings produce identical text.
pub fn render(
    template: &PromptTemplate,
    bindings: &HashMap<String, String>,
) -> Result<String, GatewayError> {
    let mut out = template.role_instructions.trim_end().to_string();
    for slot in &template.slots {
        let value = bindings.get(slot).ok_or_else(|| GatewayError::UnboundSlot {
            template: template.template_id.clone(),
            slot: slot.clone(),
        })?;
        if value.is_empty() {
            continue;
        }
        out.push_str("\n\n## ");
        out.push_str(slot);
        out.push('\n');
        out.push_str(value.trim_end());
    }
    out.push('\n');
    Ok(out)
}

/// Stable request digest: any change to backend name, model, temperature,
/// or prompt content changes the key.
pub fn request_digest(backend: &BackendConfig, prompt: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(backend.name.as_bytes());
    hasher.update([0x1f]);
    hasher.update(backend.model.as_bytes());
    hasher.update([0x1f]);
    hasher.update(format!("{}", backend.temperature).as_bytes());
    hasher.update([0x1f]);
    hasher.update(prompt.as_bytes());
    hex(&hasher.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Gateway operating mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatewayMode {
    Live,
    Record,
    Replay,
}

impl std::str::FromStr for GatewayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(GatewayMode::Live),
            "record" => Ok(GatewayMode::Record),
            "replay" => Ok(GatewayMode::Replay),
            other => Err(format!("unknown mode {other:?} (expected live|record|replay)")),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StoreLine {
    digest: String,
    reply: String,
}

/// Digest-keyed reply store backing record and replay modes. The file
/// format is JSON-lines of `{digest, reply}`; appends are serialized,
/// lookups read a shared in-memory map.
pub struct ReplayStore {
    path: PathBuf,
    entries: Mutex<HashMap<String, String>>,
    appender: Mutex<Option<File>>,
}

impl ReplayStore {
    /// Opens a store for replay: the file must exist and parse.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let file = File::open(path).map_err(|e| GatewayError::Store {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let mut entries = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Store {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: StoreLine = serde_json::from_str(&line).map_err(|e| GatewayError::Store {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", n + 1),
            })?;
            entries.insert(parsed.digest, parsed.reply);
        }
        Ok(ReplayStore {
            path: path.to_path_buf(),
            entries: Mutex::new(entries),
            appender: Mutex::new(None),
        })
    }

    /// Opens (or creates) a store for recording. Existing entries are kept
    /// and reused, so re-recording a run only fetches new prompts.
    pub fn create(path: &Path) -> Result<Self, GatewayError> {
        let existing = if path.exists() {
            Self::open(path)?.into_entries()
        } else {
            HashMap::new()
        };
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Store {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        Ok(ReplayStore {
            path: path.to_path_buf(),
            entries: Mutex::new(existing),
            appender: Mutex::new(Some(file)),
        })
    }

    fn into_entries(self) -> HashMap<String, String> {
        self.entries.into_inner().expect("store lock poisoned")
    }

    pub fn get(&self, digest: &str) -> Option<String> {
        self.entries.lock().expect("store lock poisoned").get(digest).cloned()
    }

    pub fn put(&self, digest: &str, reply: &str) -> Result<(), GatewayError> {
        let line = serde_json::to_string(&StoreLine {
            digest: digest.to_string(),
            reply: reply.to_string(),
        })
        .expect("store line serialization is infallible");
        {
            let mut guard = self.appender.lock().expect("store lock poisoned");
            if let Some(file) = guard.as_mut() {
                writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| {
                    GatewayError::Store {
                        path: self.path.display().to_string(),
                        detail: e.to_string(),
                    }
                })?;
            }
        }
        self.entries
            .lock()
            .expect("store lock poisoned")
            .insert(digest.to_string(), reply.to_string());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Debug, Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

/// The shared completion client. Safe for concurrent use; the replay
/// store serializes its own writes.
pub struct Gateway {
    mode: GatewayMode,
    store: Option<ReplayStore>,
    client: reqwest::blocking::Client,
}

impl Gateway {
    pub fn new(mode: GatewayMode, store: Option<ReplayStore>) -> Result<Self, GatewayError> {
        match mode {
            GatewayMode::Live => {}
            GatewayMode::Record | GatewayMode::Replay => {
                if store.is_none() {
                    return Err(GatewayError::Store {
                        path: "<none>".into(),
                        detail: format!("{mode:?} mode requires a replay store"),
                    });
                }
            }
        }
        Ok(Gateway {
            mode,
            store,
            client: reqwest::blocking::Client::new(),
        })
    }

    /// A replay-mode gateway over an in-memory store; used by scripted tests.
    pub fn replay_in_memory(entries: HashMap<String, String>) -> Self {
        Gateway {
            mode: GatewayMode::Replay,
            store: Some(ReplayStore {
                path: PathBuf::from("<memory>"),
                entries: Mutex::new(entries),
                appender: Mutex::new(None),
            }),
            client: reqwest::blocking::Client::new(),
        }
    }

    pub fn mode(&self) -> GatewayMode {
        self.mode
    }

    /// Resolves one prompt to a reply according to the gateway mode.
    ///
    /// Replay: stored reply or a hard miss (no silent live fallback).
    /// Record: stored reply if present, otherwise live call plus store.
    /// Live: HTTP POST to the chat-completions endpoint, with retries.
    pub fn complete(&self, config: &BackendConfig, prompt: &str) -> Result<String, GatewayError> {
        config.validate()?;
        let digest = request_digest(config, prompt);
        match self.mode {
            GatewayMode::Replay => {
                let store = self.store.as_ref().expect("replay store checked in new()");
                store.get(&digest).ok_or(GatewayError::ReplayMiss { digest })
            }
            GatewayMode::Record => {
                let store = self.store.as_ref().expect("record store checked in new()");
                if let Some(reply) = store.get(&digest) {
                    return Ok(reply);
                }
                let reply = self.post_with_retries(config, prompt)?;
                store.put(&digest, &reply)?;
                Ok(reply)
            }
            GatewayMode::Live => self.post_with_retries(config, prompt),
        }
    }

    fn post_with_retries(&self, config: &BackendConfig, prompt: &str) -> Result<String, GatewayError> {
        let mut last_err = None;
        for attempt in 1..=config.retry.max_attempts {
            if attempt > 1 && config.retry.backoff_ms > 0 {
                let delay = config.retry.backoff_ms.saturating_mul(1 << (attempt - 2).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            match self.post_once(config, prompt) {
                Ok(reply) => return Ok(reply),
                Err(err @ GatewayError::Http { status, .. }) if status >= 500 || status == 429 => {
                    log::warn!("backend {}: attempt {attempt} failed: {err}", config.name);
                    last_err = Some(err);
                }
                Err(GatewayError::Transport { detail, .. }) => {
                    log::warn!("backend {}: attempt {attempt} failed: {detail}", config.name);
                    last_err = Some(GatewayError::Transport {
                        backend: config.name.clone(),
                        attempts: attempt,
                        detail,
                    });
                }
                Err(other) => return Err(other),
            }
        }
        Err(match last_err.expect("at least one attempt ran") {
            GatewayError::Transport { backend, detail, .. } => GatewayError::Transport {
                backend,
                attempts: config.retry.max_attempts,
                detail,
            },
            other => other,
        })
    }

    fn post_once(&self, config: &BackendConfig, prompt: &str) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &config.model,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let mut request = self
            .client
            .post(&config.endpoint)
            .timeout(Duration::from_millis(config.timeout_ms))
            .json(&body);
        if let Some(var) = &config.api_key_env {
            let key = std::env::var(var).map_err(|_| GatewayError::MissingApiKey {
                backend: config.name.clone(),
                var: var.clone(),
            })?;
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| GatewayError::Transport {
            backend: config.name.clone(),
            attempts: 1,
            detail: e.to_string(),
        })?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Transport {
            backend: config.name.clone(),
            attempts: 1,
            detail: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Http {
                backend: config.name.clone(),
                status: status.as_u16(),
                body: text,
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::BadResponse {
                backend: config.name.clone(),
                detail: e.to_string(),
            })?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| GatewayError::BadResponse {
                backend: config.name.clone(),
                detail: "response has no choices".into(),
            })
    }
}

/// Registered structured-output schemas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaId {
    IbisTupleSet,
    RecruitmentDecision,
    AuditScore,
    ReportSections,
}

impl SchemaId {
    pub fn name(self) -> &'static str {
        match self {
            SchemaId::IbisTupleSet => "ibis_tuple_set",
            SchemaId::RecruitmentDecision => "recruitment_decision",
            SchemaId::AuditScore => "audit_score",
            SchemaId::ReportSections => "report_sections",
        }
    }
}

/// Extracts the first fenced JSON block from a reply. Accepts ```json and
/// bare ``` fences.
pub fn extract_json_block(reply: &str) -> Result<serde_json::Value, GatewayError> {
    let mut rest = reply;
    while let Some(start) = rest.find("```") {
        let after = &rest[start + 3..];
        let after = after.strip_prefix("json").unwrap_or(after);
        let after = after.strip_prefix('\n').unwrap_or(after);
        if let Some(end) = after.find("```") {
            let block = &after[..end];
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(block.trim()) {
                return Ok(value);
            }
            rest = &after[end + 3..];
        } else {
            break;
        }
    }
    // Fallback: some backends reply with a bare JSON object and no fence.
    let trimmed = reply.trim();
    if trimmed.starts_with('{') || trimmed.starts_with('[') {
        if let Ok(value) = serde_json::from_str::<serde_json::Value>(trimmed) {
            return Ok(value);
        }
    }
    Err(GatewayError::NoJsonBlock)
}

/// Validates the first fenced JSON block in `reply` against a registered
/// schema, returning the parsed value. Tuple-set parsing proper lives with
/// the argumentation module; this checks the block's shape.
pub fn extract_structured(reply: &str, schema: SchemaId) -> Result<serde_json::Value, GatewayError> {
    let value = extract_json_block(reply)?;
    let fail = |detail: String| GatewayError::Schema { schema: schema.name(), detail };
    match schema {
        SchemaId::IbisTupleSet => {
            let ok = value.get("abstain").map(|a| a == &serde_json::json!(true)) == Some(true)
                || value.get("tuples").map(|t| t.is_array()) == Some(true)
                || value.is_array()
                || value.get("position").is_some();
            if !ok {
                return Err(fail("expected {\"tuples\": [...]}, a tuple array, a single tuple, or {\"abstain\": true}".into()));
            }
        }
        SchemaId::RecruitmentDecision => {
            for key in ["specialists", "examiners", "case_domains"] {
                if value.get(key).map(|v| v.is_array()) != Some(true) {
                    return Err(fail(format!("field {key} must be an array")));
                }
            }
        }
        SchemaId::AuditScore => {
            if value.get("logic_score").map(|v| v.is_number()) != Some(true) {
                return Err(fail("field logic_score must be a number".into()));
            }
        }
        SchemaId::ReportSections => {
            for key in ["DB", "DD", "TP", "TX"] {
                if value.get(key).map(|v| v.is_string()) != Some(true) {
                    return Err(fail(format!("section {key} must be present as a string")));
                }
            }
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn template() -> PromptTemplate {
        PromptTemplate {
            template_id: "t".into(),
            role_instructions: "You are a test fixture.".into(),
            slots: vec!["case".into(), "evidence".into(), "feedback".into(), "schema".into()],
        }
    }

    fn bind(pairs: &[(&str, &str)]) -> HashMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn render_fills_all_slots() {
        let out = render(
            &template(),
            &bind(&[("case", "c"), ("evidence", "e"), ("feedback", "f"), ("schema", "s")]),
        )
        .unwrap();
        assert!(out.contains("## case\nc"));
        assert!(out.contains("## feedback\nf"));
    }

    #[test]
    fn render_is_deterministic() {
        let b = bind(&[("case", "c"), ("evidence", "e"), ("feedback", ""), ("schema", "s")]);
        assert_eq!(render(&template(), &b).unwrap(), render(&template(), &b).unwrap());
    }

    #[test]
    fn render_missing_slot_names_it() {
        let err = render(&template(), &bind(&[("case", "c"), ("feedback", ""), ("schema", "s")]))
            .unwrap_err();
        match err {
            GatewayError::UnboundSlot { slot, .. } => assert_eq!(slot, "evidence"),
            other => panic!("expected unbound slot, got {other}"),
        }
    }

    #[test]
    fn render_empty_feedback_omits_section() {
        let out = render(
            &template(),
            &bind(&[("case", "c"), ("evidence", "e"), ("feedback", ""), ("schema", "s")]),
        )
        .unwrap();
        assert!(!out.contains("## feedback"));
    }

    #[test]
    fn digest_changes_with_prompt_and_config() {
        let mut config = BackendConfig {
            name: "main".into(),
            endpoint: "http://unused".into(),
            model: "m1".into(),
            temperature: 0.0,
            max_tokens: 64,
            timeout_ms: 1000,
            retry: RetryPolicy::default(),
            api_key_env: None,
        };
        let base = request_digest(&config, "hello");
        assert_eq!(base, request_digest(&config, "hello"));
        assert_ne!(base, request_digest(&config, "hello!"));
        config.model = "m2".into();
        assert_ne!(base, request_digest(&config, "hello"));
    }

    #[test]
    fn replay_miss_is_hard_error() {
        let gw = Gateway::replay_in_memory(HashMap::new());
        let config = BackendConfig {
            name: "main".into(),
            endpoint: "http://unused".into(),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 64,
            timeout_ms: 1000,
            retry: RetryPolicy::default(),
            api_key_env: None,
        };
        let err = gw.complete(&config, "never recorded").unwrap_err();
        assert!(matches!(err, GatewayError::ReplayMiss { .. }));
    }

    #[test]
    fn replay_hit_returns_stored_reply() {
        let config = BackendConfig {
            name: "main".into(),
            endpoint: "http://unused".into(),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 64,
            timeout_ms: 1000,
            retry: RetryPolicy::default(),
            api_key_env: None,
        };
        let digest = request_digest(&config, "hi");
        let gw = Gateway::replay_in_memory(HashMap::from([(digest, "stored".to_string())]));
        assert_eq!(gw.complete(&config, "hi").unwrap(), "stored");
    }

    #[test]
    fn store_roundtrips_through_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("store.jsonl");
        {
            let store = ReplayStore::create(&path).unwrap();
            store.put("d1", "reply one").unwrap();
            store.put("d2", "reply\ntwo").unwrap();
        }
        let reopened = ReplayStore::open(&path).unwrap();
        assert_eq!(reopened.get("d1").as_deref(), Some("reply one"));
        assert_eq!(reopened.get("d2").as_deref(), Some("reply\ntwo"));
        assert_eq!(reopened.len(), 2);
    }

    #[test]
    fn extract_takes_first_fenced_block() {
        let reply = "thinking...\n```json\n{\"a\":1}\n```\nmore\n```json\n{\"a\":2}\n```";
        let value = extract_json_block(reply).unwrap();
        assert_eq!(value["a"], 1);
    }

    #[test]
    fn extract_accepts_bare_fence_and_bare_object() {
        assert_eq!(extract_json_block("```\n{\"x\":true}\n```").unwrap()["x"], true);
        assert_eq!(extract_json_block("  {\"x\":3} ").unwrap()["x"], 3);
    }

    #[test]
    fn extract_prose_only_is_error() {
        assert!(matches!(extract_json_block("no JSON here"), Err(GatewayError::NoJsonBlock)));
    }

    #[test]
    fn structured_schema_checks() {
        assert!(extract_structured("```json\n{\"abstain\":true}\n```", SchemaId::IbisTupleSet).is_ok());
        assert!(extract_structured(
            "```json\n{\"specialists\":[],\"examiners\":[],\"case_domains\":[]}\n```",
            SchemaId::RecruitmentDecision
        )
        .is_ok());
        assert!(matches!(
            extract_structured("```json\n{\"specialists\":\"x\"}\n```", SchemaId::RecruitmentDecision),
            Err(GatewayError::Schema { .. })
        ));
        assert!(matches!(
            extract_structured("```json\n{\"DB\":\"a\",\"DD\":\"b\",\"TP\":\"c\"}\n```", SchemaId::ReportSections),
            Err(GatewayError::Schema { .. })
        ));
    }
}
