//! LLM provider abstraction: live chat-completion client, replay store and
//! scripted mock.
//!
//! Every request is keyed by a SHA-256 digest over its tag, session,
//! repetition index, sampling parameters and prompt. The repetition index
//! separates the five identical categorization prompts; the session separates
//! ensemble candidates, which also reuse identical prompts.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 0.5;
pub const DEFAULT_TOP_P: f64 = 1.0;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("replay miss: no transcript for request hash {0}")]
    ReplayMiss(String),
    #[error("conflicting transcripts for hashes: {}", .0.join(", "))]
    Conflict(Vec<String>),
    #[error("replay store {path}: {message}")]
    Store { path: PathBuf, message: String },
    #[error("mock provider has no script for {0}")]
    Unscripted(String),
    #[error("provider configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestTag {
    Categorize,
    Discover,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationParams {
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

fn default_top_p() -> f64 {
    DEFAULT_TOP_P
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_index: u32,
    /// Candidate session; distinguishes otherwise identical prompts issued
    /// for different ensemble candidates.
    pub session: u32,
    pub tag: RequestTag,
}

#[derive(Serialize)]
struct HashKey<'a> {
    tag: RequestTag,
    session: u32,
    repetition_index: u32,
    temperature: f64,
    top_p: f64,
    prompt: &'a str,
}

impl LlmRequest {
    pub fn new(tag: RequestTag, prompt: impl Into<String>, params: GenerationParams) -> Self {
        LlmRequest {
            prompt: prompt.into(),
            temperature: params.temperature,
            top_p: params.top_p,
            repetition_index: 0,
            session: 0,
            tag,
        }
    }

    pub fn repetition(mut self, index: u32) -> Self {
        self.repetition_index = index;
        self
    }

    pub fn session(mut self, session: u32) -> Self {
        self.session = session;
        self
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        Ok(())
    }

    /// Stable hex digest used as the replay key.
    pub fn hash(&self) -> String {
        let key = HashKey {
            tag: self.tag,
            session: self.session,
            repetition_index: self.repetition_index,
            temperature: self.temperature,
            top_p: self.top_p,
            prompt: &self.prompt,
        };
        let bytes = serde_json::to_vec(&key).expect("hash key serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmTranscript {
    pub request_hash: String,
    pub response: String,
    pub provider: String,
    /// Unix seconds; zero for mock responses.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<RequestTag>,
    #[serde(default)]
    pub session: u32,
    #[serde(default)]
    pub repetition_index: u32,
}

impl LlmTranscript {
    pub fn for_request(req: &LlmRequest, response: String, provider: &str, timestamp: u64) -> Self {
        LlmTranscript {
            request_hash: req.hash(),
            response,
            provider: provider.to_owned(),
            timestamp,
            tag: Some(req.tag),
            session: req.session,
            repetition_index: req.repetition_index,
        }
    }
}

pub trait LlmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &LlmRequest) -> Result<LlmTranscript, GatewayError>;
}

/// Front door for all LLM traffic: validates requests, delegates to the
/// provider, and keeps a transcript of every successful call. A request
/// already answered is served from that transcript.
pub struct Gateway {
    provider: Box<dyn LlmProvider>,
    params: GenerationParams,
    log: Mutex<BTreeMap<String, LlmTranscript>>,
    recorder: Option<ReplayStore>,
}

impl Gateway {
    pub fn new(provider: Box<dyn LlmProvider>) -> Self {
        Gateway {
            provider,
            params: GenerationParams::default(),
            log: Mutex::new(BTreeMap::new()),
            recorder: None,
        }
    }

    pub fn with_params(mut self, params: GenerationParams) -> Self {
        self.params = params;
        self
    }

    /// Appends every transcript to `store` as it arrives.
    pub fn recording_to(mut self, store: ReplayStore) -> Self {
        self.recorder = Some(store);
        self
    }

    pub fn params(&self) -> GenerationParams {
        self.params
    }

    pub fn provider_name(&self) -> &str {
        self.provider.name()
    }

    pub fn request(&self, tag: RequestTag, prompt: impl Into<String>) -> LlmRequest {
        LlmRequest::new(tag, prompt, self.params)
    }

    pub fn complete(&self, request: &LlmRequest) -> Result<String, GatewayError> {
        request.validate()?;
        let hash = request.hash();
        if let Some(t) = self.log.lock().expect("transcript log poisoned").get(&hash) {
            return Ok(t.response.clone());
        }
        let transcript = self.provider.complete(request)?;
        let mut log = self.log.lock().expect("transcript log poisoned");
        if let Some(t) = log.get(&hash) {
            return Ok(t.response.clone());
        }
        if let Some(store) = &self.recorder {
            store.insert(transcript.clone())?;
        }
        let text = transcript.response.clone();
        log.insert(hash, transcript);
        Ok(text)
    }

    pub fn call_count(&self) -> usize {
        self.log.lock().expect("transcript log poisoned").len()
    }

    /// All transcripts so far, sorted by (session, tag, hash) so that
    /// concurrent callers still yield a deterministic listing.
    pub fn transcripts(&self) -> Vec<LlmTranscript> {
        let mut out: Vec<LlmTranscript> = self
            .log
            .lock()
            .expect("transcript log poisoned")
            .values()
            .cloned()
            .collect();
        out.sort_by(|a, b| {
            (a.session, a.tag, &a.request_hash, a.repetition_index).cmp(&(
                b.session,
                b.tag,
                &b.request_hash,
                b.repetition_index,
            ))
        });
        out
    }
}

/// Transcript store keyed by request hash, backed by an append-only JSONL file.
pub struct ReplayStore {
    entries: RwLock<BTreeMap<String, LlmTranscript>>,
    sink: Option<Mutex<(PathBuf, File)>>,
}

impl ReplayStore {
    pub fn in_memory() -> Self {
        ReplayStore {
            entries: RwLock::new(BTreeMap::new()),
            sink: None,
        }
    }

    pub fn from_transcripts(transcripts: impl IntoIterator<Item = LlmTranscript>) -> Result<Self, GatewayError> {
        let store = Self::in_memory();
        let mut conflicts = Vec::new();
        for t in transcripts {
            if let Err(GatewayError::Conflict(h)) = store.insert(t) {
                conflicts.extend(h);
            }
        }
        if conflicts.is_empty() {
            Ok(store)
        } else {
            conflicts.sort();
            conflicts.dedup();
            Err(GatewayError::Conflict(conflicts))
        }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        Self::from_transcripts(read_jsonl(path)?)
    }

    /// Opens (creating if needed) a store whose new entries are appended to `path`.
    pub fn open_append(path: &Path) -> Result<Self, GatewayError> {
        let existing = if path.exists() { read_jsonl(path)? } else { Vec::new() };
        let mut store = Self::from_transcripts(existing)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| store_err(path, e))?;
        store.sink = Some(Mutex::new((path.to_path_buf(), file)));
        Ok(store)
    }

    pub fn get(&self, hash: &str) -> Option<LlmTranscript> {
        self.entries.read().expect("store poisoned").get(hash).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a transcript. Identical re-insertions are no-ops; a different
    /// response under an existing hash is a conflict and leaves the store as is.
    pub fn insert(&self, transcript: LlmTranscript) -> Result<(), GatewayError> {
        let mut entries = self.entries.write().expect("store poisoned");
        if let Some(existing) = entries.get(&transcript.request_hash) {
            if existing.response == transcript.response {
                return Ok(());
            }
            return Err(GatewayError::Conflict(vec![transcript.request_hash]));
        }
        if let Some(sink) = &self.sink {
            let mut guard = sink.lock().expect("sink poisoned");
            let (path, file) = &mut *guard;
            let line = serde_json::to_string(&transcript).expect("transcript serializes");
            writeln!(file, "{line}").map_err(|e| store_err(path, e))?;
        }
        entries.insert(transcript.request_hash.clone(), transcript);
        Ok(())
    }

    pub fn transcripts(&self) -> Vec<LlmTranscript> {
        self.entries.read().expect("store poisoned").values().cloned().collect()
    }

    /// Writes the full store sorted by hash.
    pub fn write_jsonl(&self, path: &Path) -> Result<(), GatewayError> {
        write_jsonl(path, &self.transcripts())
    }
}

fn store_err(path: &Path, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::Store {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<LlmTranscript>, GatewayError> {
    let file = File::open(path).map_err(|e| store_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| store_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let t: LlmTranscript =
            serde_json::from_str(&line).map_err(|e| store_err(path, format!("line {}: {e}", i + 1)))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, transcripts: &[LlmTranscript]) -> Result<(), GatewayError> {
    let mut buf = String::new();
    for t in transcripts {
        buf.push_str(&serde_json::to_string(t).expect("transcript serializes"));
        buf.push('\n');
    }
    std::fs::write(path, buf).map_err(|e| store_err(path, e))
}

/// Unions several stores. Shared hashes with equal responses collapse to one
/// entry; differing responses are reported together and nothing is merged.
pub fn record_store_merge(paths: &[PathBuf]) -> Result<ReplayStore, GatewayError> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl(p)?);
    }
    ReplayStore::from_transcripts(all)
}

pub struct ReplayProvider {
    store: ReplayStore,
}

impl ReplayProvider {
    pub fn new(store: ReplayStore) -> Self {
        ReplayProvider { store }
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }
}

impl LlmProvider for ReplayProvider {
    fn name(&self) -> &str {
        "replay"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmTranscript, GatewayError> {
        let hash = request.hash();
        self.store.get(&hash).ok_or(GatewayError::ReplayMiss(hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MockResponse {
    Text { response: String },
    Failure { fail: String },
}

/// One scripted reply. Unset selectors match anything; the first matching
/// rule in script order wins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(default)]
    pub tag: Option<RequestTag>,
    #[serde(default)]
    pub contains: Option<String>,
    #[serde(default)]
    pub repetition: Option<u32>,
    #[serde(default)]
    pub session: Option<u32>,
    #[serde(flatten)]
    pub reply: MockResponse,
}

impl MockRule {
    pub fn reply(tag: RequestTag, text: impl Into<String>) -> Self {
        MockRule {
            tag: Some(tag),
            contains: None,
            repetition: None,
            session: None,
            reply: MockResponse::Text { response: text.into() },
        }
    }

    pub fn failure(tag: RequestTag, message: impl Into<String>) -> Self {
        MockRule {
            reply: MockResponse::Failure { fail: message.into() },
            ..Self::reply(tag, "")
        }
    }

    pub fn when_contains(mut self, needle: impl Into<String>) -> Self {
        self.contains = Some(needle.into());
        self
    }

    pub fn at_repetition(mut self, rep: u32) -> Self {
        self.repetition = Some(rep);
        self
    }

    pub fn in_session(mut self, session: u32) -> Self {
        self.session = Some(session);
        self
    }

    fn matches(&self, req: &LlmRequest) -> bool {
        self.tag.is_none_or(|t| t == req.tag)
            && self.repetition.is_none_or(|r| r == req.repetition_index)
            && self.session.is_none_or(|s| s == req.session)
            && self.contains.as_deref().is_none_or(|c| req.prompt.contains(c))
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    rules: Vec<MockRule>,
}

impl MockProvider {
    pub fn new(rules: Vec<MockRule>) -> Self {
        MockProvider { rules }
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path).map_err(|e| store_err(path, e))?;
        let rules = serde_json::from_str(&text).map_err(|e| store_err(path, e))?;
        Ok(MockProvider { rules })
    }

    pub fn push(&mut self, rule: MockRule) {
        self.rules.push(rule);
    }
}

impl LlmProvider for MockProvider {
    fn name(&self) -> &str {
        "mock"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmTranscript, GatewayError> {
        let rule = self.rules.iter().find(|r| r.matches(request)).ok_or_else(|| {
            GatewayError::Unscripted(format!(
                "{:?} session {} repetition {}",
                request.tag, request.session, request.repetition_index
            ))
        })?;
        match &rule.reply {
            MockResponse::Text { response } => Ok(LlmTranscript::for_request(request, response.clone(), "mock", 0)),
            MockResponse::Failure { fail } => Err(GatewayError::Transport {
                attempts: 1,
                message: fail.clone(),
            }),
        }
    }
}

/// Provider backed by a closure; handy for simulated LLMs in tests.
pub struct FnProvider<F> {
    name: String,
    f: F,
}

impl<F> FnProvider<F>
where
    F: Fn(&LlmRequest) -> Result<String, GatewayError> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        FnProvider { name: name.into(), f }
    }
}

impl<F> LlmProvider for FnProvider<F>
where
    F: Fn(&LlmRequest) -> Result<String, GatewayError> + Send + Sync,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmTranscript, GatewayError> {
        let text = (self.f)(request)?;
        Ok(LlmTranscript::for_request(request, text, &self.name, 0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the credential.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_key_env() -> String {
    "OPENAI_API_KEY".into()
}

fn default_auth_header() -> String {
    "Authorization".into()
}

fn default_timeout_secs() -> u64 {
    120
}

/// Chat-completions client for OpenAI-compatible endpoints.
pub struct LiveProvider {
    client: reqwest::blocking::Client,
    endpoint: String,
    model: String,
    auth: Option<(String, String)>,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct ChatBody<'a> {
    model: &'a str,
    temperature: f64,
    top_p: f64,
    messages: [ChatMessage<'a>; 1],
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

impl LiveProvider {
    pub fn from_config(config: &LiveConfig) -> Result<Self, GatewayError> {
        let key = std::env::var(&config.api_key_env).ok();
        let auth = key.map(|k| {
            let value = if config.auth_header.eq_ignore_ascii_case("authorization") {
                format!("Bearer {k}")
            } else {
                k
            };
            (config.auth_header.clone(), value)
        });
        Self::new(
            &config.base_url,
            &config.model,
            auth,
            Duration::from_secs(config.timeout_secs),
        )
    }

    pub fn new(
        base_url: &str,
        model: &str,
        auth: Option<(String, String)>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(LiveProvider {
            client,
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.to_owned(),
            auth,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, request: &LlmRequest) -> Result<String, (bool, String)> {
        let body = ChatBody {
            model: &self.model,
            temperature: request.temperature,
            top_p: request.top_p,
            messages: [ChatMessage {
                role: "user",
                content: &request.prompt,
            }],
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some((header, value)) = &self.auth {
            req = req.header(header.as_str(), value.as_str());
        }
        let resp = req.send().map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let retryable = status.is_server_error() || status.as_u16() == 429;
            let text = resp.text().unwrap_or_default();
            return Err((retryable, format!("HTTP {status}: {text}")));
        }
        let parsed: ChatResponse = resp.json().map_err(|e| (false, e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or((false, "response carried no message content".into()))
    }
}

impl LlmProvider for LiveProvider {
    fn name(&self) -> &str {
        "live"
    }

    fn complete(&self, request: &LlmRequest) -> Result<LlmTranscript, GatewayError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for i in 0..attempts {
            match self.attempt(request) {
                Ok(text) => {
                    let ts = SystemTime::now()
                        .duration_since(UNIX_EPOCH)
                        .map(|d| d.as_secs())
                        .unwrap_or(0);
                    return Ok(LlmTranscript::for_request(request, text, "live", ts));
                }
                Err((retryable, msg)) => {
                    log::warn!("live LLM attempt {} failed: {msg}", i + 1);
                    last = msg;
                    if !retryable {
                        return Err(GatewayError::Transport {
                            attempts: i + 1,
                            message: last,
                        });
                    }
                    if i + 1 < attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(i));
                    }
                }
            }
        }
        Err(GatewayError::Transport {
            attempts,
            message: last,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(prompt: &str) -> LlmRequest {
        LlmRequest::new(RequestTag::Categorize, prompt, GenerationParams::default())
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = req("p");
        assert_eq!(a.hash(), req("p").hash());
        assert_ne!(a.hash(), a.clone().repetition(1).hash());
        assert_ne!(a.hash(), a.clone().session(1).hash());
        assert_ne!(a.hash(), req("q").hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn parameter_ranges_are_checked() {
        let mut r = req("p");
        r.temperature = 2.5;
        assert!(r.validate().is_err());
        let mut r = req("p");
        r.top_p = 0.0;
        assert!(r.validate().is_err());
        assert!(req("p").validate().is_ok());
    }

    #[test]
    fn replay_hit_and_miss() {
        let r = req("hello");
        let store =
            ReplayStore::from_transcripts([LlmTranscript::for_request(&r, "stored".into(), "live", 7)]).unwrap();
        let gw = Gateway::new(Box::new(ReplayProvider::new(store)));
        assert_eq!(gw.complete(&r).unwrap(), "stored");
        match gw.complete(&req("other")) {
            Err(GatewayError::ReplayMiss(h)) => assert_eq!(h, req("other").hash()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mock_echoes_script() {
        let mock = MockProvider::new(vec![
            MockRule::reply(RequestTag::Categorize, "Answer: Type B").at_repetition(1),
            MockRule::reply(RequestTag::Categorize, "Answer: Type A").at_repetition(0),
        ]);
        let gw = Gateway::new(Box::new(mock));
        assert_eq!(gw.complete(&req("x")).unwrap(), "Answer: Type A");
        assert_eq!(gw.complete(&req("x").repetition(1)).unwrap(), "Answer: Type B");
        assert!(matches!(
            gw.complete(&req("x").repetition(2)),
            Err(GatewayError::Unscripted(_))
        ));
        assert_eq!(gw.transcripts().len(), 2);
    }

    #[test]
    fn mock_script_json_shape() {
        let json = r#"[
            {"tag": "categorize", "contains": "area", "repetition": 0, "response": "Answer: Type A"},
            {"tag": "discover", "fail": "boom"}
        ]"#;
        let rules: Vec<MockRule> = serde_json::from_str(json).unwrap();
        assert_eq!(rules[0].repetition, Some(0));
        assert!(matches!(rules[1].reply, MockResponse::Failure { .. }));
    }

    #[test]
    fn store_dedups_and_detects_conflicts() {
        let r = req("p");
        let t = LlmTranscript::for_request(&r, "a".into(), "live", 0);
        let store = ReplayStore::from_transcripts([t.clone(), t.clone()]).unwrap();
        assert_eq!(store.len(), 1);
        let mut other = t.clone();
        other.response = "b".into();
        match ReplayStore::from_transcripts([t, other]) {
            Err(GatewayError::Conflict(h)) => assert_eq!(h, vec![r.hash()]),
            other => panic!("{:?}", other.map(|s| s.len())),
        }
    }

    #[test]
    fn recording_store_appends_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rec.jsonl");
        let store = ReplayStore::open_append(&path).unwrap();
        let mock = MockProvider::new(vec![MockRule::reply(RequestTag::Discover, "x")]);
        let gw = Gateway::new(Box::new(mock)).recording_to(store);
        let r = LlmRequest::new(RequestTag::Discover, "q", GenerationParams::default());
        gw.complete(&r).unwrap();
        gw.complete(&r.clone().repetition(3)).unwrap();
        let back = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        let replay = Gateway::new(Box::new(ReplayProvider::new(ReplayStore::load(&path).unwrap())));
        assert_eq!(replay.complete(&r).unwrap(), "x");
    }
}
