//! Boundaries to the three external services: a chat-completion model
//! endpoint, an artifact bucket and a metrics sink. Each has a deterministic
//! in-process implementation used by tests and desk-scale runs.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::io::AsRawFd;
use std::path::{Component, Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::domain::MetricRecord;

pub const API_KEY_ENV: &str = "EXECFORGE_API_KEY";
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 8192;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("model endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("mock script has no completion for prompt {prompt_hash} sample {index}")]
    ScriptExhausted { prompt_hash: String, index: usize },
    #[error("invalid model request: {0}")]
    InvalidRequest(String),
    #[error("model endpoint returned {got} completions, expected {expected}")]
    WrongSampleCount { expected: usize, got: usize },
    #[error("unknown artifact key {0}")]
    UnknownKey(String),
    #[error("artifact key {0} already holds different content")]
    KeyConflict(String),
    #[error("invalid artifact key {0:?}")]
    InvalidKey(String),
    #[error("artifact store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("metric ({run_id}, step {step}, {name}) already logged with value {existing}, got {new}")]
    ConflictingDuplicate {
        run_id: String,
        step: u64,
        name: String,
        existing: f64,
        new: f64,
    },
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::EndpointUnavailable(_) | GatewayError::StoreUnavailable(_)
        )
    }
}

/// Hex-encoded SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub prompt: String,
    pub n_samples: usize,
    pub max_output_tokens: u32,
    pub temperature: f64,
    pub stop_markers: Vec<String>,
}

impl ModelRequest {
    pub fn new(prompt: impl Into<String>, n_samples: usize) -> Self {
        Self {
            prompt: prompt.into(),
            n_samples,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            temperature: 1.0,
            stop_markers: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.n_samples == 0 {
            return Err(GatewayError::InvalidRequest("n_samples must be at least 1".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens must be at least 1".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be non-negative".into()));
        }
        Ok(())
    }

    pub fn prompt_hash(&self) -> String {
        sha256_hex(self.prompt.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    #[serde(default)]
    pub thinking_text: Option<String>,
    pub body_text: String,
}

impl Completion {
    pub fn body(text: impl Into<String>) -> Self {
        Self {
            thinking_text: None,
            body_text: text.into(),
        }
    }
}

pub trait ModelEndpoint: Send + Sync {
    /// Returns exactly `req.n_samples` completions.
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError>;
}

/// Checks the sample-count contract on an endpoint's answer.
pub fn generate_checked(
    endpoint: &dyn ModelEndpoint,
    req: &ModelRequest,
) -> Result<Vec<Completion>, GatewayError> {
    req.validate()?;
    let out = endpoint.generate(req)?;
    if out.len() != req.n_samples {
        return Err(GatewayError::WrongSampleCount {
            expected: req.n_samples,
            got: out.len(),
        });
    }
    Ok(out)
}

/// Mock endpoint answering from a script keyed by prompt hash; sample `i`
/// of a request gets the `i`-th scripted completion.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEndpoint {
    script: HashMap<String, Vec<Completion>>,
}

#[derive(Debug, Deserialize)]
struct ScriptEntry {
    #[serde(default)]
    prompt: Option<String>,
    #[serde(default)]
    prompt_sha256: Option<String>,
    completions: Vec<Completion>,
}

impl ScriptedEndpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, prompt: &str, completions: Vec<Completion>) -> Self {
        self.insert(prompt, completions);
        self
    }

    pub fn insert(&mut self, prompt: &str, completions: Vec<Completion>) {
        self.script
            .entry(sha256_hex(prompt.as_bytes()))
            .or_default()
            .extend(completions);
    }

    /// Loads a JSON array of `{prompt | prompt_sha256, completions}` entries.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let entries: Vec<ScriptEntry> = serde_json::from_str(text)?;
        let mut out = Self::new();
        for e in entries {
            let hash = match (e.prompt, e.prompt_sha256) {
                (Some(p), _) => sha256_hex(p.as_bytes()),
                (None, Some(h)) => h,
                (None, None) => {
                    return Err(serde::de::Error::custom("script entry needs prompt or prompt_sha256"))
                }
            };
            out.script.entry(hash).or_default().extend(e.completions);
        }
        Ok(out)
    }
}

impl ModelEndpoint for ScriptedEndpoint {
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        let hash = req.prompt_hash();
        let scripted = self.script.get(&hash);
        (0..req.n_samples)
            .map(|i| {
                scripted
                    .and_then(|c| c.get(i))
                    .cloned()
                    .ok_or_else(|| GatewayError::ScriptExhausted {
                        prompt_hash: hash.clone(),
                        index: i,
                    })
            })
            .collect()
    }
}

/// Mock endpoint defined by a pure function of (request, sample index).
pub struct FnEndpoint<F>(pub F);

impl<F> ModelEndpoint for FnEndpoint<F>
where
    F: Fn(&ModelRequest, usize) -> Result<Completion, GatewayError> + Send + Sync,
{
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        (0..req.n_samples).map(|i| (self.0)(req, i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            initial_backoff: Duration::from_secs(1),
        }
    }
}

/// Runs `op` until it succeeds, fails with a non-retryable error, or the
/// attempts run out. Backoff doubles after each failure.
pub fn with_retries<T>(
    policy: RetryPolicy,
    mut sleep: impl FnMut(Duration),
    mut op: impl FnMut() -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let mut backoff = policy.initial_backoff;
    let mut attempt = 1;
    loop {
        match op() {
            Err(e) if e.is_retryable() && attempt < policy.attempts => {
                log::warn!("attempt {attempt} failed: {e}; retrying in {backoff:?}");
                sleep(backoff);
                backoff *= 2;
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// Chat-completion endpoint over HTTP JSON.
pub struct HttpEndpoint {
    url: String,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    n: usize,
    max_tokens: u32,
    temperature: f64,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
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
    #[serde(default)]
    content: Option<String>,
    #[serde(default)]
    reasoning_content: Option<String>,
}

impl HttpEndpoint {
    /// Reads the API key from `EXECFORGE_API_KEY` when set.
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            retry: RetryPolicy::default(),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .expect("http client"),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request_body(&self, req: &ModelRequest) -> serde_json::Value {
        serde_json::to_value(ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &req.prompt,
            }],
            n: req.n_samples,
            max_tokens: req.max_output_tokens,
            temperature: req.temperature,
            stop: &req.stop_markers,
        })
        .expect("chat request serializes")
    }

    fn call_once(&self, body: &serde_json::Value) -> Result<Vec<Completion>, GatewayError> {
        let mut rb = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            rb = rb.bearer_auth(key);
        }
        let resp = rb
            .send()
            .map_err(|e| GatewayError::EndpointUnavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::EndpointUnavailable(format!("http status {status}")));
        }
        if !status.is_success() {
            return Err(GatewayError::InvalidRequest(format!("http status {status}")));
        }
        let parsed: ChatResponse = resp
            .json()
            .map_err(|e| GatewayError::EndpointUnavailable(format!("bad response body: {e}")))?;
        Ok(parse_choices(parsed))
    }
}

fn parse_choices(resp: ChatResponse) -> Vec<Completion> {
    resp.choices
        .into_iter()
        .map(|c| split_thinking(c.message.reasoning_content, c.message.content.unwrap_or_default()))
        .collect()
}

/// Separates an inline `<think>...</think>` block from the answer body.
pub fn split_thinking(reasoning: Option<String>, content: String) -> Completion {
    if reasoning.is_some() {
        return Completion {
            thinking_text: reasoning,
            body_text: content,
        };
    }
    if let Some(rest) = content.trim_start().strip_prefix("<think>") {
        if let Some((thinking, body)) = rest.split_once("</think>") {
            return Completion {
                thinking_text: Some(thinking.trim().to_string()),
                body_text: body.trim().to_string(),
            };
        }
    }
    Completion {
        thinking_text: None,
        body_text: content,
    }
}

impl ModelEndpoint for HttpEndpoint {
    fn generate(&self, req: &ModelRequest) -> Result<Vec<Completion>, GatewayError> {
        req.validate()?;
        let body = self.request_body(req);
        with_retries(self.retry, std::thread::sleep, || self.call_once(&body))
    }
}

/// Path-like key in the artifact bucket.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ArtifactKey(String);

impl ArtifactKey {
    pub fn new(key: impl Into<String>) -> Result<Self, GatewayError> {
        let key = key.into();
        let path = Path::new(&key);
        let ok = !key.is_empty()
            && !key.ends_with('/')
            && path
                .components()
                .all(|c| matches!(c, Component::Normal(s) if !s.to_string_lossy().starts_with('.')));
        if ok {
            Ok(Self(key))
        } else {
            Err(GatewayError::InvalidKey(key))
        }
    }

    /// `runs/<run_id>/epoch<k>/idea<j>.zip`
    pub fn codebase(run_id: &str, epoch: u32, idea: usize) -> Result<Self, GatewayError> {
        Self::new(format!("runs/{run_id}/epoch{epoch}/idea{idea}.zip"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_codebase(&self) -> bool {
        self.0.starts_with("runs/") && self.0.ends_with(".zip")
    }

    /// Sibling key with the `.zip` extension replaced.
    pub fn sibling(&self, extension: &str) -> Self {
        let stem = self.0.strip_suffix(".zip").unwrap_or(&self.0);
        Self(format!("{stem}.{extension}"))
    }

    /// `<run_id>/epoch<k>/idea<j>` for codebase keys; the key itself otherwise.
    pub fn run_scope(&self) -> String {
        let s = self.0.strip_prefix("runs/").unwrap_or(&self.0);
        s.strip_suffix(".zip").unwrap_or(s).to_string()
    }
}

impl TryFrom<String> for ArtifactKey {
    type Error = GatewayError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ArtifactKey> for String {
    fn from(k: ArtifactKey) -> String {
        k.0
    }
}

impl std::fmt::Display for ArtifactKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Position in the store's key stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cursor(pub u64);

pub trait ArtifactStore: Send + Sync {
    /// Stores `bytes` under `key` and returns the content digest. Idempotent
    /// for identical bytes.
    fn put_artifact(&self, key: &ArtifactKey, bytes: &[u8]) -> Result<String, GatewayError>;
    fn get_artifact(&self, key: &ArtifactKey) -> Result<Vec<u8>, GatewayError>;
    /// Keys first stored at or after `since`, in storage order, plus the
    /// cursor to pass next time.
    fn list_new(&self, since: Cursor) -> Result<(Vec<ArtifactKey>, Cursor), GatewayError>;
}

#[derive(Default)]
struct MemoryInner {
    order: Vec<ArtifactKey>,
    blobs: HashMap<ArtifactKey, (String, Vec<u8>)>,
}

/// In-memory bucket.
#[derive(Default)]
pub struct MemoryStore {
    inner: Mutex<MemoryInner>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ArtifactStore for MemoryStore {
    fn put_artifact(&self, key: &ArtifactKey, bytes: &[u8]) -> Result<String, GatewayError> {
        let digest = sha256_hex(bytes);
        let mut inner = self.inner.lock().unwrap();
        if let Some((existing, _)) = inner.blobs.get(key) {
            return if *existing == digest {
                Ok(digest)
            } else {
                Err(GatewayError::KeyConflict(key.to_string()))
            };
        }
        inner.blobs.insert(key.clone(), (digest.clone(), bytes.to_vec()));
        inner.order.push(key.clone());
        Ok(digest)
    }

    fn get_artifact(&self, key: &ArtifactKey) -> Result<Vec<u8>, GatewayError> {
        self.inner
            .lock()
            .unwrap()
            .blobs
            .get(key)
            .map(|(_, b)| b.clone())
            .ok_or_else(|| GatewayError::UnknownKey(key.to_string()))
    }

    fn list_new(&self, since: Cursor) -> Result<(Vec<ArtifactKey>, Cursor), GatewayError> {
        let inner = self.inner.lock().unwrap();
        let start = (since.0 as usize).min(inner.order.len());
        Ok((inner.order[start..].to_vec(), Cursor(inner.order.len() as u64)))
    }
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    seq: u64,
    key: ArtifactKey,
    digest: String,
}

/// Bucket backed by a directory. Blobs live at `<root>/<key>`; the key
/// stream is an append-only `.index.jsonl` whose line number is the cursor.
pub struct FsStore {
    root: PathBuf,
    guard: Mutex<()>,
}

const INDEX_FILE: &str = ".index.jsonl";

fn io_err(e: std::io::Error) -> GatewayError {
    GatewayError::StoreUnavailable(e.to_string())
}

/// Exclusive advisory lock on an open file, released on drop.
struct FileLock<'a>(&'a File);

impl<'a> FileLock<'a> {
    fn acquire(file: &'a File) -> std::io::Result<Self> {
        // SAFETY: flock on a valid, owned descriptor.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX) };
        if rc != 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(Self(file))
    }
}

impl Drop for FileLock<'_> {
    fn drop(&mut self) {
        // SAFETY: same descriptor that was locked.
        unsafe {
            libc::flock(self.0.as_raw_fd(), libc::LOCK_UN);
        }
    }
}

impl FsStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err)?;
        Ok(Self {
            root,
            guard: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn read_index(&self) -> Result<Vec<IndexLine>, GatewayError> {
        match fs::read_to_string(self.root.join(INDEX_FILE)) {
            Ok(text) => text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    serde_json::from_str(l)
                        .map_err(|e| GatewayError::StoreUnavailable(format!("corrupt index: {e}")))
                })
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(e)),
        }
    }
}

impl ArtifactStore for FsStore {
    fn put_artifact(&self, key: &ArtifactKey, bytes: &[u8]) -> Result<String, GatewayError> {
        let digest = sha256_hex(bytes);
        let _local = self.guard.lock().unwrap();
        let index_file = OpenOptions::new()
            .create(true)
            .append(true)
            .read(true)
            .open(self.root.join(INDEX_FILE))
            .map_err(io_err)?;
        let _lock = FileLock::acquire(&index_file).map_err(io_err)?;
        let index = self.read_index()?;
        if let Some(line) = index.iter().find(|l| &l.key == key) {
            return if line.digest == digest {
                Ok(digest)
            } else {
                Err(GatewayError::KeyConflict(key.to_string()))
            };
        }
        let path = self.root.join(key.as_str());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let tmp = path.with_extension("partial");
        fs::write(&tmp, bytes).map_err(io_err)?;
        fs::rename(&tmp, &path).map_err(io_err)?;
        let mut line = serde_json::to_string(&IndexLine {
            seq: index.len() as u64,
            key: key.clone(),
            digest: digest.clone(),
        })
        .expect("index line serializes");
        line.push('\n');
        (&index_file).write_all(line.as_bytes()).map_err(io_err)?;
        Ok(digest)
    }

    fn get_artifact(&self, key: &ArtifactKey) -> Result<Vec<u8>, GatewayError> {
        match fs::read(self.root.join(key.as_str())) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(GatewayError::UnknownKey(key.to_string())),
            Err(e) => Err(io_err(e)),
        }
    }

    fn list_new(&self, since: Cursor) -> Result<(Vec<ArtifactKey>, Cursor), GatewayError> {
        let index = self.read_index()?;
        let end = index.len() as u64;
        let keys = index
            .into_iter()
            .filter(|l| l.seq >= since.0)
            .map(|l| l.key)
            .collect();
        Ok((keys, Cursor(end.max(since.0))))
    }
}

/// Append-only sink for run metrics.
pub trait MetricsSink: Send + Sync {
    fn log_metrics(&self, run_id: &str, records: &[MetricRecord]) -> Result<(), GatewayError>;
    fn read_metrics(&self, run_id: &str) -> Result<Vec<MetricRecord>, GatewayError>;
}

type MetricKey = (u64, String);

/// Merges `records` into `existing`, returning only the new ones; identical
/// duplicates are dropped and differing duplicates rejected.
fn merge_metrics(
    run_id: &str,
    existing: &BTreeMap<MetricKey, f64>,
    records: &[MetricRecord],
) -> Result<Vec<MetricRecord>, GatewayError> {
    let mut fresh: Vec<MetricRecord> = Vec::new();
    let mut staged: BTreeMap<MetricKey, f64> = BTreeMap::new();
    for r in records {
        let k = (r.step, r.name.clone());
        let prior = existing.get(&k).or_else(|| staged.get(&k));
        match prior {
            Some(&v) if v.to_bits() == r.value.to_bits() => {}
            Some(&v) => {
                return Err(GatewayError::ConflictingDuplicate {
                    run_id: run_id.to_string(),
                    step: r.step,
                    name: r.name.clone(),
                    existing: v,
                    new: r.value,
                })
            }
            None => {
                staged.insert(k, r.value);
                fresh.push(r.clone());
            }
        }
    }
    Ok(fresh)
}

#[derive(Default)]
pub struct MemorySink {
    runs: Mutex<HashMap<String, (BTreeMap<MetricKey, f64>, Vec<MetricRecord>)>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }
}

impl MetricsSink for MemorySink {
    fn log_metrics(&self, run_id: &str, records: &[MetricRecord]) -> Result<(), GatewayError> {
        let mut runs = self.runs.lock().unwrap();
        let (index, log) = runs.entry(run_id.to_string()).or_default();
        let fresh = merge_metrics(run_id, index, records)?;
        for r in fresh {
            index.insert((r.step, r.name.clone()), r.value);
            log.push(r);
        }
        Ok(())
    }

    fn read_metrics(&self, run_id: &str) -> Result<Vec<MetricRecord>, GatewayError> {
        Ok(self
            .runs
            .lock()
            .unwrap()
            .get(run_id)
            .map(|(_, log)| log.clone())
            .unwrap_or_default())
    }
}

/// One JSONL file per run under `<root>/metrics/`.
pub struct FsSink {
    dir: PathBuf,
    guard: Mutex<()>,
}

impl FsSink {
    pub fn open(root: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let dir = root.as_ref().join("metrics");
        fs::create_dir_all(&dir).map_err(io_err)?;
        Ok(Self {
            dir,
            guard: Mutex::new(()),
        })
    }

    fn path_for(&self, run_id: &str) -> PathBuf {
        let safe: String = run_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
            .collect();
        self.dir.join(format!("{safe}.jsonl"))
    }
}

impl MetricsSink for FsSink {
    fn log_metrics(&self, run_id: &str, records: &[MetricRecord]) -> Result<(), GatewayError> {
        let _g = self.guard.lock().unwrap();
        let existing = self.read_metrics(run_id)?;
        let index: BTreeMap<MetricKey, f64> = existing
            .into_iter()
            .map(|r| ((r.step, r.name), r.value))
            .collect();
        let fresh = merge_metrics(run_id, &index, records)?;
        if fresh.is_empty() {
            return Ok(());
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.path_for(run_id))
            .map_err(io_err)?;
        crate::domain::write_jsonl(file, fresh).map_err(io_err)
    }

    fn read_metrics(&self, run_id: &str) -> Result<Vec<MetricRecord>, GatewayError> {
        match fs::read_to_string(self.path_for(run_id)) {
            Ok(text) => crate::domain::read_jsonl(&text)
                .map_err(|e| GatewayError::StoreUnavailable(format!("corrupt metrics file: {e}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
            Err(e) => Err(io_err(e)),
        }
    }
}
