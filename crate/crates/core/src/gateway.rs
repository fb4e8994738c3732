//! Chat-completions client with record/replay cassettes, retries, rate
//! limiting and resumable batches.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const ENV_URL: &str = "MATHCEPT_LLM_URL";
pub const ENV_KEY: &str = "MATHCEPT_LLM_KEY";
pub const ENV_MODEL: &str = "MATHCEPT_LLM_MODEL";

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("network failure after {attempts} attempt(s): {message}")]
    Network { attempts: u32, message: String },
    #[error("HTTP {status}: {excerpt}")]
    Http { status: u16, excerpt: String },
    #[error("unexpected response body: {0}")]
    Decode(String),
    #[error("cassette has no response for prompt {hash}")]
    CacheMiss { hash: String },
    #[error("{0} mode needs a cassette")]
    NoCassette(Mode),
    #[error("cassette {path}: {message}")]
    Cassette { path: PathBuf, message: String },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("cancelled before this item ran")]
    Cancelled,
    #[error("invalid gateway configuration: {0}")]
    Config(String),
}

impl GatewayError {
    fn retryable(&self) -> bool {
        match self {
            GatewayError::Network { .. } => true,
            GatewayError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Live,
    Replay,
    Record,
}

impl FromStr for Mode {
    type Err = GatewayError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(Mode::Live),
            "replay" => Ok(Mode::Replay),
            "record" => Ok(Mode::Record),
            other => Err(GatewayError::Config(format!(
                "unknown mode {other:?} (expected live, replay or record)"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Live => "live",
            Mode::Replay => "replay",
            Mode::Record => "record",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub api_key: Option<String>,
    pub model_id: String,
    pub temperature: f64,
    pub max_retries: u32,
    /// 0 disables the limiter.
    pub requests_per_minute: u32,
    pub mode: Mode,
    /// First backoff delay; each further retry doubles it.
    pub retry_base: Duration,
    pub timeout: Duration,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: "https://api.openai.com/v1".into(),
            api_key: None,
            model_id: "gpt-3.5-turbo".into(),
            temperature: 0.0,
            max_retries: 3,
            requests_per_minute: 60,
            mode: Mode::Replay,
            retry_base: Duration::from_secs(1),
            timeout: Duration::from_secs(120),
        }
    }
}

impl GatewayConfig {
    /// Override endpoint, key and model from the environment when set.
    pub fn with_env(mut self) -> Self {
        if let Ok(url) = std::env::var(ENV_URL) {
            self.endpoint_url = url;
        }
        if let Ok(key) = std::env::var(ENV_KEY) {
            self.api_key = Some(key);
        }
        if let Ok(model) = std::env::var(ENV_MODEL) {
            self.model_id = model;
        }
        self
    }

    fn completions_url(&self) -> String {
        let base = self.endpoint_url.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }
}

/// Lowercase hex SHA-256 of the rendered prompt.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One recorded prompt/response pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt_hash: String,
    pub prompt_text: String,
    pub response_text: String,
    pub model_id: String,
    pub timestamp: DateTime<Utc>,
}

impl Exchange {
    pub fn new(prompt: &str, response: &str, model_id: &str) -> Self {
        Exchange {
            prompt_hash: prompt_hash(prompt),
            prompt_text: prompt.to_string(),
            response_text: response.to_string(),
            model_id: model_id.to_string(),
            timestamp: Utc::now(),
        }
    }
}

/// Append-only JSONL store of exchanges, keyed by prompt hash.
///
/// Entries present at load time are read without locking; new recordings go
/// to the file through a mutex. When a hash appears twice the later entry wins.
pub struct Cassette {
    path: Option<PathBuf>,
    entries: HashMap<String, Exchange>,
    writer: Mutex<Option<File>>,
}

impl Cassette {
    pub fn in_memory(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        Cassette {
            path: None,
            entries: exchanges
                .into_iter()
                .map(|e| (e.prompt_hash.clone(), e))
                .collect(),
            writer: Mutex::new(None),
        }
    }

    /// Load a cassette file. A missing file is an empty cassette.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let err = |message: String| GatewayError::Cassette {
            path: path.clone(),
            message,
        };
        let mut entries = HashMap::new();
        match File::open(&path) {
            Ok(f) => {
                for (i, line) in BufReader::new(f).lines().enumerate() {
                    let line = line.map_err(|e| err(e.to_string()))?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let ex: Exchange = serde_json::from_str(&line)
                        .map_err(|e| err(format!("line {}: {e}", i + 1)))?;
                    if ex.prompt_hash != prompt_hash(&ex.prompt_text) {
                        return Err(err(format!(
                            "line {}: prompt_hash does not match prompt_text",
                            i + 1
                        )));
                    }
                    entries.insert(ex.prompt_hash.clone(), ex);
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(err(e.to_string())),
        }
        Ok(Cassette {
            path: Some(path),
            entries,
            writer: Mutex::new(None),
        })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, hash: &str) -> Option<&Exchange> {
        self.entries.get(hash)
    }

    pub fn exchanges(&self) -> impl Iterator<Item = &Exchange> {
        self.entries.values()
    }

    /// Append one exchange to the backing file (no-op for in-memory cassettes).
    pub fn append(&self, exchange: &Exchange) -> Result<(), GatewayError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let err = |e: std::io::Error| GatewayError::Cassette {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut line = serde_json::to_string(exchange).expect("exchange serializes");
        line.push('\n');
        let mut guard = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        if guard.is_none() {
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(err)?;
            *guard = Some(file);
        }
        let file = guard.as_mut().expect("opened above");
        file.write_all(line.as_bytes()).map_err(err)?;
        file.flush().map_err(err)
    }
}

/// Transport for one chat completion.
pub trait ChatBackend: Send + Sync {
    fn send(&self, prompt: &str) -> Result<String, GatewayError>;
}

/// OpenAI-compatible chat-completions over HTTP: one user message per prompt.
pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    api_key: Option<String>,
    model_id: String,
    temperature: f64,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
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
    #[serde(default)]
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: &GatewayConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpBackend {
            agent,
            url: config.completions_url(),
            api_key: config.api_key.clone(),
            model_id: config.model_id.clone(),
            temperature: config.temperature,
        }
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, prompt: &str) -> Result<String, GatewayError> {
        let body = ChatRequest {
            model: &self.model_id,
            temperature: self.temperature,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let network = |e: ureq::Error| GatewayError::Network {
            attempts: 1,
            message: e.to_string(),
        };
        let resp = req.send_json(&body).map_err(network)?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(network)?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Http {
                status,
                excerpt: excerpt(&text),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::Decode(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| GatewayError::Decode("no choices[0].message.content".into()))
    }
}

fn excerpt(body: &str) -> String {
    const MAX: usize = 300;
    match body.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &body[..i]),
        None => body.to_string(),
    }
}

/// Spaces requests at least `60 / rpm` seconds apart.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Option<Duration>,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: u32) -> Self {
        RateLimiter {
            interval: (requests_per_minute > 0)
                .then(|| Duration::from_secs(60) / requests_per_minute),
            next: Mutex::new(None),
        }
    }

    /// Claim the next send slot at or after `now` and return it.
    pub fn reserve(&self, now: Instant) -> Instant {
        let Some(interval) = self.interval else {
            return now;
        };
        let mut next = self.next.lock().unwrap_or_else(|p| p.into_inner());
        let slot = match *next {
            Some(n) if n > now => n,
            _ => now,
        };
        *next = Some(slot + interval);
        slot
    }

    pub fn wait(&self) {
        let now = Instant::now();
        let slot = self.reserve(now);
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

pub struct Gateway {
    config: GatewayConfig,
    backend: Option<Box<dyn ChatBackend>>,
    cassette: Option<Cassette>,
    limiter: RateLimiter,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.config.mode)
            .field("model_id", &self.config.model_id)
            .field("cassette", &self.cassette.as_ref().map(|c| c.len()))
            .finish()
    }
}

impl Gateway {
    /// Build a gateway. Replay mode never creates an HTTP client.
    pub fn new(config: GatewayConfig, cassette: Option<Cassette>) -> Result<Self, GatewayError> {
        let backend: Option<Box<dyn ChatBackend>> = match config.mode {
            Mode::Replay => None,
            Mode::Live | Mode::Record => Some(Box::new(HttpBackend::new(&config))),
        };
        Self::assemble(config, backend, cassette)
    }

    /// Build a gateway around a custom transport.
    pub fn with_backend(
        config: GatewayConfig,
        backend: Box<dyn ChatBackend>,
        cassette: Option<Cassette>,
    ) -> Result<Self, GatewayError> {
        let backend = (config.mode != Mode::Replay).then_some(backend);
        Self::assemble(config, backend, cassette)
    }

    /// A replay gateway over an in-memory cassette.
    pub fn replay(exchanges: impl IntoIterator<Item = Exchange>) -> Self {
        let config = GatewayConfig {
            mode: Mode::Replay,
            ..GatewayConfig::default()
        };
        Self::assemble(config, None, Some(Cassette::in_memory(exchanges)))
            .expect("replay with cassette is valid")
    }

    fn assemble(
        config: GatewayConfig,
        backend: Option<Box<dyn ChatBackend>>,
        cassette: Option<Cassette>,
    ) -> Result<Self, GatewayError> {
        if matches!(config.mode, Mode::Replay | Mode::Record) && cassette.is_none() {
            return Err(GatewayError::NoCassette(config.mode));
        }
        if !(0.0..=2.0).contains(&config.temperature) {
            return Err(GatewayError::Config(format!(
                "temperature {} outside [0, 2]",
                config.temperature
            )));
        }
        let limiter = RateLimiter::new(config.requests_per_minute);
        Ok(Gateway {
            config,
            backend,
            cassette,
            limiter,
        })
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn cassette(&self) -> Option<&Cassette> {
        self.cassette.as_ref()
    }

    pub fn complete(&self, prompt: &str) -> Result<String, GatewayError> {
        match self.config.mode {
            Mode::Replay => {
                let hash = prompt_hash(prompt);
                self.cassette
                    .as_ref()
                    .and_then(|c| c.get(&hash))
                    .map(|e| e.response_text.clone())
                    .ok_or(GatewayError::CacheMiss { hash })
            }
            Mode::Live => self.send_with_retry(prompt),
            Mode::Record => {
                let response = self.send_with_retry(prompt)?;
                let exchange = Exchange::new(prompt, &response, &self.config.model_id);
                if let Some(c) = &self.cassette {
                    c.append(&exchange)?;
                }
                Ok(response)
            }
        }
    }

    fn send_with_retry(&self, prompt: &str) -> Result<String, GatewayError> {
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no transport configured".into()))?;
        let mut attempt = 0u32;
        loop {
            self.limiter.wait();
            match backend.send(prompt) {
                Ok(text) => return Ok(text),
                Err(e) if e.retryable() && attempt < self.config.max_retries => {
                    let delay = self.config.retry_base * 2u32.saturating_pow(attempt);
                    log::warn!("request failed ({e}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(GatewayError::Network { message, .. }) => {
                    return Err(GatewayError::Network {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Complete many prompts with a worker pool.
    ///
    /// Results line up with `prompts`. Per-item failures are returned in
    /// place; only checkpoint I/O problems fail the whole call. With a
    /// checkpoint path, finished items are appended there and skipped on a
    /// later run.
    pub fn complete_batch(
        &self,
        prompts: &[String],
        options: &BatchOptions,
    ) -> Result<Vec<Result<String, GatewayError>>, GatewayError> {
        let workers = options.concurrency.max(1);
        let mut checkpoint = match &options.checkpoint {
            Some(p) => Some(Checkpoint::open(p, options.checkpoint_every)?),
            None => None,
        };

        let mut slots: Vec<Option<Result<String, GatewayError>>> =
            (0..prompts.len()).map(|_| None).collect();
        let mut pending = Vec::new();
        for (i, p) in prompts.iter().enumerate() {
            match checkpoint
                .as_ref()
                .and_then(|c| c.done.get(&prompt_hash(p)))
            {
                Some(resp) => slots[i] = Some(Ok(resp.clone())),
                None => pending.push(i),
            }
        }
        if pending.len() < prompts.len() {
            log::info!(
                "checkpoint: {} of {} prompts already done",
                prompts.len() - pending.len(),
                prompts.len()
            );
        }

        let results = Mutex::new(slots);
        let writer = Mutex::new(checkpoint.as_mut());
        let cursor = AtomicUsize::new(0);
        let finished = AtomicUsize::new(0);
        let write_error: Mutex<Option<GatewayError>> = Mutex::new(None);

        std::thread::scope(|scope| {
            for _ in 0..workers.min(pending.len().max(1)) {
                scope.spawn(|| loop {
                    if options.is_cancelled() || write_error.lock().unwrap().is_some() {
                        break;
                    }
                    let k = cursor.fetch_add(1, Ordering::SeqCst);
                    let Some(&i) = pending.get(k) else { break };
                    let prompt = &prompts[i];
                    let outcome = self.complete(prompt);
                    if let Ok(resp) = &outcome {
                        let mut w = writer.lock().unwrap();
                        if let Some(cp) = w.as_mut() {
                            if let Err(e) = cp.record(prompt, resp) {
                                *write_error.lock().unwrap() = Some(e);
                            }
                        }
                    }
                    results.lock().unwrap()[i] = Some(outcome);
                    let n = finished.fetch_add(1, Ordering::SeqCst) + 1;
                    if let Some(progress) = &options.progress {
                        progress(n);
                    }
                });
            }
        });

        if let Some(cp) = checkpoint.as_mut() {
            cp.flush()?;
        }
        if let Some(e) = write_error.into_inner().unwrap() {
            return Err(e);
        }
        Ok(results
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|r| r.unwrap_or(Err(GatewayError::Cancelled)))
            .collect())
    }
}

pub type ProgressFn = dyn Fn(usize) + Send + Sync;

#[derive(Clone)]
pub struct BatchOptions {
    pub concurrency: usize,
    pub checkpoint: Option<PathBuf>,
    /// Flush the checkpoint after this many completions.
    pub checkpoint_every: usize,
    /// Once set, no new items are started.
    pub cancel: Option<Arc<AtomicBool>>,
    /// Called with the number of items finished so far in this run.
    pub progress: Option<Arc<ProgressFn>>,
}

impl Default for BatchOptions {
    fn default() -> Self {
        BatchOptions {
            concurrency: 4,
            checkpoint: None,
            checkpoint_every: 10,
            cancel: None,
            progress: None,
        }
    }
}

impl fmt::Debug for BatchOptions {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BatchOptions")
            .field("concurrency", &self.concurrency)
            .field("checkpoint", &self.checkpoint)
            .field("checkpoint_every", &self.checkpoint_every)
            .finish_non_exhaustive()
    }
}

impl BatchOptions {
    fn is_cancelled(&self) -> bool {
        self.cancel
            .as_ref()
            .is_some_and(|c| c.load(Ordering::SeqCst))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    prompt_hash: String,
    response_text: String,
}

struct Checkpoint {
    path: PathBuf,
    done: HashMap<String, String>,
    file: File,
    buffer: String,
    buffered: usize,
    every: usize,
}

impl Checkpoint {
    fn open(path: &Path, every: usize) -> Result<Self, GatewayError> {
        let err = |e: std::io::Error| GatewayError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut done = HashMap::new();
        let mut torn_tail = false;
        match std::fs::read_to_string(path) {
            Ok(text) => {
                torn_tail = !text.is_empty() && !text.ends_with('\n');
                for line in text.lines() {
                    // a line cut short by a crash is simply redone
                    if let Ok(e) = serde_json::from_str::<CheckpointEntry>(line) {
                        done.insert(e.prompt_hash, e.response_text);
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(err(e)),
        }
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(err)?;
        if torn_tail {
            file.write_all(b"\n").map_err(err)?;
        }
        Ok(Checkpoint {
            path: path.to_path_buf(),
            done,
            file,
            buffer: String::new(),
            buffered: 0,
            every: every.max(1),
        })
    }

    fn record(&mut self, prompt: &str, response: &str) -> Result<(), GatewayError> {
        let entry = CheckpointEntry {
            prompt_hash: prompt_hash(prompt),
            response_text: response.to_string(),
        };
        self.buffer
            .push_str(&serde_json::to_string(&entry).expect("entry serializes"));
        self.buffer.push('\n');
        self.buffered += 1;
        if self.buffered >= self.every {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), GatewayError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let path = &self.path;
        let err = |e: std::io::Error| GatewayError::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        };
        self.file.write_all(self.buffer.as_bytes()).map_err(err)?;
        self.file.sync_data().map_err(err)?;
        self.buffer.clear();
        self.buffered = 0;
        Ok(())
    }
}
