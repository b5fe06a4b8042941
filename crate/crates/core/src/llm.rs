//! Answer generation through a pluggable text-generation backend.
//!
//! [`generate`] asks the backend for `num_answers` independent samples, one
//! request each, retrying transient failures with exponential backoff.
//! Backends: deterministic stubs for offline runs, an OpenAI-compatible
//! chat-completions client, and an on-disk cache that wraps either.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("num_answers must be at least 1")]
    NoAnswersRequested,
    #[error("backend returned an empty answer")]
    EmptyAnswer,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("unexpected response: {0}")]
    InvalidResponse(String),
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("{attempts} attempts failed, last error: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::EmptyAnswer | Self::Transport(_) | Self::InvalidResponse(_) => true,
            Self::Http { status, .. } => matches!(status, 408 | 409 | 429) || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    /// Answers sampled per prompt.
    pub num_answers: usize,
    /// Generation cap passed to the backend (`max_tokens`).
    pub max_answer_tokens: usize,
    pub temperature: f64,
    pub model_name: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each further retry.
    pub backoff_ms: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_answers: 5,
            max_answer_tokens: 256,
            temperature: 0.7,
            model_name: "gpt-3.5-turbo".to_string(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_ms: 500,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_answers == 0 {
            return Err("num_answers must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!(
                "temperature must be >= 0, got {}",
                self.temperature
            ));
        }
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(format!(
                "timeout_secs must be > 0, got {}",
                self.timeout_secs
            ));
        }
        Ok(())
    }
}

/// One sampling request.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    /// The bare query text; stubs may key on it, HTTP backends ignore it.
    pub query: &'a str,
    /// Position of this sample among the `num_answers` requested.
    pub sample_index: usize,
    /// Pipeline round; a second round draws fresh samples for the same prompt.
    pub round: u32,
    pub config: &'a GenerationConfig,
}

pub trait GenerationBackend: Send + Sync {
    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, LlmError>;

    /// Stable identity used in cache keys.
    fn fingerprint(&self) -> String;
}

/// The N answers for one prompt; never empty, no blank entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSet(Vec<String>);

impl AnswerSet {
    pub fn new(answers: Vec<String>) -> Option<Self> {
        let ok = !answers.is_empty() && answers.iter().all(|a| !a.trim().is_empty());
        ok.then_some(Self(answers))
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }
}

/// Per-answer results of a [`generate`] call.
#[derive(Debug, Clone)]
pub struct Generation {
    pub results: Vec<Result<String, LlmError>>,
    /// Backend calls made, retries included.
    pub calls: usize,
}

impl Generation {
    /// All requested answers, or the first failure.
    pub fn answer_set(&self) -> Result<AnswerSet, LlmError> {
        let answers = self
            .results
            .iter()
            .cloned()
            .collect::<Result<Vec<_>, _>>()?;
        AnswerSet::new(answers).ok_or(LlmError::EmptyAnswer)
    }

    /// Whatever succeeded (if anything) plus the failures.
    pub fn partial(&self) -> (Option<AnswerSet>, Vec<LlmError>) {
        let mut ok = Vec::new();
        let mut failed = Vec::new();
        for r in &self.results {
            match r {
                Ok(a) => ok.push(a.clone()),
                Err(e) => failed.push(e.clone()),
            }
        }
        (AnswerSet::new(ok), failed)
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.is_err()).count()
    }
}

fn complete_with_retries(
    backend: &dyn GenerationBackend,
    req: &GenerationRequest<'_>,
    calls: &mut usize,
) -> Result<String, LlmError> {
    let cfg = req.config;
    let mut attempt = 0u32;
    loop {
        *calls += 1;
        let err = match backend.complete(req) {
            Ok(text) if !text.trim().is_empty() => return Ok(text.trim().to_string()),
            Ok(_) => LlmError::EmptyAnswer,
            Err(e) => e,
        };
        if !err.is_retryable() {
            return Err(err);
        }
        if attempt >= cfg.max_retries {
            return Err(LlmError::RetriesExhausted {
                attempts: attempt + 1,
                last: Box::new(err),
            });
        }
        let delay = cfg.backoff_ms.saturating_mul(1u64 << attempt.min(16));
        if delay > 0 {
            log::debug!("retrying after {err} in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
        }
        attempt += 1;
    }
}

/// Sample `cfg.num_answers` answers for `prompt`, one request per answer.
pub fn generate(
    backend: &dyn GenerationBackend,
    prompt: &str,
    query: &str,
    cfg: &GenerationConfig,
    round: u32,
) -> Result<Generation, LlmError> {
    if prompt.trim().is_empty() {
        return Err(LlmError::EmptyPrompt);
    }
    if cfg.num_answers == 0 {
        return Err(LlmError::NoAnswersRequested);
    }
    let mut calls = 0;
    let results = (0..cfg.num_answers)
        .map(|sample_index| {
            let req = GenerationRequest {
                prompt,
                query,
                sample_index,
                round,
                config: cfg,
            };
            complete_with_retries(backend, &req, &mut calls)
        })
        .collect();
    Ok(Generation { results, calls })
}

fn default_hash_words() -> usize {
    16
}

/// Deterministic offline backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum StubMode {
    /// Answer with the first enumerated candidate (`1.` line) of the prompt,
    /// or the prompt's first line if there is none.
    EchoTopCandidate,
    /// Answer `answers[sample_index % len]`.
    FixedLexicon { answers: Vec<String> },
    /// Answer with words picked by hashing the prompt (or only the query
    /// text when `query_only`) together with the sample index.
    KeyedHash {
        #[serde(default)]
        query_only: bool,
        /// Words to pick from; when empty, hex tokens are emitted instead.
        #[serde(default)]
        vocabulary: Vec<String>,
        #[serde(default = "default_hash_words")]
        words: usize,
    },
    /// Every request fails; exercises the fallback path.
    Unavailable,
}

#[derive(Debug, Clone)]
pub struct StubBackend {
    mode: StubMode,
}

pub fn stub_backend(mode: StubMode) -> StubBackend {
    StubBackend { mode }
}

impl StubBackend {
    pub fn mode(&self) -> &StubMode {
        &self.mode
    }
}

fn echo_top_candidate(prompt: &str) -> String {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix("1."))
        .unwrap_or_else(|| prompt.lines().next().unwrap_or(""))
        .to_string()
}

fn keyed_hash(material: &str, sample_index: usize, vocabulary: &[String], words: usize) -> String {
    let mut out = Vec::with_capacity(words);
    let mut block = 0u64;
    while out.len() < words {
        let digest = Sha256::new()
            .chain_update(material.as_bytes())
            .chain_update((sample_index as u64).to_le_bytes())
            .chain_update(block.to_le_bytes())
            .finalize();
        for pair in digest.chunks_exact(2) {
            if out.len() == words {
                break;
            }
            let v = u16::from_le_bytes([pair[0], pair[1]]);
            out.push(if vocabulary.is_empty() {
                format!("h{v:04x}")
            } else {
                vocabulary[v as usize % vocabulary.len()].clone()
            });
        }
        block += 1;
    }
    out.join(" ")
}

impl GenerationBackend for StubBackend {
    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, LlmError> {
        match &self.mode {
            StubMode::EchoTopCandidate => Ok(echo_top_candidate(req.prompt)),
            StubMode::FixedLexicon { answers } => {
                if answers.is_empty() {
                    return Err(LlmError::Unavailable("fixed_lexicon has no answers".into()));
                }
                Ok(answers[req.sample_index % answers.len()].clone())
            }
            StubMode::KeyedHash {
                query_only,
                vocabulary,
                words,
            } => {
                let material = if *query_only { req.query } else { req.prompt };
                Ok(keyed_hash(material, req.sample_index, vocabulary, *words))
            }
            StubMode::Unavailable => Err(LlmError::Unavailable("stub backend is offline".into())),
        }
    }

    fn fingerprint(&self) -> String {
        format!(
            "stub:{}",
            serde_json::to_string(&self.mode).unwrap_or_default()
        )
    }
}

/// Client for OpenAI-compatible `POST {base_url}/chat/completions`.
pub struct OpenAiBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: usize,
    n: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

impl OpenAiBackend {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
        }
    }

    pub fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url)
    }
}

impl GenerationBackend for OpenAiBackend {
    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, LlmError> {
        let body = ChatRequest {
            model: &req.config.model_name,
            messages: [ChatMessage {
                role: "user",
                content: req.prompt,
            }],
            temperature: req.config.temperature,
            max_tokens: req.config.max_answer_tokens,
            n: 1,
        };
        let mut request = self.agent.post(&self.endpoint());
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(&body)
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            let mut body = text;
            body.truncate(500);
            return Err(LlmError::Http { status, body });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::InvalidResponse("no choices in response".into()))
    }

    fn fingerprint(&self) -> String {
        format!("openai:{}", self.base_url)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    answer: String,
}

/// Caches successful completions on disk, keyed by a hash of the backend
/// identity, generation settings, prompt, sample index and round.
pub struct CachedBackend {
    inner: Box<dyn GenerationBackend>,
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl CachedBackend {
    pub fn new(
        inner: Box<dyn GenerationBackend>,
        dir: impl Into<PathBuf>,
    ) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        })
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    fn key(&self, req: &GenerationRequest<'_>) -> String {
        let material = serde_json::json!({
            "backend": self.inner.fingerprint(),
            "model": req.config.model_name,
            "temperature": req.config.temperature,
            "max_tokens": req.config.max_answer_tokens,
            "prompt": req.prompt,
            "query": req.query,
            "sample": req.sample_index,
            "round": req.round,
        });
        hex::encode(Sha256::digest(material.to_string().as_bytes()))
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn store(&self, path: &Path, answer: &str) -> std::io::Result<()> {
        let parent = path.parent().expect("cache path has a parent");
        fs::create_dir_all(parent)?;
        let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
        serde_json::to_writer(
            &mut tmp,
            &CacheEntry {
                answer: answer.to_string(),
            },
        )?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| e.error)?;
        Ok(())
    }
}

impl GenerationBackend for CachedBackend {
    fn complete(&self, req: &GenerationRequest<'_>) -> Result<String, LlmError> {
        let path = self.path_for(&self.key(req));
        if let Ok(bytes) = fs::read(&path) {
            if let Ok(entry) = serde_json::from_slice::<CacheEntry>(&bytes) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(entry.answer);
            }
            log::warn!("ignoring unreadable cache entry {}", path.display());
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let answer = self.inner.complete(req)?;
        if !answer.trim().is_empty() {
            if let Err(e) = self.store(&path, &answer) {
                log::warn!("could not write cache entry {}: {e}", path.display());
            }
        }
        Ok(answer)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }
}
