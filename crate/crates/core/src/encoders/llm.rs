//! Fact summarization through an OpenAI-style chat-completions endpoint,
//! or an offline mock that keeps the first `word_limit` words.
//!
//! Every summary is cached permanently under `cache_dir` as
//! `<sha256 of backend key and text>.json`; a cached summary is never
//! requested again.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::EncoderError;

pub const DEFAULT_WORD_LIMIT: usize = 50;

/// `{word_limit}` and `{text}` are substituted.
pub const DEFAULT_PROMPT_TEMPLATE: &str =
    "Summarize the facts of the following legal case in {word_limit} words.\n\n{text}";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmMode {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmBackendConfig {
    pub mode: LlmMode,
    /// Full chat-completions URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub endpoint: String,
    pub model_name: String,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub request_parallelism: usize,
    /// Environment variable holding the bearer token; empty for none.
    pub api_key_env: String,
    pub prompt_template: String,
}

impl Default for LlmBackendConfig {
    fn default() -> Self {
        Self {
            mode: LlmMode::Mock,
            endpoint: String::new(),
            model_name: "mock".into(),
            max_retries: 3,
            timeout_secs: 60.0,
            request_parallelism: 4,
            api_key_env: String::new(),
            prompt_template: DEFAULT_PROMPT_TEMPLATE.into(),
        }
    }
}

impl LlmBackendConfig {
    pub fn mock() -> Self {
        Self::default()
    }

    fn cache_key(&self, text: &str, word_limit: usize) -> String {
        let mut h = Sha256::new();
        let backend = match self.mode {
            LlmMode::Mock => "mock".to_string(),
            LlmMode::Remote => format!("remote\u{0}{}\u{0}{}\u{0}{}", self.endpoint, self.model_name, self.prompt_template),
        };
        h.update(backend.as_bytes());
        h.update([0u8]);
        h.update(word_limit.to_le_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        hex::encode(h.finalize())
    }

    fn prompt(&self, text: &str, word_limit: usize) -> String {
        self.prompt_template
            .replace("{word_limit}", &word_limit.to_string())
            .replace("{text}", text)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    model: String,
    word_limit: usize,
    summary: String,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
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

/// First `limit` whitespace-separated words.
pub fn truncate_words(text: &str, limit: usize) -> String {
    text.split_whitespace().take(limit).collect::<Vec<_>>().join(" ")
}

pub struct Summarizer {
    config: LlmBackendConfig,
    cache_dir: PathBuf,
    api_key: Option<String>,
    client: Option<reqwest::blocking::Client>,
    network_calls: AtomicUsize,
    cache_writes: Mutex<()>,
}

impl Summarizer {
    pub fn new(config: LlmBackendConfig, cache_dir: impl Into<PathBuf>) -> Result<Self, EncoderError> {
        let cache_dir = cache_dir.into();
        fs::create_dir_all(&cache_dir).map_err(|source| EncoderError::Io {
            path: cache_dir.clone(),
            source,
        })?;
        let (client, api_key) = match config.mode {
            LlmMode::Mock => (None, None),
            LlmMode::Remote => {
                if config.endpoint.is_empty() {
                    return Err(EncoderError::Config("remote mode needs an endpoint".into()));
                }
                let api_key = if config.api_key_env.is_empty() {
                    None
                } else {
                    Some(std::env::var(&config.api_key_env).map_err(|_| {
                        EncoderError::Config(format!("environment variable {} is not set", config.api_key_env))
                    })?)
                };
                let client = reqwest::blocking::Client::builder()
                    .timeout(Duration::from_secs_f64(config.timeout_secs))
                    .build()
                    .map_err(|e| EncoderError::Config(e.to_string()))?;
                (Some(client), api_key)
            }
        };
        Ok(Self {
            config,
            cache_dir,
            api_key,
            client,
            network_calls: AtomicUsize::new(0),
            cache_writes: Mutex::new(()),
        })
    }

    pub fn config(&self) -> &LlmBackendConfig {
        &self.config
    }

    /// Number of HTTP requests issued so far, retries included.
    pub fn network_calls(&self) -> usize {
        self.network_calls.load(Ordering::SeqCst)
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(format!("{key}.json"))
    }

    fn read_cache(&self, path: &Path) -> Option<String> {
        let raw = fs::read_to_string(path).ok()?;
        serde_json::from_str::<CacheEntry>(&raw).ok().map(|e| e.summary)
    }

    fn write_cache(&self, path: &Path, word_limit: usize, summary: &str) -> Result<(), EncoderError> {
        let _guard = self.cache_writes.lock().unwrap_or_else(|e| e.into_inner());
        let entry = CacheEntry {
            model: self.config.model_name.clone(),
            word_limit,
            summary: summary.to_string(),
        };
        let tmp = path.with_extension("json.tmp");
        let io = |source| EncoderError::Io {
            path: path.to_path_buf(),
            source,
        };
        fs::write(&tmp, serde_json::to_string_pretty(&entry).expect("cache entry")).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Summary of `text` in at most `word_limit` words (mock) or as returned
    /// by the remote model.
    pub fn summarize(&self, text: &str, word_limit: usize) -> Result<String, EncoderError> {
        if text.trim().is_empty() {
            return Err(EncoderError::EmptyInput);
        }
        let path = self.cache_path(&self.config.cache_key(text, word_limit));
        if let Some(s) = self.read_cache(&path) {
            return Ok(s);
        }
        let summary = match self.config.mode {
            LlmMode::Mock => truncate_words(text, word_limit),
            LlmMode::Remote => self.request(text, word_limit)?,
        };
        self.write_cache(&path, word_limit, &summary)?;
        Ok(summary)
    }

    fn request(&self, text: &str, word_limit: usize) -> Result<String, EncoderError> {
        let client = self.client.as_ref().expect("remote mode has a client");
        let prompt = self.config.prompt(text, word_limit);
        let body = ChatRequest {
            model: &self.config.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: &prompt,
            }],
            temperature: 0.0,
        };
        let attempts = self.config.max_retries + 1;
        let mut last_status = None;
        let mut last_message = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(100 * attempt as u64));
            }
            self.network_calls.fetch_add(1, Ordering::SeqCst);
            let mut req = client.post(&self.config.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send() {
                Ok(resp) if resp.status().is_success() => {
                    let parsed: ChatResponse = resp.json().map_err(|e| EncoderError::Http {
                        attempts: attempt + 1,
                        status: None,
                        message: format!("unreadable completion: {e}"),
                    })?;
                    let content = parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .map(|c| c.trim().to_string())
                        .unwrap_or_default();
                    if content.is_empty() {
                        return Err(EncoderError::EmptyCompletion);
                    }
                    return Ok(content);
                }
                Ok(resp) => {
                    last_status = Some(resp.status().as_u16());
                    last_message = resp.text().unwrap_or_default();
                }
                Err(e) => {
                    last_status = e.status().map(|s| s.as_u16());
                    last_message = e.to_string();
                }
            }
            log::warn!("llm request attempt {} failed: {last_message}", attempt + 1);
        }
        Err(EncoderError::Http {
            attempts,
            status: last_status,
            message: last_message,
        })
    }

    /// Summarizes many texts with at most `request_parallelism` requests in
    /// flight. Results are keyed by id.
    pub fn summarize_many(
        &self,
        items: &[(String, String)],
        word_limit: usize,
    ) -> Result<BTreeMap<String, String>, EncoderError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.config.request_parallelism.max(1))
            .build()
            .map_err(|e| EncoderError::Config(e.to_string()))?;
        pool.install(|| {
            items
                .par_iter()
                .map(|(id, text)| Ok((id.clone(), self.summarize(text, word_limit)?)))
                .collect()
        })
    }
}
