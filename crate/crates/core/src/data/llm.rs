//! Chat-completion client that asks a language model for wrong-but-plausible
//! answers, with retry, bounded concurrency, and an offline fallback.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::records::{PreferenceRecord, RejectionSource};
use super::synthetic::confusable;
use crate::error::{Error, Result};
use crate::policy::Vocabulary;

pub const MAX_TRIES: usize = 5;
pub const MAX_REGENERATIONS: usize = 3;
pub const BACKOFF_BASE: Duration = Duration::from_secs(1);

pub const DEFAULT_TEMPLATE: &str = "You are helping build a preference dataset.\n\
Question: {prompt}\n\
Correct answer: {chosen}\n\
Allowed answers: {labels}\n\
Reply with one allowed answer that is plausible and coherent but different from the correct answer. \
Reply with the answer only.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub offline: bool,
    pub max_inflight: usize,
    pub timeout_seconds: u64,
    /// `{prompt}`, `{chosen}` and `{labels}` are substituted.
    pub prompt_template: String,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            endpoint_url: String::new(),
            model: String::new(),
            api_key_env: "LLM_API_KEY".into(),
            offline: true,
            max_inflight: 4,
            timeout_seconds: 30,
            prompt_template: DEFAULT_TEMPLATE.into(),
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_inflight == 0 {
            return Err(Error::invalid("max_inflight must be positive"));
        }
        if self.timeout_seconds == 0 {
            return Err(Error::invalid("timeout_seconds must be positive"));
        }
        if !self.offline && (self.endpoint_url.is_empty() || self.model.is_empty()) {
            return Err(Error::Llm("endpoint_url and model are required when not offline".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Rate limits, server errors, timeouts; retried with backoff.
    Transient(String),
    Fatal(String),
}

pub trait ChatTransport: Sync {
    /// Returns the first choice's message content.
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, TransportError>;
}

pub trait Sleeper: Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Blocking HTTP transport for chat-completion style endpoints.
pub struct HttpTransport {
    agent: ureq::Agent,
    url: String,
    api_key: String,
}

impl HttpTransport {
    pub fn from_config(cfg: &LlmConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env).map_err(|_| {
            Error::Llm(format!(
                "environment variable {} is not set",
                cfg.api_key_env
            ))
        })?;
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_seconds)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            agent,
            url: cfg.endpoint_url.clone(),
            api_key,
        })
    }
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> std::result::Result<String, TransportError> {
        let mut resp = self
            .agent
            .post(&self.url)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(request)
            .map_err(|e| match e {
                ureq::Error::Timeout(_)
                | ureq::Error::Io(_)
                | ureq::Error::ConnectionFailed
                | ureq::Error::HostNotFound => TransportError::Transient(e.to_string()),
                other => TransportError::Fatal(other.to_string()),
            })?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient(format!("http status {status}")));
        }
        if !(200..300).contains(&status) {
            return Err(TransportError::Fatal(format!("http status {status}")));
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Fatal(format!("bad response body: {e}")))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal("response has no choices[0].message.content".into()))
    }
}

/// Delays slept between the tries of one request: 1s, 2s, 4s, 8s.
pub fn backoff_schedule() -> Vec<Duration> {
    (0..MAX_TRIES - 1).map(|i| BACKOFF_BASE * (1 << i)).collect()
}

fn request_with_retry(
    transport: &dyn ChatTransport,
    request: &ChatRequest,
    sleeper: &dyn Sleeper,
    calls: &AtomicUsize,
) -> Result<String> {
    let delays = backoff_schedule();
    let mut last = String::new();
    for attempt in 0..MAX_TRIES {
        calls.fetch_add(1, Ordering::Relaxed);
        match transport.complete(request) {
            Ok(text) => return Ok(text),
            Err(TransportError::Fatal(e)) => return Err(Error::Llm(e)),
            Err(TransportError::Transient(e)) => {
                last = e;
                if let Some(d) = delays.get(attempt) {
                    sleeper.sleep(*d);
                }
            }
        }
    }
    Err(Error::Llm(format!("giving up after {MAX_TRIES} tries: {last}")))
}

pub fn render_prompt(template: &str, record: &PreferenceRecord, vocab: &Vocabulary) -> String {
    template
        .replace("{prompt}", record.prompt_text.as_deref().unwrap_or(""))
        .replace("{chosen}", &record.chosen)
        .replace("{labels}", &vocab.labels().join(", "))
}

/// A vocabulary label read from a reply, ignoring surrounding quotes and punctuation.
pub fn parse_answer(reply: &str, vocab: &Vocabulary) -> Option<usize> {
    let first = reply.trim().lines().next()?.trim();
    let cleaned = first.trim_matches(|c: char| c.is_whitespace() || "\"'`.,;:!*".contains(c));
    vocab.index_of(cleaned)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct LlmStats {
    pub requests: usize,
    pub generated: usize,
    pub fallbacks: usize,
}

type Filled = (String, RejectionSource);

/// Fills the empty `rejected` field of each record. Records that already
/// have a rejection are passed through. Output order matches input order.
pub fn llm_generate_rejections(
    records: Vec<PreferenceRecord>,
    vocab: &Vocabulary,
    cfg: &LlmConfig,
    transport: Option<&dyn ChatTransport>,
    sleeper: &dyn Sleeper,
    seed: u64,
) -> Result<(Vec<PreferenceRecord>, LlmStats)> {
    cfg.validate()?;
    let pending: Vec<usize> = (0..records.len())
        .filter(|&i| records[i].rejected.is_empty())
        .collect();
    let calls = AtomicUsize::new(0);
    let fallback = |i: usize, r: &PreferenceRecord| -> Result<String> {
        let gold = vocab
            .index_of(&r.chosen)
            .ok_or_else(|| Error::invalid(format!("unknown label {:?}", r.chosen)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        Ok(vocab.label(confusable(&mut rng, gold, vocab.size())).unwrap().to_string())
    };
    let transport = match (cfg.offline, transport) {
        (true, _) => None,
        (false, Some(t)) => Some(t),
        (false, None) => return Err(Error::Llm("no transport configured".into())),
    };
    let fill_one = |i: usize| -> Result<(String, RejectionSource)> {
        let r = &records[i];
        if let Some(t) = transport {
            let request = ChatRequest {
                model: cfg.model.clone(),
                messages: vec![ChatMessage {
                    role: "user".into(),
                    content: render_prompt(&cfg.prompt_template, r, vocab),
                }],
            };
            for _ in 0..MAX_REGENERATIONS {
                let reply = request_with_retry(t, &request, sleeper, &calls)?;
                if let Some(y) = parse_answer(&reply, vocab) {
                    let label = vocab.label(y).unwrap();
                    if label != r.chosen {
                        return Ok((label.to_string(), RejectionSource::Llm));
                    }
                }
            }
        }
        Ok((fallback(i, r)?, RejectionSource::Synthetic))
    };

    let results: Vec<Mutex<Option<Result<Filled>>>> =
        pending.iter().map(|_| Mutex::new(None)).collect();
    let workers = if transport.is_some() {
        cfg.max_inflight.min(pending.len()).max(1)
    } else {
        1
    };
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= pending.len() {
                    break;
                }
                *results[k].lock().unwrap() = Some(fill_one(pending[k]));
            });
        }
    });

    let mut out = records.clone();
    let mut stats = LlmStats::default();
    for (k, slot) in results.into_iter().enumerate() {
        let (label, source) = slot.into_inner().unwrap().expect("every slot is filled")?;
        match source {
            RejectionSource::Llm => stats.generated += 1,
            _ => stats.fallbacks += 1,
        }
        let r = &mut out[pending[k]];
        r.rejected = label;
        r.rejection_source = source;
    }
    stats.requests = calls.into_inner();
    Ok((out, stats))
}
