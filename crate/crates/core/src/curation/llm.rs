//! Narration classification through a text-completion model.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::NarrationCandidate;
use crate::annotation::tokenize;

const PROMPT_QUESTION: &str =
    "Q: Does the action described in above narration require any repeating motion? If the action is walking say no. A:";

/// The exact classification prompt for one narration.
pub fn build_prompt(narration: &str) -> String {
    let text = narration.trim().trim_end_matches('.');
    format!("Narration: {text}. {PROMPT_QUESTION}")
}

fn narration_of(prompt: &str) -> Option<&str> {
    let rest = prompt.strip_prefix("Narration: ")?;
    let end = rest.rfind(". Q:")?;
    Some(&rest[..end])
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LlmError {
    #[error("model unavailable: {0}")]
    Unavailable(String),
    #[error("reply `{0}` is neither yes nor no")]
    Unparseable(String),
    #[error("missing configuration: {0}")]
    Config(String),
}

/// Anything that completes a prompt with text.
pub trait LlmClient: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;

    fn name(&self) -> &str {
        "llm"
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        (**self).complete(prompt)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Reads a yes/no answer from the start of a reply.
pub fn interpret_reply(reply: &str) -> Option<bool> {
    let word: String = reply
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphabetic())
        .collect::<String>()
        .to_lowercase();
    match word.as_str() {
        "yes" | "y" | "true" => Some(true),
        "no" | "n" | "false" => Some(false),
        _ => None,
    }
}

/// Verb stems that imply a repeating motion.
pub const REPETITIVE_STEMS: &[&str] = &[
    "brush", "chop", "clap", "climb", "comb", "cut", "dice", "dig", "dribbl", "drill", "file", "grat", "grind",
    "hammer", "jump", "knead", "knit", "mash", "mix", "mop", "operat", "paddl", "pedal", "peel", "pound", "pump",
    "rak", "rins", "row", "rub", "sand", "saw", "scrap", "scrub", "sew", "shak", "shovel", "sieve", "skip", "slic",
    "spread", "squeez", "stir", "stitch", "strum", "sweep", "swip", "tap", "typ", "wash", "whisk", "wip", "wring",
];

/// Verb stems of one-off actions; only used for explanations.
pub const ONE_OFF_STEMS: &[&str] = &[
    "carr", "clos", "drop", "enter", "exit", "hold", "leav", "lift", "look", "move", "open", "pass", "pick", "plac",
    "put", "sit", "stand", "take", "throw", "turn", "watch",
];

pub const WALKING_STEMS: &[&str] = &["walk", "stroll", "wander"];

/// Outcome of the keyword rules with the stem that decided it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeywordDecision {
    pub repetitive: bool,
    pub matched: Option<&'static str>,
    /// The narration looks like stair climbing, which the rules count as
    /// repetitive even though it resembles walking.
    pub ambiguous: bool,
}

fn first_match(tokens: &[String], stems: &'static [&'static str]) -> Option<&'static str> {
    tokens
        .iter()
        .find_map(|t| stems.iter().copied().find(|s| t.starts_with(s)))
}

/// Deterministic offline stand-in for the model.
#[derive(Debug, Clone, Default)]
pub struct KeywordLlm;

impl KeywordLlm {
    pub fn classify(narration: &str) -> KeywordDecision {
        let tokens = tokenize(narration);
        if let Some(stem) = first_match(&tokens, WALKING_STEMS) {
            return KeywordDecision {
                repetitive: false,
                matched: Some(stem),
                ambiguous: false,
            };
        }
        if let Some(stem) = first_match(&tokens, REPETITIVE_STEMS) {
            let ambiguous = tokens.iter().any(|t| t.starts_with("stair"));
            return KeywordDecision {
                repetitive: true,
                matched: Some(stem),
                ambiguous,
            };
        }
        KeywordDecision {
            repetitive: false,
            matched: first_match(&tokens, ONE_OFF_STEMS),
            ambiguous: false,
        }
    }
}

impl LlmClient for KeywordLlm {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        let narration = narration_of(prompt).unwrap_or(prompt);
        let d = Self::classify(narration);
        if d.ambiguous {
            log::warn!("stair climbing counted as repetitive despite the walking exclusion: {narration:?}");
        }
        Ok(if d.repetitive { "yes" } else { "no" }.to_string())
    }

    fn name(&self) -> &str {
        "keyword"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_delay: Duration::from_millis(250),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            factor: 1.0,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterDecision {
    Repetitive,
    NotRepetitive,
    /// The client never produced a usable answer; the clip is excluded.
    Undecided,
}

impl FilterDecision {
    pub fn is_repetitive(self) -> bool {
        self == FilterDecision::Repetitive
    }
}

/// Asks `client` whether the candidate's narration implies repetition,
/// retrying with exponential backoff.
pub fn narration_filter<C: LlmClient + ?Sized>(
    candidate: &NarrationCandidate,
    client: &C,
    retry: &RetryPolicy,
) -> FilterDecision {
    if candidate.narration_text.trim().is_empty() {
        log::warn!("empty narration for {}; undecided", candidate.video_id);
        return FilterDecision::Undecided;
    }
    let prompt = build_prompt(&candidate.narration_text);
    for attempt in 0..retry.max_attempts.max(1) {
        if attempt > 0 {
            std::thread::sleep(retry.delay(attempt - 1));
        }
        let err = match client.complete(&prompt) {
            Ok(reply) => match interpret_reply(&reply) {
                Some(true) => return FilterDecision::Repetitive,
                Some(false) => return FilterDecision::NotRepetitive,
                None => LlmError::Unparseable(reply),
            },
            Err(e) => e,
        };
        log::debug!("{} attempt {} failed: {err}", client.name(), attempt + 1);
    }
    log::warn!(
        "no answer for {} @ {:.3}s after {} attempts; undecided",
        candidate.video_id,
        candidate.narration_timestamp,
        retry.max_attempts.max(1)
    );
    FilterDecision::Undecided
}

/// Bounds concurrent requests and spaces their start times.
pub struct Throttled<C> {
    inner: C,
    max_in_flight: usize,
    min_interval: Duration,
    in_flight: Mutex<usize>,
    freed: Condvar,
    next_start: Mutex<Instant>,
}

impl<C: LlmClient> Throttled<C> {
    pub fn new(inner: C, max_in_flight: usize, requests_per_sec: Option<f64>) -> Self {
        let min_interval = match requests_per_sec {
            Some(r) if r > 0.0 => Duration::from_secs_f64(1.0 / r),
            _ => Duration::ZERO,
        };
        Self {
            inner,
            max_in_flight: max_in_flight.max(1),
            min_interval,
            in_flight: Mutex::new(0),
            freed: Condvar::new(),
            next_start: Mutex::new(Instant::now()),
        }
    }

    pub fn into_inner(self) -> C {
        self.inner
    }
}

impl<C: LlmClient> LlmClient for Throttled<C> {
    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        {
            let mut n = self.in_flight.lock().expect("throttle lock");
            while *n >= self.max_in_flight {
                n = self.freed.wait(n).expect("throttle lock");
            }
            *n += 1;
        }
        let wait = {
            let mut next = self.next_start.lock().expect("throttle lock");
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
        let out = self.inner.complete(prompt);
        *self.in_flight.lock().expect("throttle lock") -= 1;
        self.freed.notify_one();
        out
    }

    fn name(&self) -> &str {
        self.inner.name()
    }
}

#[cfg(feature = "remote-llm")]
pub use remote::RemoteLlm;

#[cfg(feature = "remote-llm")]
mod remote {
    use super::{LlmClient, LlmError};

    pub const ENDPOINT_VAR: &str = "REPFORGE_LLM_ENDPOINT";
    pub const MODEL_VAR: &str = "REPFORGE_LLM_MODEL";
    pub const KEY_VAR: &str = "REPFORGE_LLM_KEY";

    /// Completion-style HTTP endpoint (`{"model", "prompt"}` in, `text` or
    /// `choices[0].text` out).
    pub struct RemoteLlm {
        endpoint: String,
        model: String,
        key: Option<String>,
        http: reqwest::blocking::Client,
    }

    impl RemoteLlm {
        pub fn new(endpoint: impl Into<String>, model: impl Into<String>, key: Option<String>) -> Self {
            Self {
                endpoint: endpoint.into(),
                model: model.into(),
                key,
                http: reqwest::blocking::Client::new(),
            }
        }

        pub fn from_env() -> Result<Self, LlmError> {
            let endpoint = std::env::var(ENDPOINT_VAR).map_err(|_| LlmError::Config(ENDPOINT_VAR.into()))?;
            let model = std::env::var(MODEL_VAR).unwrap_or_else(|_| "default".into());
            Ok(Self::new(endpoint, model, std::env::var(KEY_VAR).ok()))
        }
    }

    impl LlmClient for RemoteLlm {
        fn complete(&self, prompt: &str) -> Result<String, LlmError> {
            let body = serde_json::json!({
                "model": self.model,
                "prompt": prompt,
                "max_tokens": 4,
                "temperature": 0.0,
            });
            let mut req = self.http.post(&self.endpoint).json(&body);
            if let Some(key) = &self.key {
                req = req.bearer_auth(key);
            }
            let resp = req.send().map_err(|e| LlmError::Unavailable(e.to_string()))?;
            if !resp.status().is_success() {
                return Err(LlmError::Unavailable(format!("status {}", resp.status())));
            }
            let v: serde_json::Value = resp.json().map_err(|e| LlmError::Unavailable(e.to_string()))?;
            v.pointer("/choices/0/text")
                .or_else(|| v.get("text"))
                .or_else(|| v.get("completion"))
                .and_then(|t| t.as_str())
                .map(str::to_string)
                .ok_or_else(|| LlmError::Unparseable(v.to_string()))
        }

        fn name(&self) -> &str {
            "remote"
        }
    }
}
