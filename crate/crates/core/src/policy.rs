//! The generation side of the policy: a scripted table for tests and a
//! client for OpenAI-compatible completion endpoints.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedding::InFlight;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("policy transport failure: {0}")]
    Transport(String),
    #[error("policy backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed policy response: {0}")]
    BadResponse(String),
    #[error("script file: {0}")]
    Script(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    /// Ended on one of the requested stop markers (included in the text).
    Stop,
    /// Ran out of token budget.
    Length,
    EndOfSequence,
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    pub query: &'a str,
    /// 1, 2 or 3.
    pub turn: u8,
    pub context: &'a str,
    pub stop: &'a [String],
    pub max_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<String>,
    pub logprobs: Vec<f64>,
    pub finish: FinishReason,
}

pub trait Policy: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError>;

    /// Tokenizer used to measure prompt and tool-output text. Defaults to
    /// whitespace splitting.
    fn tokenize(&self, text: &str) -> Vec<String> {
        whitespace_tokens(text)
    }
}

pub fn whitespace_tokens(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Byte offsets `(start, end)` of each whitespace-delimited token.
fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_whitespace(), start) {
            (true, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Cuts `script` the way a sampler would: just after the earliest stop
/// marker, then at the token budget, whichever comes first.
pub fn truncate_generation(script: &str, stop: &[String], max_tokens: usize) -> (String, FinishReason) {
    let stop_cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| script.find(s.as_str()).map(|at| at + s.len()))
        .min();
    let (text, mut finish) = match stop_cut {
        Some(end) => (&script[..end], FinishReason::Stop),
        None => (script, FinishReason::EndOfSequence),
    };
    let spans = token_spans(text);
    let text = if spans.len() > max_tokens {
        finish = FinishReason::Length;
        match max_tokens {
            0 => "",
            n => &text[..spans[n - 1].1],
        }
    } else {
        text
    };
    (text.to_string(), finish)
}

fn scripted_logprob(turn: u8, position: usize) -> f64 {
    -0.05 - 0.1 * ((position * 7 + usize::from(turn) * 3) % 10) as f64
}

/// Table-driven policy. Each turn emits a fixed text (per query when a
/// query-specific script exists), cut at the stop marker or token budget.
/// Tokens are whitespace pieces; log-probabilities are a fixed function of
/// turn and position.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScriptedPolicy {
    /// Turn texts indexed by turn number minus one.
    #[serde(default)]
    pub turns: Vec<String>,
    #[serde(default)]
    pub by_query: HashMap<String, Vec<String>>,
    /// Simulates a backend outage on this turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_on_turn: Option<u8>,
}

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(turns: impl IntoIterator<Item = S>) -> Self {
        Self {
            turns: turns.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }

    pub fn with_query<S: Into<String>>(mut self, query: &str, turns: impl IntoIterator<Item = S>) -> Self {
        self.by_query
            .insert(query.to_string(), turns.into_iter().map(Into::into).collect());
        self
    }

    pub fn from_json_path(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PolicyError::Script(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| PolicyError::Script(format!("{}: {e}", path.display())))
    }

    fn script_for(&self, query: &str, turn: u8) -> &str {
        let turns = self.by_query.get(query).unwrap_or(&self.turns);
        usize::from(turn)
            .checked_sub(1)
            .and_then(|i| turns.get(i))
            .map(String::as_str)
            .unwrap_or("")
    }
}

impl Policy for ScriptedPolicy {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        if self.fail_on_turn == Some(request.turn) {
            return Err(PolicyError::Transport(format!(
                "scripted outage on turn {}",
                request.turn
            )));
        }
        let script = self.script_for(request.query, request.turn);
        let (text, finish) = truncate_generation(script, request.stop, request.max_tokens);
        let tokens = whitespace_tokens(&text);
        let logprobs = (0..tokens.len())
            .map(|i| scripted_logprob(request.turn, i))
            .collect();
        Ok(Generation {
            text,
            tokens,
            logprobs,
            finish,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemotePolicyConfig {
    /// Base URL, e.g. `http://localhost:8000/v1`; `/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

impl RemotePolicyConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            temperature: default_temperature(),
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
        }
    }
}

fn default_temperature() -> f64 {
    1.0
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    2
}
fn default_in_flight() -> usize {
    8
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: usize,
    temperature: f64,
    logprobs: u32,
    #[serde(skip_serializing_if = "<[String]>::is_empty")]
    stop: &'a [String],
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<CompletionLogprobs>,
    /// vLLM extension: the matched stop string, or null at end-of-sequence.
    #[serde(default, deserialize_with = "present")]
    stop_reason: Option<serde_json::Value>,
}

/// Keeps an explicit `null` apart from an absent field.
fn present<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Option<serde_json::Value>, D::Error> {
    serde_json::Value::deserialize(d).map(Some)
}

#[derive(Deserialize)]
struct CompletionLogprobs {
    #[serde(default)]
    tokens: Vec<String>,
    #[serde(default)]
    token_logprobs: Vec<Option<f64>>,
}

/// Client for an OpenAI-compatible `/completions` endpoint.
///
/// Such servers strip the matched stop string from the returned text; it is
/// appended back (as one token with log-probability 0) so that turn text
/// always ends with its stop marker.
pub struct RemotePolicy {
    config: RemotePolicyConfig,
    agent: ureq::Agent,
    in_flight: InFlight,
}

impl RemotePolicy {
    pub fn new(config: RemotePolicyConfig) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build();
        let in_flight = InFlight::new(config.max_in_flight);
        Self {
            config,
            agent,
            in_flight,
        }
    }

    pub fn config(&self) -> &RemotePolicyConfig {
        &self.config
    }

    fn url(&self) -> String {
        format!("{}/completions", self.config.endpoint.trim_end_matches('/'))
    }

    fn post(&self, body: &CompletionRequest<'_>) -> Result<CompletionResponse, PolicyError> {
        let _permit = self.in_flight.acquire();
        let mut attempt = 0;
        loop {
            let mut req = self.agent.post(&self.url());
            if let Some(key) = &self.config.api_key {
                req = req.set("Authorization", &format!("Bearer {key}"));
            }
            let err = match req.send_json(body) {
                Ok(resp) => {
                    return resp
                        .into_json()
                        .map_err(|e| PolicyError::BadResponse(e.to_string()));
                }
                Err(ureq::Error::Status(status, resp)) => {
                    let body = resp.into_string().unwrap_or_default();
                    let retryable = status == 429 || status >= 500;
                    let err = PolicyError::Status { status, body };
                    if !retryable {
                        return Err(err);
                    }
                    err
                }
                Err(e) => PolicyError::Transport(e.to_string()),
            };
            if attempt >= self.config.max_retries {
                return Err(err);
            }
            attempt += 1;
            std::thread::sleep(Duration::from_millis(200 * 2u64.pow(attempt.min(5))));
        }
    }
}

impl Policy for RemotePolicy {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<Generation, PolicyError> {
        let body = CompletionRequest {
            model: &self.config.model,
            prompt: request.context,
            max_tokens: request.max_tokens,
            temperature: self.config.temperature,
            logprobs: 1,
            stop: request.stop,
        };
        let response = self.post(&body)?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| PolicyError::BadResponse("no choices".into()))?;

        let (mut tokens, mut logprobs) = match choice.logprobs {
            Some(lp) if !lp.tokens.is_empty() => {
                if lp.tokens.len() != lp.token_logprobs.len() {
                    return Err(PolicyError::BadResponse(format!(
                        "{} tokens but {} logprobs",
                        lp.tokens.len(),
                        lp.token_logprobs.len()
                    )));
                }
                let mut values = Vec::with_capacity(lp.token_logprobs.len());
                for (i, v) in lp.token_logprobs.into_iter().enumerate() {
                    match v {
                        Some(x) if x.is_finite() && x <= 0.0 => values.push(x),
                        other => {
                            return Err(PolicyError::BadResponse(format!(
                                "invalid logprob {other:?} at token {i}"
                            )))
                        }
                    }
                }
                (lp.tokens, values)
            }
            _ => {
                let tokens = whitespace_tokens(&choice.text);
                let zeros = vec![0.0; tokens.len()];
                (tokens, zeros)
            }
        };

        let mut text = choice.text;
        let finish = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            Some("stop") if !request.stop.is_empty() => {
                let matched = match &choice.stop_reason {
                    Some(serde_json::Value::String(m)) => Some(m.clone()),
                    // Explicit null (or a stop token id): the model ended on
                    // its own.
                    Some(_) => None,
                    // Plain OpenAI servers do not say which marker matched;
                    // every turn configures a single one.
                    None => Some(request.stop[0].clone()),
                };
                match matched {
                    Some(marker) => {
                        if !text.ends_with(marker.as_str()) {
                            text.push_str(&marker);
                            tokens.push(marker);
                            logprobs.push(0.0);
                        }
                        FinishReason::Stop
                    }
                    None => FinishReason::EndOfSequence,
                }
            }
            _ => FinishReason::EndOfSequence,
        };

        Ok(Generation {
            text,
            tokens,
            logprobs,
            finish,
        })
    }
}
