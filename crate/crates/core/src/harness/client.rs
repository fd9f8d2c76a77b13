use std::time::Duration;

use serde_json::{json, Value};

use super::{HarnessError, RequestParams, Result, Transcript, TRANSCRIPT_FORMAT_VERSION};

pub const API_KEY_ENV: &str = "SINKLAB_API_KEY";
pub const ENDPOINT_ENV: &str = "SINKLAB_ENDPOINT";

/// Retries after the first attempt, with delays `base, 2·base, 4·base, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_secs(1),
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, retry: u32) -> Duration {
        self.base_delay * 2u32.pow(retry)
    }
}

/// Chat-completions endpoint. `url` is the full request URL.
#[derive(Clone)]
pub struct EndpointConfig {
    pub url: String,
    pub model: String,
    api_key: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl std::fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("api_key", &"<redacted>")
            .field("timeout", &self.timeout)
            .field("retry", &self.retry)
            .finish()
    }
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>, api_key: impl Into<String>) -> Result<Self> {
        let url = url.into();
        let api_key = api_key.into();
        if url.trim().is_empty() {
            return Err(HarnessError::Config(format!(
                "no endpoint: pass --endpoint or set {ENDPOINT_ENV}"
            )));
        }
        if !(url.starts_with("http://") || url.starts_with("https://")) {
            return Err(HarnessError::Config(format!("endpoint `{url}` is not an http(s) URL")));
        }
        if api_key.trim().is_empty() {
            return Err(HarnessError::Config(format!("no credential: set {API_KEY_ENV}")));
        }
        Ok(Self {
            url,
            model: model.into(),
            api_key,
            timeout: Duration::from_secs(600),
            retry: RetryPolicy::default(),
        })
    }

    /// Endpoint from the flag or the environment; credential from the
    /// environment only.
    pub fn from_env(endpoint_flag: Option<&str>, model: &str) -> Result<Self> {
        let url = endpoint_flag
            .map(str::to_string)
            .or_else(|| std::env::var(ENDPOINT_ENV).ok())
            .unwrap_or_default();
        let key = std::env::var(API_KEY_ENV).unwrap_or_default();
        Self::new(url, model, key)
    }
}

enum Attempt {
    Done(String),
    Retry(HarnessError),
    Fail(HarnessError),
}

fn attempt(agent: &ureq::Agent, cfg: &EndpointConfig, body: &Value, n: u32) -> Attempt {
    let resp = agent
        .post(&cfg.url)
        .header("Authorization", &format!("Bearer {}", cfg.api_key))
        .send_json(body);
    let mut resp = match resp {
        Ok(r) => r,
        Err(e) => {
            return Attempt::Retry(HarnessError::Network {
                attempts: n,
                message: e.to_string(),
            })
        }
    };
    let status = resp.status().as_u16();
    let text = match resp.body_mut().read_to_string() {
        Ok(t) => t,
        Err(e) => {
            return Attempt::Retry(HarnessError::Network {
                attempts: n,
                message: format!("reading body: {e}"),
            })
        }
    };
    if !(200..300).contains(&status) {
        let err = HarnessError::Status {
            status,
            attempts: n,
            body: text.chars().take(500).collect(),
        };
        return if status == 429 || status >= 500 {
            Attempt::Retry(err)
        } else {
            Attempt::Fail(err)
        };
    }
    match completion_text(&text) {
        Ok(c) => Attempt::Done(c),
        Err(e) => Attempt::Fail(e),
    }
}

fn completion_text(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| HarnessError::MalformedResponse(format!("body is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| HarnessError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Sends one chat-completions request. Connection failures, 429 and 5xx are
/// retried; other statuses and malformed bodies fail at once.
pub fn run_remote(cfg: &EndpointConfig, prompt: &str, params: &RequestParams, policy: &str) -> Result<Transcript> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(cfg.timeout))
        .build()
        .into();
    let body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "max_tokens": params.max_tokens,
        "temperature": params.temperature,
    });
    let started_at = super::timestamp();
    let mut n = 0;
    loop {
        n += 1;
        match attempt(&agent, cfg, &body, n) {
            Attempt::Done(completion) => {
                return Ok(Transcript {
                    format_version: TRANSCRIPT_FORMAT_VERSION,
                    endpoint: cfg.url.clone(),
                    model: cfg.model.clone(),
                    policy: policy.to_string(),
                    params: params.clone(),
                    prompt: prompt.to_string(),
                    completion,
                    started_at,
                    finished_at: super::timestamp(),
                    attempts: n,
                    note: None,
                })
            }
            Attempt::Fail(e) => return Err(e),
            Attempt::Retry(e) if n > cfg.retry.max_retries => return Err(e),
            Attempt::Retry(_) => std::thread::sleep(cfg.retry.delay(n - 1)),
        }
    }
}
