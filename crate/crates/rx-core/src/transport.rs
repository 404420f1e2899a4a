//! Shared HTTP plumbing for the live VLM and sequence-model clients.
//!
//! Both remote services speak simple JSON-over-POST. Requests carry a bearer
//! token read from an environment variable at call time, and transient
//! failures (connection errors, HTTP 429/5xx) are retried a bounded number
//! of times with exponential backoff. Everything here is synchronous; the
//! pipeline issues at most a handful of calls per command.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

/// Environment variable the default configuration reads the API key from.
pub const API_KEY_ENV: &str = "RX_VLM_API_KEY";

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("API key environment variable {var} is not set")]
    MissingApiKey { var: String },
    #[error("endpoint returned HTTP {code}: {body}")]
    Status { code: u16, body: String },
    #[error("response was not valid JSON for the expected schema: {0}")]
    BadResponse(String),
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
}

/// Where and how to reach a JSON endpoint.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `http://localhost:8080`; request paths are appended.
    pub endpoint: String,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    /// Additional attempts after the first failure.
    pub retries: u32,
    /// Backoff before the first retry; doubles per attempt.
    pub initial_backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key_env: API_KEY_ENV.to_string(),
            retries: 3,
            initial_backoff_ms: 250,
        }
    }
}

fn is_retryable_status(code: u16) -> bool {
    code == 429 || (500..600).contains(&code)
}

/// POSTs `request` as JSON to `{endpoint}{path}` and decodes the JSON
/// response. Connection failures and retryable statuses are retried up to
/// `config.retries` extra times; other HTTP errors fail immediately.
pub fn post_json<Req: Serialize, Resp: DeserializeOwned>(
    config: &HttpConfig,
    path: &str,
    request: &Req,
) -> Result<Resp, TransportError> {
    let key = std::env::var(&config.api_key_env).map_err(|_| TransportError::MissingApiKey {
        var: config.api_key_env.clone(),
    })?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| TransportError::BadResponse(e.to_string()))?;
    let url = format!("{}{}", config.endpoint.trim_end_matches('/'), path);

    let attempts = config.retries + 1;
    let mut last_error = String::new();
    for attempt in 0..attempts {
        if attempt > 0 {
            let backoff = config.initial_backoff_ms.saturating_mul(1 << (attempt - 1));
            std::thread::sleep(Duration::from_millis(backoff));
        }
        match client
            .post(&url)
            .bearer_auth(&key)
            .json(request)
            .send()
        {
            Ok(resp) => {
                let code = resp.status().as_u16();
                if resp.status().is_success() {
                    return resp
                        .json::<Resp>()
                        .map_err(|e| TransportError::BadResponse(e.to_string()));
                }
                let body = resp.text().unwrap_or_default();
                if !is_retryable_status(code) {
                    return Err(TransportError::Status { code, body });
                }
                last_error = format!("HTTP {code}: {body}");
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(TransportError::RetriesExhausted {
        attempts,
        last: last_error,
    })
}
