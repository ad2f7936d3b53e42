//! HTTP client for a model served over the logits wire protocol.
//!
//! ```text
//! POST {endpoint}/v1/logits   {"shape":[C,H,W],"pixels":[...]}  -> 200 {"logits":[...]}
//! GET  {endpoint}/v1/health   -> {"status":"ok","model":"<name>","classes":N}
//! ```
//!
//! 400 means the request body was rejected; 503 means the model is still
//! loading and is retried like a transport failure.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::LogitsModel;
use crate::error::{Error, Result};
use crate::image::Image;

/// Environment variable the CLI reads the oracle endpoint from.
pub const ORACLE_URL_ENV: &str = "CORRATTACK_ORACLE_URL";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitsRequest {
    pub shape: [usize; 3],
    pub pixels: Vec<f64>,
}

impl LogitsRequest {
    pub fn from_image(x: &Image) -> Self {
        Self {
            shape: [x.shape.channels, x.shape.height, x.shape.width],
            pixels: x.pixels.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub logits: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthStatus {
    pub status: String,
    pub model: String,
    pub classes: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
        }
    }
}

enum Attempt<T> {
    Done(T),
    Retry(String),
}

#[derive(Debug, Clone)]
pub struct RemoteModel {
    endpoint: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
    health: HealthStatus,
}

impl RemoteModel {
    /// Checks the health endpoint and returns a ready client.
    pub fn connect(endpoint: &str) -> Result<Self> {
        Self::connect_with(endpoint, RetryPolicy::default())
    }

    pub fn connect_with(endpoint: &str, retry: RetryPolicy) -> Result<Self> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let endpoint = endpoint.trim_end_matches('/').to_string();
        let url = format!("{endpoint}/v1/health");
        let health = with_retries(&retry, || {
            let mut resp = match agent.get(&url).call() {
                Ok(r) => r,
                Err(e) => return Ok(Attempt::Retry(e.to_string())),
            };
            let status = resp.status().as_u16();
            if status == 503 || status >= 500 {
                return Ok(Attempt::Retry(format!("health returned {status}")));
            }
            if status != 200 {
                return Err(Error::Protocol(format!("health returned {status}")));
            }
            let body = read_body(&mut resp)?;
            let health: HealthStatus = serde_json::from_str(&body)
                .map_err(|e| Error::Protocol(format!("bad health body: {e}")))?;
            if health.status != "ok" {
                return Ok(Attempt::Retry(format!("status {:?}", health.status)));
            }
            Ok(Attempt::Done(health))
        })?;
        if health.classes < 2 {
            return Err(Error::Protocol(format!(
                "model advertises {} classes",
                health.classes
            )));
        }
        Ok(Self {
            endpoint,
            agent,
            retry,
            health,
        })
    }

    pub fn health(&self) -> &HealthStatus {
        &self.health
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

impl LogitsModel for RemoteModel {
    fn num_classes(&self) -> usize {
        self.health.classes
    }

    fn logits(&mut self, x: &Image) -> Result<Vec<f64>> {
        let body = serde_json::to_string(&LogitsRequest::from_image(x))
            .map_err(|e| Error::Protocol(e.to_string()))?;
        let url = format!("{}/v1/logits", self.endpoint);
        let agent = &self.agent;
        with_retries(&self.retry, || {
            let mut resp = match agent
                .post(&url)
                .header("content-type", "application/json")
                .send(body.as_str())
            {
                Ok(r) => r,
                Err(e) => return Ok(Attempt::Retry(e.to_string())),
            };
            match resp.status().as_u16() {
                200 => {}
                400 => {
                    let detail = read_body(&mut resp).unwrap_or_default();
                    return Err(Error::Protocol(format!("request rejected (400): {detail}")));
                }
                s if s >= 500 => return Ok(Attempt::Retry(format!("server returned {s}"))),
                s => return Err(Error::Protocol(format!("unexpected status {s}"))),
            }
            let text = read_body(&mut resp)?;
            let parsed: LogitsResponse = serde_json::from_str(&text)
                .map_err(|e| Error::Protocol(format!("bad logits body: {e}")))?;
            if parsed.logits.iter().any(|v| !v.is_finite()) {
                return Err(Error::Protocol("non-finite logit".into()));
            }
            Ok(Attempt::Done(parsed.logits))
        })
    }
}

fn read_body(resp: &mut ureq::http::Response<ureq::Body>) -> Result<String> {
    resp.body_mut()
        .read_to_string()
        .map_err(|e| Error::Protocol(format!("failed reading body: {e}")))
}

fn with_retries<T>(policy: &RetryPolicy, mut f: impl FnMut() -> Result<Attempt<T>>) -> Result<T> {
    let mut last = String::new();
    for attempt in 0..policy.attempts.max(1) {
        if attempt > 0 {
            thread::sleep(policy.base_delay * 2u32.pow(attempt - 1));
        }
        match f()? {
            Attempt::Done(v) => return Ok(v),
            Attempt::Retry(reason) => last = reason,
        }
    }
    Err(Error::OracleUnavailable(format!(
        "{} attempts failed, last: {last}",
        policy.attempts.max(1)
    )))
}
