//! Blocking HTTP client for the embedding service.
//!
//! Wire protocol, version 1:
//!
//! ```text
//! POST {base}/embed   {"version": 1, "mode": "sentence" | "tokens", "texts": [..]}
//!   sentence -> {"version": 1, "dim": D, "vectors":  [[f; D]; N]}
//!   tokens   -> {"version": 1, "dim": D, "matrices": [[[f; D]; rows_i]; N]}
//! GET  {base}/health  {"version": 1, "dim": D, "models": [..]}
//! ```
//!
//! Errors come back as `{"version": 1, "error": "..."}` with a 4xx status.

use std::sync::OnceLock;
use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EmbedError, Embedder};
use crate::semantic::{EmbeddingMatrix, SentenceVector};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedMode {
    Sentence,
    Tokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub version: u32,
    pub mode: EmbedMode,
    pub texts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResponse {
    pub version: u32,
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenResponse {
    pub version: u32,
    pub dim: usize,
    pub matrices: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthResponse {
    pub version: u32,
    pub dim: usize,
    pub models: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Delay before the first retry; doubles on each subsequent one.
    pub base_delay: Duration,
    pub timeout: Duration,
    /// Texts per request.
    pub batch_size: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(200),
            timeout: Duration::from_secs(30),
            batch_size: 64,
        }
    }
}

enum Failure {
    Transient(String),
    Fatal(EmbedError),
}

/// Client for one service endpoint. The dimension reported by the first
/// response is pinned for the life of the client.
#[derive(Debug)]
pub struct RemoteEmbedder {
    base: String,
    retry: RetryPolicy,
    agent: ureq::Agent,
    session_dim: OnceLock<usize>,
}

impl RemoteEmbedder {
    pub fn new(base: impl Into<String>, retry: RetryPolicy) -> Self {
        let base = base.into().trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(retry.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base,
            retry,
            agent,
            session_dim: OnceLock::new(),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.base
    }

    pub fn session_dim(&self) -> Option<usize> {
        self.session_dim.get().copied()
    }

    pub fn health(&self) -> Result<HealthResponse, EmbedError> {
        let url = format!("{}/health", self.base);
        let value = self.with_retries(|| self.attempt(|| self.agent.get(&url).call()))?;
        let h: HealthResponse = self.decode(value)?;
        self.pin_dim(h.dim)?;
        Ok(h)
    }

    fn protocol(&self, message: impl Into<String>) -> EmbedError {
        EmbedError::Protocol {
            endpoint: self.base.clone(),
            message: message.into(),
        }
    }

    fn attempt(
        &self,
        send: impl Fn() -> Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<Value, Failure> {
        let mut resp = match send() {
            Ok(r) => r,
            Err(e) => return Err(Failure::Transient(e.to_string())),
        };
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Failure::Transient(e.to_string()))?;
        if status >= 500 {
            return Err(Failure::Transient(format!("HTTP {status}")));
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| Failure::Fatal(self.protocol(format!("HTTP {status}: invalid JSON: {e}"))))?;
        if let Some(err) = value.get("error") {
            return Err(Failure::Fatal(self.protocol(format!("HTTP {status}: {err}"))));
        }
        if status >= 400 {
            return Err(Failure::Fatal(self.protocol(format!("HTTP {status}"))));
        }
        Ok(value)
    }

    fn with_retries(&self, op: impl Fn() -> Result<Value, Failure>) -> Result<Value, EmbedError> {
        let mut delay = self.retry.base_delay;
        let mut last = String::new();
        for attempt in 0..=self.retry.max_retries {
            if attempt > 0 {
                thread::sleep(delay);
                delay = delay.saturating_mul(2);
            }
            match op() {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => last = msg,
            }
        }
        Err(EmbedError::Connectivity {
            endpoint: self.base.clone(),
            attempts: self.retry.max_retries + 1,
            message: last,
        })
    }

    fn decode<T: DeserializeOwned>(&self, value: Value) -> Result<T, EmbedError> {
        let got = value
            .get("version")
            .and_then(Value::as_u64)
            .ok_or_else(|| self.protocol("response lacks a numeric version"))?;
        if got != u64::from(PROTOCOL_VERSION) {
            return Err(EmbedError::VersionMismatch {
                expected: PROTOCOL_VERSION,
                got: u32::try_from(got).unwrap_or(u32::MAX),
            });
        }
        serde_json::from_value(value).map_err(|e| self.protocol(e.to_string()))
    }

    fn pin_dim(&self, dim: usize) -> Result<(), EmbedError> {
        let expected = *self.session_dim.get_or_init(|| dim);
        if expected != dim {
            return Err(EmbedError::DimensionMismatch { expected, got: dim });
        }
        Ok(())
    }

    fn post<T: DeserializeOwned>(&self, mode: EmbedMode, texts: &[&str]) -> Result<T, EmbedError> {
        let url = format!("{}/embed", self.base);
        let req = EmbedRequest {
            version: PROTOCOL_VERSION,
            mode,
            texts: texts.iter().map(|t| t.to_string()).collect(),
        };
        let value = self.with_retries(|| self.attempt(|| self.agent.post(&url).send_json(&req)))?;
        self.decode(value)
    }

    fn check_vector(&self, v: &[f64], dim: usize) -> Result<(), EmbedError> {
        if v.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        Ok(())
    }
}

impl Embedder for RemoteEmbedder {
    fn sentences(&self, texts: &[&str]) -> Result<Vec<SentenceVector>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.retry.batch_size.max(1)) {
            let resp: SentenceResponse = self.post(EmbedMode::Sentence, chunk)?;
            self.pin_dim(resp.dim)?;
            if resp.vectors.len() != chunk.len() {
                return Err(self.protocol(format!(
                    "sent {} texts, received {} vectors",
                    chunk.len(),
                    resp.vectors.len()
                )));
            }
            for v in resp.vectors {
                self.check_vector(&v, resp.dim)?;
                out.push(SentenceVector::new(v)?.normalized()?);
            }
        }
        Ok(out)
    }

    fn tokens(&self, texts: &[&str]) -> Result<Vec<EmbeddingMatrix>, EmbedError> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.retry.batch_size.max(1)) {
            let resp: TokenResponse = self.post(EmbedMode::Tokens, chunk)?;
            self.pin_dim(resp.dim)?;
            if resp.matrices.len() != chunk.len() {
                return Err(self.protocol(format!(
                    "sent {} texts, received {} matrices",
                    chunk.len(),
                    resp.matrices.len()
                )));
            }
            for rows in resp.matrices {
                for r in &rows {
                    self.check_vector(r, resp.dim)?;
                }
                out.push(EmbeddingMatrix::from_rows(&rows)?.normalize()?);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        let req = EmbedRequest {
            version: 1,
            mode: EmbedMode::Tokens,
            texts: vec!["a".into()],
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"version":1,"mode":"tokens","texts":["a"]}"#
        );
    }

    #[test]
    fn empty_batch_sends_nothing() {
        // port 9 (discard) on localhost is closed in the sandbox; an empty
        // batch must return before any connection attempt
        let c = RemoteEmbedder::new("http://127.0.0.1:9", RetryPolicy::default());
        assert!(c.sentences(&[]).unwrap().is_empty());
        assert!(c.tokens(&[]).unwrap().is_empty());
    }
}
