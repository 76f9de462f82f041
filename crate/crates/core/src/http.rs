//! Upstream HTTP access shared by the template and terminology clients.

use std::sync::Arc;
use std::time::Duration;

use reqwest::StatusCode;
use thiserror::Error;
use tokio::sync::Semaphore;

/// Failure talking to an upstream service (live or mocked).
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ServiceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("authentication failed ({0})")]
    Auth(String),
    #[error("upstream timed out after {attempts} attempts")]
    Timeout { attempts: u32 },
    #[error("upstream returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed upstream payload: {0}")]
    Malformed(String),
    #[error("missing credential: set {0}")]
    MissingCredential(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Bounded retry with exponential backoff. Only timeouts, connection failures
/// and 5xx responses are retried.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    /// Delay before attempt `attempt + 1` (attempts are 1-based): base, 2·base, 4·base, ...
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt.saturating_sub(1))
    }
}

/// HTTP client with auth header, per-request timeout, retries and an optional
/// cap on concurrent upstream requests.
#[derive(Debug, Clone)]
pub struct HttpClient {
    client: reqwest::Client,
    retry: RetryPolicy,
    limiter: Option<Arc<Semaphore>>,
}

impl HttpClient {
    pub fn new(timeout: Duration, retry: RetryPolicy) -> Result<Self, ServiceError> {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .user_agent(concat!("metastd/", env!("CARGO_PKG_VERSION")))
            .build()
            .map_err(|e| ServiceError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            retry,
            limiter: None,
        })
    }

    /// Shares an in-flight limit with other getters built from the same semaphore.
    pub fn with_limiter(mut self, limiter: Arc<Semaphore>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    /// Issues the GET and returns the body text untouched.
    pub async fn get_text(
        &self,
        url: &url::Url,
        auth_header: Option<&str>,
    ) -> Result<String, ServiceError> {
        self.with_retries(url, || self.client.get(url.clone()), auth_header)
            .await
    }

    /// POSTs a JSON body and returns the response text.
    pub async fn post_json(
        &self,
        url: &url::Url,
        auth_header: Option<&str>,
        body: &serde_json::Value,
    ) -> Result<String, ServiceError> {
        self.with_retries(url, || self.client.post(url.clone()).json(body), auth_header)
            .await
    }

    async fn with_retries(
        &self,
        url: &url::Url,
        build: impl Fn() -> reqwest::RequestBuilder,
        auth_header: Option<&str>,
    ) -> Result<String, ServiceError> {
        let mut attempt = 0;
        loop {
            attempt += 1;
            let outcome = {
                let _permit = match &self.limiter {
                    Some(sem) => Some(sem.acquire().await.expect("limiter closed")),
                    None => None,
                };
                let mut request = build();
                if let Some(value) = auth_header {
                    request = request.header(reqwest::header::AUTHORIZATION, value);
                }
                send_once(request, url).await
            };
            match outcome {
                Ok(body) => return Ok(body),
                Err(Attempt::Fatal(err)) => return Err(err),
                Err(Attempt::Retryable(err)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(match err {
                            ServiceError::Timeout { .. } => ServiceError::Timeout { attempts: attempt },
                            other => other,
                        });
                    }
                    let delay = self.retry.delay_after(attempt);
                    tracing::debug!(%url, attempt, ?delay, error = %err, "retrying upstream request");
                    tokio::time::sleep(delay).await;
                }
            }
        }
    }
}

async fn send_once(request: reqwest::RequestBuilder, url: &url::Url) -> Result<String, Attempt> {
    let response = request.send().await.map_err(classify_transport)?;
    let status = response.status();
    let body = response.text().await.map_err(classify_transport)?;
    if status.is_success() {
        return Ok(body);
    }
    Err(classify_status(status, url, body))
}

enum Attempt {
    Retryable(ServiceError),
    Fatal(ServiceError),
}

fn classify_transport(err: reqwest::Error) -> Attempt {
    if err.is_timeout() {
        Attempt::Retryable(ServiceError::Timeout { attempts: 1 })
    } else if err.is_connect() || err.is_request() {
        Attempt::Retryable(ServiceError::Transport(err.to_string()))
    } else {
        Attempt::Fatal(ServiceError::Transport(err.to_string()))
    }
}

fn classify_status(status: StatusCode, url: &url::Url, body: String) -> Attempt {
    match status {
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => {
            Attempt::Fatal(ServiceError::Auth(format!("HTTP {}", status.as_u16())))
        }
        StatusCode::NOT_FOUND => Attempt::Fatal(ServiceError::NotFound(url.path().to_string())),
        s if s.is_server_error() => Attempt::Retryable(ServiceError::Status {
            status: s.as_u16(),
            body,
        }),
        s => Attempt::Fatal(ServiceError::Status {
            status: s.as_u16(),
            body,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles_from_base() {
        let p = RetryPolicy::default();
        assert_eq!(p.delay_after(1), Duration::from_millis(250));
        assert_eq!(p.delay_after(2), Duration::from_millis(500));
        assert_eq!(p.delay_after(3), Duration::from_millis(1000));
    }
}
