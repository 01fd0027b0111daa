//! Blocking JSON-over-HTTP with exponential backoff, shared by the
//! embedding and chat-completion clients.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    client: Client,
    api_key: Option<String>,
    max_retries: u32,
    backoff_base: Duration,
}

impl JsonClient {
    pub(crate) fn new(
        timeout: Duration,
        api_key_env: &str,
        max_retries: u32,
        backoff_base: Duration,
    ) -> Result<Self> {
        let client = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Provider(format!("cannot build HTTP client: {e}")))?;
        let api_key = if api_key_env.is_empty() {
            None
        } else {
            std::env::var(api_key_env).ok().filter(|k| !k.is_empty())
        };
        Ok(Self {
            client,
            api_key,
            max_retries,
            backoff_base,
        })
    }

    /// POSTs `body` and returns the decoded JSON response. Transport errors,
    /// 429 and 5xx are retried; other statuses fail immediately.
    pub(crate) fn post(&self, url: &str, body: &Value) -> Result<Value> {
        let mut attempt = 0u32;
        loop {
            let mut req = self.client.post(url).json(body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let failure = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp
                            .json::<Value>()
                            .map_err(|e| Error::Protocol(format!("{url}: invalid JSON body: {e}")));
                    }
                    let text = resp.text().unwrap_or_default();
                    if !retryable(status) {
                        return Err(Error::Provider(format!("{url}: HTTP {status}: {text}")));
                    }
                    format!("HTTP {status}: {text}")
                }
                Err(e) => e.to_string(),
            };
            if attempt >= self.max_retries {
                return Err(Error::Provider(format!(
                    "{url}: giving up after {} attempt(s): {failure}",
                    attempt + 1
                )));
            }
            let delay = self.backoff_base.saturating_mul(1 << attempt.min(16));
            log::warn!("{url}: attempt {} failed ({failure}); retrying in {delay:?}", attempt + 1);
            std::thread::sleep(delay);
            attempt += 1;
        }
    }
}

fn retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

/// Joins a base URL and an API path without doubling slashes.
pub(crate) fn join(base: &str, path: &str) -> String {
    format!("{}/{}", base.trim_end_matches('/'), path.trim_start_matches('/'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn join_handles_slashes() {
        assert_eq!(join("http://h:1/", "/v1/x"), "http://h:1/v1/x");
        assert_eq!(join("http://h:1", "v1/x"), "http://h:1/v1/x");
    }

    #[test]
    fn unreachable_endpoint_fails_after_retries() {
        let client = JsonClient::new(Duration::from_millis(200), "", 2, Duration::from_millis(1)).unwrap();
        // Port 9 on localhost is discard/closed in the sandbox.
        let err = client.post("http://127.0.0.1:9/v1/x", &Value::Null).unwrap_err();
        assert!(err.to_string().contains("3 attempt"), "{err}");
    }
}
