use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use rand::Rng;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{LlmClient, LlmReply, LlmRequest, ProviderConfig};
use crate::error::{Error, Result};
use crate::prompt::estimate_tokens;

/// Counting semaphore that also records the peak number of holders.
#[derive(Debug)]
pub struct ConcurrencyLimiter {
    max: usize,
    in_use: Mutex<usize>,
    freed: Condvar,
    peak: AtomicUsize,
}

pub struct Permit<'a> {
    limiter: &'a ConcurrencyLimiter,
}

impl ConcurrencyLimiter {
    pub fn new(max: usize) -> Self {
        ConcurrencyLimiter {
            max: max.max(1),
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        self.peak.fetch_max(*n, Ordering::SeqCst);
        Permit { limiter: self }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_use.lock().unwrap();
        *n -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Delay before retry `attempt` (1-based): `base * 2^(attempt-1)` plus up to
/// half of that again, scaled by `jitter` in `[0, 1)`.
pub fn backoff_delay(base_ms: u64, attempt: u32, jitter: f64) -> Duration {
    let floor = base_ms.saturating_mul(1u64 << (attempt.saturating_sub(1)).min(30));
    let extra = (floor as f64 * 0.5 * jitter.clamp(0.0, 1.0)) as u64;
    Duration::from_millis(floor.saturating_add(extra))
}

/// Chat-completion client: one user message per request, bearer-token auth.
pub struct HttpClient {
    client: Client,
    endpoint: String,
    model: String,
    api_key: String,
    temperature: f64,
    max_retries: u32,
    retry_base_ms: u64,
    limiter: ConcurrencyLimiter,
}

enum Failure {
    Retry(String),
    Fatal(Error),
}

impl HttpClient {
    /// Fails before any network traffic when the key variable is unset.
    pub fn new(cfg: &ProviderConfig) -> Result<Self> {
        cfg.validate()?;
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| Error::Config(format!("environment variable {} is not set", cfg.api_key_env)))?;
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpClient {
            client,
            endpoint: cfg.endpoint.clone().unwrap_or_default(),
            model: cfg.model.clone().unwrap_or_default(),
            api_key,
            temperature: cfg.temperature,
            max_retries: cfg.max_retries,
            retry_base_ms: cfg.retry_base_ms,
            limiter: ConcurrencyLimiter::new(cfg.max_concurrent),
        })
    }

    pub fn limiter(&self) -> &ConcurrencyLimiter {
        &self.limiter
    }

    fn attempt(&self, prompt: &str) -> std::result::Result<String, Failure> {
        let body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        });
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| Failure::Retry(format!("transport: {e}")))?;
        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error() {
            return Err(Failure::Retry(format!("status {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(Error::Llm {
                attempts: 1,
                message: format!("status {status}: {}", text.chars().take(200).collect::<String>()),
            }));
        }
        let text = resp.text().map_err(|e| Failure::Retry(format!("reading body: {e}")))?;
        extract_content(&text).map_err(Failure::Fatal)
    }
}

/// `choices[0].message.content` of a chat-completion body.
pub(crate) fn extract_content(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body).map_err(|e| Error::MalformedResponse(format!("not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::MalformedResponse("missing choices[0].message.content".into()))?;
    if content.is_empty() {
        return Err(Error::MalformedResponse("empty message content".into()));
    }
    Ok(content.to_string())
}

impl LlmClient for HttpClient {
    fn complete(&self, req: &LlmRequest) -> Result<LlmReply> {
        if req.prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let _permit = self.limiter.acquire();
        let start = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&req.prompt) {
                Ok(text) => {
                    return Ok(LlmReply {
                        text,
                        prompt_tokens_est: estimate_tokens(&req.prompt),
                        latency_ms: start.elapsed().as_millis().max(1) as u64,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retry(message)) => {
                    if attempts > self.max_retries {
                        return Err(Error::Llm { attempts, message });
                    }
                    let delay = backoff_delay(self.retry_base_ms, attempts, rand::rng().random::<f64>());
                    log::warn!("llm request failed ({message}); retry {attempts} in {delay:?}");
                    thread::sleep(delay);
                }
            }
        }
    }

    fn model(&self) -> &str {
        &self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn backoff_lower_bound() {
        for k in 1..8 {
            for j in [0.0, 0.3, 0.999] {
                let d = backoff_delay(1000, k, j).as_millis() as u64;
                assert!(d >= 1000 * (1 << (k - 1)));
                assert!(d <= 1500 * (1 << (k - 1)));
            }
        }
        assert_eq!(backoff_delay(10, 3, 0.0), Duration::from_millis(40));
    }

    #[test]
    fn content_extraction() {
        let ok = r#"{"choices":[{"message":{"role":"assistant","content":"(B)"}}]}"#;
        assert_eq!(extract_content(ok).unwrap(), "(B)");
        assert!(matches!(extract_content("{}"), Err(Error::MalformedResponse(_))));
        assert!(matches!(extract_content("<html>"), Err(Error::MalformedResponse(_))));
    }

    #[test]
    fn limiter_caps_holders() {
        let lim = Arc::new(ConcurrencyLimiter::new(3));
        let live = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..16)
            .map(|_| {
                let (lim, live) = (lim.clone(), live.clone());
                thread::spawn(move || {
                    for _ in 0..20 {
                        let _p = lim.acquire();
                        let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                        assert!(now <= 3);
                        thread::sleep(Duration::from_micros(200));
                        live.fetch_sub(1, Ordering::SeqCst);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(lim.peak() <= 3);
        assert!(lim.peak() >= 2);
    }
}
