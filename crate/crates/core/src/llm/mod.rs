//! Access to the answering model: an HTTP chat-completion provider, a
//! deterministic simulated oracle, a response cache and answer parsing.

mod cache;
mod http;
mod parse;
mod sim;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use cache::{cache_key, ResponseCache};
pub use http::{backoff_delay, ConcurrencyLimiter, HttpClient, Permit};
pub use parse::{parse_answer, parse_labels, ParsedAnswer};
pub use sim::{simulate_oracle, SimClient, SimMode, SimOracleConfig};

use crate::bandit::ArmId;
use crate::error::{Error, Result};
use crate::prompt::estimate_tokens;

pub const DEFAULT_API_KEY_ENV: &str = "KNOWGPT_API_KEY";

/// Side information for the simulated oracle. Real providers ignore it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimHint {
    pub example_id: String,
    pub labels: Vec<String>,
    pub gold_label: String,
    pub gold_fact: Option<String>,
    /// `None` when no arm produced the prompt (baseline runs).
    pub arm: Option<ArmId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub prompt: String,
    pub hint: Option<SimHint>,
}

impl LlmRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        LlmRequest {
            prompt: prompt.into(),
            hint: None,
        }
    }

    pub fn with_hint(mut self, hint: SimHint) -> Self {
        self.hint = Some(hint);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmReply {
    pub text: String,
    pub prompt_tokens_est: usize,
    pub latency_ms: u64,
}

pub trait LlmClient: Send + Sync {
    fn complete(&self, req: &LlmRequest) -> Result<LlmReply>;

    /// Model identity, used as part of the cache key.
    fn model(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Http,
    #[default]
    Sim,
}

impl std::str::FromStr for ProviderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "http" => Ok(ProviderKind::Http),
            "sim" => Ok(ProviderKind::Sim),
            other => Err(Error::InvalidArgument(format!("unknown provider `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub max_concurrent: usize,
    pub temperature: f64,
    /// First retry delay; later retries double it.
    pub retry_base_ms: u64,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Sim,
            endpoint: None,
            model: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 60.0,
            max_retries: 5,
            max_concurrent: 4,
            temperature: 0.0,
            retry_base_ms: 1000,
        }
    }
}

impl ProviderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kind == ProviderKind::Http {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Config("http provider needs an endpoint".into()));
            }
            if self.model.as_deref().is_none_or(str::is_empty) {
                return Err(Error::Config("http provider needs a model name".into()));
            }
        }
        if self.max_concurrent == 0 {
            return Err(Error::Config("max_concurrent must be at least 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(Error::Config("timeout must be positive".into()));
        }
        Ok(())
    }
}

/// A provider plus an optional response cache.
pub struct Gateway {
    client: Box<dyn LlmClient>,
    cache: Option<ResponseCache>,
}

impl Gateway {
    pub fn new(client: Box<dyn LlmClient>) -> Self {
        Gateway { client, cache: None }
    }

    /// Build the provider named by `cfg`; `sim` is required for the sim kind.
    pub fn from_config(cfg: &ProviderConfig, sim: Option<SimOracleConfig>) -> Result<Self> {
        cfg.validate()?;
        let client: Box<dyn LlmClient> = match cfg.kind {
            ProviderKind::Http => Box::new(HttpClient::new(cfg)?),
            ProviderKind::Sim => {
                let sim = sim.ok_or_else(|| Error::Config("sim provider needs an oracle configuration".into()))?;
                Box::new(SimClient::new(sim)?)
            }
        };
        Ok(Gateway::new(client))
    }

    pub fn with_cache_file(mut self, path: impl AsRef<Path>) -> Result<Self> {
        self.cache = Some(ResponseCache::open(path)?);
        Ok(self)
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn cache(&self) -> Option<&ResponseCache> {
        self.cache.as_ref()
    }
}

impl LlmClient for Gateway {
    fn complete(&self, req: &LlmRequest) -> Result<LlmReply> {
        if req.prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let model = self.client.model();
        if let Some(text) = self.cache.as_ref().and_then(|c| c.get(model, &req.prompt)) {
            return Ok(LlmReply {
                text,
                prompt_tokens_est: estimate_tokens(&req.prompt),
                latency_ms: 0,
            });
        }
        let start = Instant::now();
        let mut reply = self.client.complete(req)?;
        if reply.latency_ms == 0 {
            reply.latency_ms = start.elapsed().as_millis() as u64;
        }
        if let Some(cache) = &self.cache {
            cache.put(model, &req.prompt, &reply.text)?;
        }
        Ok(reply)
    }

    fn model(&self) -> &str {
        self.client.model()
    }
}
