//! Generation backends, response caching and context-budget checks.
//!
//! [`Gateway`] wraps any [`Backend`] with a bound on in-flight requests, an
//! optional replay cache and a pre-flight token budget check, and records
//! per-call latency.

pub mod cache;
pub mod mock;
pub mod remote;
pub mod tokens;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::PromptBundle;
pub use cache::{cache_key, CacheEntry, ResponseCache};
pub use mock::{mock_generate, MockBackend, MockMode};
pub use remote::{RemoteBackend, RemoteConfig};
pub use tokens::{budget, count_tokens, BudgetReport, TokenKind, TokenScheme};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("HTTP {status}: {body}")]
    Transport { status: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("prompt needs {needed} tokens but the context limit is {limit}")]
    BudgetExceeded { needed: usize, limit: usize },
    #[error("prompt body could not be parsed by the mock backend")]
    UnparseablePrompt,
    #[error("cache error: {0}")]
    Cache(String),
    #[error("invalid generation parameters: {0}")]
    InvalidParams(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: u64,
    pub do_sample: bool,
    pub renormalize_logits: bool,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.9,
            max_tokens: 256,
            seed: 0,
            do_sample: true,
            renormalize_logits: false,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidParams(
                "max_tokens must be >= 1".into(),
            ));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidParams(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// What a backend returns for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    /// Backends that simulate generation report their own latency; `None`
    /// means the gateway's wall-clock measurement is used.
    pub latency_ms: Option<f64>,
}

pub trait Backend: Send + Sync {
    /// Stable identifier, part of the cache key.
    fn id(&self) -> String;

    fn complete(
        &self,
        prompt: &PromptBundle,
        params: &GenParams,
    ) -> Result<Completion, GatewayError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub latency_ms: f64,
    pub usage: Option<Usage>,
    pub cached: bool,
}

struct InFlight {
    active: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InFlight);

impl InFlight {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.active.lock().expect("in-flight lock");
        while *n >= self.max {
            n = self.freed.wait(n).expect("in-flight lock");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("in-flight lock") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    scheme: Option<TokenScheme>,
    cache: Option<ResponseCache>,
    in_flight: InFlight,
    backend_calls: AtomicUsize,
    cache_hits: AtomicUsize,
}

impl Gateway {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self {
            backend,
            scheme: None,
            cache: None,
            in_flight: InFlight {
                active: Mutex::new(0),
                freed: Condvar::new(),
                max: DEFAULT_MAX_IN_FLIGHT,
            },
            backend_calls: AtomicUsize::new(0),
            cache_hits: AtomicUsize::new(0),
        }
    }

    /// Enables the pre-flight context budget check.
    pub fn with_scheme(mut self, scheme: TokenScheme) -> Self {
        self.scheme = Some(scheme);
        self
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_max_in_flight(mut self, max: usize) -> Self {
        self.in_flight.max = max.max(1);
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn scheme(&self) -> Option<TokenScheme> {
        self.scheme
    }

    pub fn max_in_flight(&self) -> usize {
        self.in_flight.max
    }

    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn cache_hits(&self) -> usize {
        self.cache_hits.load(Ordering::SeqCst)
    }

    /// Tokens for the prompt plus an equally long continuation.
    pub fn prompt_budget(&self, prompt: &PromptBundle) -> Option<BudgetReport> {
        let scheme = self.scheme?;
        let input_tokens = count_tokens(&prompt.text(), scheme.kind);
        let output_tokens = count_tokens(&prompt.body, scheme.kind);
        let total = input_tokens + output_tokens;
        Some(BudgetReport {
            input_tokens,
            output_tokens,
            total,
            limit: scheme.context_limit,
            feasible: total <= scheme.context_limit,
            max_feasible_features: 0,
        })
    }

    pub fn generate(
        &self,
        prompt: &PromptBundle,
        params: &GenParams,
        override_budget: bool,
    ) -> Result<Generation, GatewayError> {
        params.validate()?;
        if let Some(b) = self.prompt_budget(prompt) {
            if !b.feasible && !override_budget {
                return Err(GatewayError::BudgetExceeded {
                    needed: b.total,
                    limit: b.limit,
                });
            }
        }
        let text = prompt.text();
        let backend_id = self.backend.id();
        let key = cache_key(&text, params, &backend_id);
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(&key)) {
            self.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok(Generation {
                text: hit.output,
                latency_ms: hit.latency_ms,
                usage: None,
                cached: true,
            });
        }

        let completion = {
            let _permit = self.in_flight.acquire();
            self.backend_calls.fetch_add(1, Ordering::SeqCst);
            let start = Instant::now();
            let c = self.backend.complete(prompt, params)?;
            let wall = start.elapsed().as_secs_f64() * 1e3;
            Completion {
                latency_ms: Some(c.latency_ms.unwrap_or(wall)),
                ..c
            }
        };
        let latency_ms = completion.latency_ms.unwrap_or_default();
        if let Some(cache) = &self.cache {
            cache.insert(CacheEntry {
                key,
                prompt: text,
                params: *params,
                output: completion.text.clone(),
                latency_ms,
            })?;
        }
        Ok(Generation {
            text: completion.text,
            latency_ms,
            usage: completion.usage,
            cached: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{build_prompt, ChannelOffset, CodecConfig, Layout};
    use crate::data::ChannelSet;
    use std::sync::Arc;
    use std::time::Duration;

    fn prompt(rows: usize, cols: usize) -> PromptBundle {
        let set = ChannelSet::from_columns(vec![vec![0.2; rows]; cols]).unwrap();
        let layout = if cols == 1 {
            Layout::Univariate
        } else {
            Layout::Multivariate
        };
        build_prompt(
            &set,
            &ChannelOffset::default_set(cols, 2),
            layout,
            &CodecConfig::default(),
        )
        .unwrap()
    }

    #[test]
    fn mock_generation_is_deterministic() {
        let gw = Gateway::new(Box::new(MockBackend::new(MockMode::persistence())));
        let p = prompt(4, 2);
        let params = GenParams {
            seed: 7,
            ..GenParams::default()
        };
        let a = gw.generate(&p, &params, false).unwrap();
        let b = gw.generate(&p, &params, false).unwrap();
        assert_eq!(a.text, b.text);
        assert_eq!(a.text, "0.60, 1.60\n".repeat(4));
        assert_eq!(gw.backend_calls(), 2);
    }

    #[test]
    fn budget_is_checked_before_calling_backend() {
        let gw = Gateway::new(Box::new(MockBackend::new(MockMode::persistence())))
            .with_scheme(TokenScheme::per_char(4096));
        let big = prompt(96, 8);
        let err = gw.generate(&big, &GenParams::default(), false).unwrap_err();
        assert!(matches!(
            err,
            GatewayError::BudgetExceeded { limit: 4096, .. }
        ));
        assert_eq!(gw.backend_calls(), 0);
        assert!(gw.generate(&big, &GenParams::default(), true).is_ok());
        assert_eq!(gw.backend_calls(), 1);
    }

    #[test]
    fn cache_replays_without_backend_calls() {
        let gw = Gateway::new(Box::new(MockBackend::new(MockMode::Noisy)))
            .with_cache(ResponseCache::in_memory());
        let p = prompt(5, 1);
        let first = gw.generate(&p, &GenParams::default(), false).unwrap();
        let second = gw.generate(&p, &GenParams::default(), false).unwrap();
        assert!(!first.cached && second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!((gw.backend_calls(), gw.cache_hits()), (1, 1));
    }

    #[test]
    fn rejects_invalid_params() {
        let gw = Gateway::new(Box::new(MockBackend::new(MockMode::persistence())));
        let bad = GenParams {
            top_p: 0.0,
            ..GenParams::default()
        };
        assert!(matches!(
            gw.generate(&prompt(2, 1), &bad, false),
            Err(GatewayError::InvalidParams(_))
        ));
        let bad = GenParams {
            max_tokens: 0,
            ..GenParams::default()
        };
        assert!(bad.validate().is_err());
    }

    struct Slow {
        active: Arc<Mutex<(usize, usize)>>,
    }

    impl Backend for Slow {
        fn id(&self) -> String {
            "slow".into()
        }

        fn complete(&self, _: &PromptBundle, _: &GenParams) -> Result<Completion, GatewayError> {
            {
                let mut g = self.active.lock().unwrap();
                g.0 += 1;
                g.1 = g.1.max(g.0);
            }
            std::thread::sleep(Duration::from_millis(20));
            self.active.lock().unwrap().0 -= 1;
            Ok(Completion {
                text: "0.50\n".into(),
                usage: None,
                latency_ms: None,
            })
        }
    }

    #[test]
    fn bounds_concurrent_requests() {
        let active = Arc::new(Mutex::new((0, 0)));
        let gw = Gateway::new(Box::new(Slow {
            active: active.clone(),
        }))
        .with_max_in_flight(2);
        let p = prompt(2, 1);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let g = gw.generate(&p, &GenParams::default(), false).unwrap();
                    assert!(g.latency_ms >= 15.0);
                });
            }
        });
        assert_eq!(active.lock().unwrap().1, 2);
        assert_eq!(gw.backend_calls(), 8);
    }
}
