//! OpenAI-compatible chat-completions backend.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, Completion, GatewayError, GenParams, Usage};
use crate::codec::PromptBundle;

pub const DEFAULT_API_KEY_ENV: &str = "LLMPRED_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL such as `https://api.openai.com/v1`, or a full
    /// `.../chat/completions` endpoint.
    pub url: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
    /// Also send `do_sample` and `renormalize_logits`; only some servers
    /// accept them.
    pub forward_sampling_flags: bool,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            url: "https://api.openai.com/v1".into(),
            model: "gpt-4o-mini".into(),
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            timeout_secs: 120,
            max_retries: 2,
            backoff_base_ms: 1000,
            forward_sampling_flags: false,
        }
    }
}

impl RemoteConfig {
    pub fn endpoint(&self) -> String {
        let url = self.url.trim_end_matches('/');
        if url.ends_with("/chat/completions") {
            url.to_string()
        } else {
            format!("{url}/chat/completions")
        }
    }
}

/// Request body: a single user-role message carrying the whole prompt.
pub fn request_body(cfg: &RemoteConfig, prompt: &str, params: &GenParams) -> Value {
    let mut body = json!({
        "model": cfg.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": params.temperature,
        "top_p": params.top_p,
        "max_tokens": params.max_tokens,
    });
    if cfg.forward_sampling_flags {
        body["do_sample"] = json!(params.do_sample);
        body["renormalize_logits"] = json!(params.renormalize_logits);
    }
    body
}

fn parse_response(body: &str) -> Result<(String, Option<Usage>), GatewayError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let text = v
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| {
            GatewayError::MalformedResponse("missing choices[0].message.content".into())
        })?
        .to_string();
    let usage = v.get("usage").and_then(|u| {
        Some(Usage {
            prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
            completion_tokens: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok((text, usage))
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct RemoteBackend {
    cfg: RemoteConfig,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteBackend {
    /// Reads the API key from the configured environment variable. A missing
    /// key is allowed (local servers often need none).
    pub fn new(cfg: RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&cfg.api_key_env)
            .ok()
            .filter(|k| !k.is_empty());
        Self::with_key(cfg, api_key)
    }

    pub fn with_key(cfg: RemoteConfig, api_key: Option<String>) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| GatewayError::Network(e.to_string()))?;
        Ok(Self {
            cfg,
            api_key,
            client,
        })
    }

    fn send_once(&self, body: &Value) -> Result<(u16, String), GatewayError> {
        let mut req = self.client.post(self.cfg.endpoint()).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Network(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout
            } else {
                GatewayError::Network(e.to_string())
            }
        })?;
        Ok((status, text))
    }
}

impl Backend for RemoteBackend {
    fn id(&self) -> String {
        format!(
            "openai-compatible:{}#{}",
            self.cfg.endpoint(),
            self.cfg.model
        )
    }

    fn complete(
        &self,
        prompt: &PromptBundle,
        params: &GenParams,
    ) -> Result<Completion, GatewayError> {
        // serialized once so every retry resends identical bytes
        let body = request_body(&self.cfg, &prompt.text(), params);
        let mut attempt = 0;
        loop {
            let (status, text) = self.send_once(&body)?;
            if (200..300).contains(&status) {
                let (text, usage) = parse_response(&text)?;
                return Ok(Completion {
                    text,
                    usage,
                    latency_ms: None,
                });
            }
            if !retryable(status) || attempt >= self.cfg.max_retries {
                return Err(GatewayError::Transport { status, body: text });
            }
            let delay = self.cfg.backoff_base_ms.saturating_mul(1 << attempt);
            log::warn!("HTTP {status}; retrying in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
            attempt += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_normalization() {
        let mut cfg = RemoteConfig::default();
        assert_eq!(cfg.endpoint(), "https://api.openai.com/v1/chat/completions");
        cfg.url = "http://localhost:8000/v1/chat/completions/".into();
        assert_eq!(cfg.endpoint(), "http://localhost:8000/v1/chat/completions");
    }

    #[test]
    fn body_shape() {
        let params = GenParams {
            max_tokens: 77,
            ..GenParams::default()
        };
        let b = request_body(&RemoteConfig::default(), "hello", &params);
        assert_eq!(b["messages"][0]["role"], "user");
        assert_eq!(b["messages"][0]["content"], "hello");
        assert_eq!(b["temperature"], 1.0);
        assert_eq!(b["top_p"], 0.9);
        assert_eq!(b["max_tokens"], 77);
        assert!(b.get("do_sample").is_none());
        let cfg = RemoteConfig {
            forward_sampling_flags: true,
            ..RemoteConfig::default()
        };
        let b = request_body(&cfg, "hello", &params);
        assert_eq!(b["do_sample"], true);
        assert_eq!(b["renormalize_logits"], false);
    }

    #[test]
    fn response_parsing() {
        let (t, u) = parse_response(
            r#"{"choices":[{"message":{"role":"assistant","content":"0.5\n"}}],"usage":{"prompt_tokens":3,"completion_tokens":2,"total_tokens":5}}"#,
        )
        .unwrap();
        assert_eq!(t, "0.5\n");
        assert_eq!(
            u,
            Some(Usage {
                prompt_tokens: 3,
                completion_tokens: 2
            })
        );
        assert!(matches!(
            parse_response(r#"{"choices":[]}"#),
            Err(GatewayError::MalformedResponse(_))
        ));
        assert!(matches!(
            parse_response("not json"),
            Err(GatewayError::MalformedResponse(_))
        ));
    }
}
