//! OpenAI-compatible chat-completions client with retry and rate limiting.

use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use super::{BackendKind, BackendSpec, ModelRequest, TextModel};
use crate::error::{Error, Result};

/// Environment variable holding the bearer token.
pub const API_KEY_ENV: &str = "CTX_API_KEY";

const RETRYABLE_STATUS: [u16; 6] = [408, 429, 500, 502, 503, 504];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// One HTTP POST. `Err` means the request never produced a response.
pub trait Transport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Value)
        -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
    ) -> std::result::Result<HttpResponse, String> {
        let mut req = self.agent.post(url);
        if let Some(key) = bearer {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

/// Spaces requests at least `1 / rate` seconds apart across all callers.
pub struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn per_second(rate: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / rate),
            next_slot: Mutex::new(None),
        }
    }

    pub fn acquire(&self) {
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        let now = Instant::now();
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}

pub struct HttpModel {
    name: String,
    endpoint: String,
    model_name: String,
    temperature: f64,
    max_retries: u32,
    backoff: Duration,
    api_key: Option<String>,
    limiter: Option<RateLimiter>,
    transport: Box<dyn Transport>,
}

impl HttpModel {
    /// Builds a client over `transport`; the API key comes from `CTX_API_KEY`.
    pub fn new(name: impl Into<String>, spec: &BackendSpec, transport: Box<dyn Transport>) -> Result<Self> {
        spec.validate()?;
        if spec.kind != BackendKind::Http {
            return Err(Error::Config("HttpModel needs an http backend spec".into()));
        }
        Ok(Self {
            name: name.into(),
            endpoint: spec.endpoint.clone().unwrap_or_default(),
            model_name: spec.model_name.clone().unwrap_or_default(),
            temperature: spec.temperature,
            max_retries: spec.max_retries,
            backoff: Duration::from_millis(spec.backoff_ms),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            limiter: spec.requests_per_second.map(RateLimiter::per_second),
            transport,
        })
    }

    pub fn from_spec(name: impl Into<String>, spec: &BackendSpec) -> Result<Self> {
        let transport = UreqTransport::new(Duration::from_secs_f64(spec.timeout_secs));
        Self::new(name, spec, Box::new(transport))
    }

    pub fn request_body(&self, prompt: &str) -> Value {
        json!({
            "model": self.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.temperature,
        })
    }

    /// Sends `prompt`, retrying transport failures and retryable statuses with
    /// exponential backoff. At most `max_retries + 1` attempts are made.
    pub fn llm_complete(&self, prompt: &str) -> Result<String> {
        if prompt.trim().is_empty() {
            return Err(Error::Config("prompt must be non-empty".into()));
        }
        let body = self.request_body(prompt);
        let attempts = self.max_retries + 1;
        let mut last_failure = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let factor = 1u32.checked_shl(attempt - 1).unwrap_or(u32::MAX);
                std::thread::sleep(self.backoff.saturating_mul(factor));
            }
            if let Some(limiter) = &self.limiter {
                limiter.acquire();
            }
            match self
                .transport
                .post_json(&self.endpoint, self.api_key.as_deref(), &body)
            {
                Err(e) => last_failure = e,
                Ok(resp) if (200..300).contains(&resp.status) => {
                    return parse_completion(&resp);
                }
                Ok(resp) if RETRYABLE_STATUS.contains(&resp.status) => {
                    last_failure = format!("status {}", resp.status);
                }
                Ok(resp) => {
                    return Err(Error::BackendRejected {
                        status: resp.status,
                        body: resp.body,
                    })
                }
            }
            log::debug!("{}: attempt {} failed: {last_failure}", self.name, attempt + 1);
        }
        Err(Error::BackendUnavailable {
            attempts,
            reason: last_failure,
        })
    }
}

fn parse_completion(resp: &HttpResponse) -> Result<String> {
    let value: Value = serde_json::from_str(&resp.body).map_err(|e| Error::BackendRejected {
        status: resp.status,
        body: format!("unparseable completion body: {e}"),
    })?;
    let content = value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::BackendRejected {
            status: resp.status,
            body: "completion body lacks choices[0].message.content".into(),
        })?;
    let content = content.trim();
    if content.is_empty() {
        return Err(Error::EmptyResponse { context: None });
    }
    Ok(content.to_owned())
}

impl TextModel for HttpModel {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &ModelRequest) -> Result<String> {
        self.llm_complete(&request.prompt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Replays a fixed sequence of outcomes and counts attempts.
    struct Replay {
        outcomes: Vec<std::result::Result<HttpResponse, String>>,
        calls: Arc<AtomicUsize>,
        seen: Mutex<Vec<Value>>,
    }

    impl Transport for Replay {
        fn post_json(
            &self,
            _url: &str,
            _bearer: Option<&str>,
            body: &Value,
        ) -> std::result::Result<HttpResponse, String> {
            self.seen.lock().unwrap().push(body.clone());
            let i = self.calls.fetch_add(1, Ordering::SeqCst);
            self.outcomes
                .get(i)
                .cloned()
                .unwrap_or_else(|| Err("exhausted".into()))
        }
    }

    fn ok(text: &str) -> std::result::Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: 200,
            body: json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
                .to_string(),
        })
    }

    fn model(outcomes: Vec<std::result::Result<HttpResponse, String>>, max_retries: u32) -> (HttpModel, Arc<AtomicUsize>) {
        let calls = Arc::new(AtomicUsize::new(0));
        let spec = BackendSpec {
            kind: BackendKind::Http,
            endpoint: Some("http://localhost:0/v1/chat/completions".into()),
            model_name: Some("gpt-4-0613".into()),
            max_retries,
            backoff_ms: 0,
            ..Default::default()
        };
        let transport = Replay {
            outcomes,
            calls: calls.clone(),
            seen: Mutex::new(Vec::new()),
        };
        (HttpModel::new("reader", &spec, Box::new(transport)).unwrap(), calls)
    }

    #[test]
    fn pass_through() {
        let (m, calls) = model(vec![ok("Paris")], 3);
        assert_eq!(m.llm_complete("Q?").unwrap(), "Paris");
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn request_shape() {
        let (m, _) = model(vec![], 0);
        let body = m.request_body("hello");
        assert_eq!(body["model"], "gpt-4-0613");
        assert_eq!(body["temperature"], 0.0);
        assert_eq!(body["messages"][0]["role"], "user");
        assert_eq!(body["messages"][0]["content"], "hello");
    }

    #[test]
    fn retries_then_succeeds() {
        let (m, calls) = model(vec![Err("reset".into()), Err("reset".into()), ok("Paris")], 3);
        assert_eq!(m.llm_complete("Q?").unwrap(), "Paris");
        assert_eq!(calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_exhaustion_is_unavailable() {
        let outcomes = (0..4).map(|_| Err("timeout".to_string())).chain([ok("late")]).collect();
        let (m, calls) = model(outcomes, 3);
        match m.llm_complete("Q?") {
            Err(Error::BackendUnavailable { attempts, .. }) => assert_eq!(attempts, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn retryable_status_is_retried() {
        let busy = Ok(HttpResponse {
            status: 429,
            body: "slow down".into(),
        });
        let (m, calls) = model(vec![busy, ok("Lyon")], 1);
        assert_eq!(m.llm_complete("Q?").unwrap(), "Lyon");
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn non_retryable_status_is_rejected() {
        let bad = Ok(HttpResponse {
            status: 401,
            body: "bad key".into(),
        });
        let (m, calls) = model(vec![bad, ok("never")], 3);
        assert!(matches!(
            m.llm_complete("Q?"),
            Err(Error::BackendRejected { status: 401, .. })
        ));
        assert_eq!(calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn empty_completion() {
        let (m, _) = model(vec![ok("   ")], 3);
        assert!(matches!(m.llm_complete("Q?"), Err(Error::EmptyResponse { .. })));
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let limiter = RateLimiter::per_second(200.0);
        let start = Instant::now();
        for _ in 0..5 {
            limiter.acquire();
        }
        assert!(start.elapsed() >= Duration::from_millis(19));
    }

    #[test]
    fn attempts_never_exceed_retry_budget() {
        for max_retries in 0..5u32 {
            let outcomes = (0..10).map(|_| Err("down".to_string())).collect();
            let (m, calls) = model(outcomes, max_retries);
            assert!(m.llm_complete("Q?").is_err());
            assert_eq!(calls.load(Ordering::SeqCst), max_retries as usize + 1);
        }
    }
}
