//! Client for external model servers speaking the JSON wire protocol:
//!
//! - `POST /v1/complete` `{context, n_samples, max_tokens, temperature, seed}`
//!   → `{completions: [{tokens: [{text, logprob}], terminated_by}], model}`
//! - `POST /v1/score` `{context, tokens}` → `{logprobs}`
//! - `GET /v1/health` → `{model, ready}`
//!
//! Errors come back as 4xx/5xx with `{"error": str}`. Requests are never
//! retried so that measured latency is the latency of one round trip.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{
    Completion, CompletionProvider, CompletionRequest, ProviderError, ProviderTiming, SampledCompletion, ScoreOutput,
    Termination, Token, EOS_TEXT,
};

/// Environment variable naming the default server URL.
pub const ENDPOINT_ENV: &str = "CHAITEA_ENDPOINT";

/// Positive log-probabilities up to this size are rounding noise and are
/// clamped to zero; anything larger is a malformed reply.
pub const LOGPROB_SLACK: f64 = 1e-6;

#[derive(Debug, Serialize)]
struct CompleteBody<'a> {
    context: &'a str,
    n_samples: usize,
    max_tokens: usize,
    temperature: f64,
    seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct CompleteReply {
    completions: Vec<SampledCompletion>,
    model: String,
}

#[derive(Debug, Serialize)]
struct ScoreBody<'a> {
    context: &'a str,
    tokens: &'a [String],
}

#[derive(Debug, Deserialize)]
struct ScoreReply {
    logprobs: Vec<f64>,
}

#[derive(Debug, Deserialize)]
struct ErrorReply {
    error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub model: String,
    pub ready: bool,
}

pub struct HttpProvider {
    endpoint: String,
    agent: ureq::Agent,
    model: std::sync::OnceLock<String>,
    empty_replaced: AtomicU64,
}

impl std::fmt::Debug for HttpProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpProvider").field("endpoint", &self.endpoint).finish()
    }
}

impl HttpProvider {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self::with_timeout(endpoint, Duration::from_secs(120))
    }

    pub fn with_timeout(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let endpoint = endpoint.into().trim_end_matches('/').to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { endpoint, agent, model: std::sync::OnceLock::new(), empty_replaced: AtomicU64::new(0) }
    }

    /// Provider for the URL in `CHAITEA_ENDPOINT`, if set.
    pub fn from_env() -> Option<Self> {
        std::env::var(ENDPOINT_ENV).ok().filter(|s| !s.trim().is_empty()).map(Self::new)
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Completions that came back empty and were replaced by a lone EOS marker.
    pub fn empty_replacements(&self) -> u64 {
        self.empty_replaced.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint, path)
    }

    fn transport(&self, e: impl std::fmt::Display) -> ProviderError {
        ProviderError::Transport { endpoint: self.endpoint.clone(), cause: e.to_string() }
    }

    fn malformed(&self, cause: impl Into<String>) -> ProviderError {
        ProviderError::Malformed { endpoint: self.endpoint.clone(), cause: cause.into() }
    }

    /// Reads a reply body, turning non-2xx statuses into backend errors.
    fn read_reply<T: serde::de::DeserializeOwned>(
        &self,
        result: Result<ureq::http::Response<ureq::Body>, ureq::Error>,
    ) -> Result<T, ProviderError> {
        let mut resp = result.map_err(|e| self.transport(e))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(|e| self.transport(e))?;
        if !(200..300).contains(&status) {
            let message = serde_json::from_str::<ErrorReply>(&text).map(|e| e.error).unwrap_or(text);
            return Err(ProviderError::Backend { endpoint: self.endpoint.clone(), status, message });
        }
        serde_json::from_str(&text).map_err(|e| self.malformed(e.to_string()))
    }

    pub fn health(&self) -> Result<Health, ProviderError> {
        let h: Health = self.read_reply(self.agent.get(self.url("/v1/health")).call())?;
        let _ = self.model.set(h.model.clone());
        Ok(h)
    }

    fn check_logprob(&self, lp: f64) -> Result<f64, ProviderError> {
        if !lp.is_finite() || lp > LOGPROB_SLACK {
            return Err(self.malformed(format!("invalid logprob {lp}")));
        }
        Ok(lp.min(0.0))
    }

    fn normalize(&self, mut s: SampledCompletion, max_tokens: usize) -> Result<SampledCompletion, ProviderError> {
        if s.tokens.is_empty() {
            self.empty_replaced.fetch_add(1, Ordering::Relaxed);
            log::debug!("{}: empty completion replaced by end-of-sequence", self.endpoint);
            return Ok(SampledCompletion { tokens: vec![Token::eos(0.0)], terminated_by: Termination::Eos });
        }
        if s.tokens.len() > max_tokens {
            return Err(self.malformed(format!("{} tokens exceed max_tokens {max_tokens}", s.tokens.len())));
        }
        for t in &mut s.tokens {
            t.logprob = self.check_logprob(t.logprob)?;
        }
        if s.terminated_by == Termination::Eos && s.tokens.last().is_some_and(|t| t.text != EOS_TEXT) {
            return Err(self.malformed("eos-terminated completion does not end with the empty marker token"));
        }
        Ok(s)
    }
}

impl CompletionProvider for HttpProvider {
    fn name(&self) -> String {
        match self.model.get() {
            Some(m) => format!("http:{m}"),
            None => format!("http:{}", self.endpoint),
        }
    }

    fn complete(&self, req: &CompletionRequest) -> Result<Completion, ProviderError> {
        req.validate()?;
        let body = CompleteBody {
            context: &req.context_text,
            n_samples: req.n_samples,
            max_tokens: req.max_tokens,
            temperature: req.temperature,
            seed: req.seed,
        };
        let start = Instant::now();
        let reply: CompleteReply = self.read_reply(self.agent.post(self.url("/v1/complete")).send_json(&body))?;
        let wall_ms = start.elapsed().as_secs_f64() * 1000.0;
        let _ = self.model.set(reply.model);
        if reply.completions.len() != req.n_samples {
            return Err(self.malformed(format!(
                "expected {} completions, got {}",
                req.n_samples,
                reply.completions.len()
            )));
        }
        let samples = reply
            .completions
            .into_iter()
            .map(|s| self.normalize(s, req.max_tokens))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Completion { samples, timing: ProviderTiming { wall_ms } })
    }

    fn score(&self, context: &str, forced_tokens: &[String]) -> Result<ScoreOutput, ProviderError> {
        if forced_tokens.is_empty() {
            return Err(ProviderError::EmptyForcedTokens);
        }
        let body = ScoreBody { context, tokens: forced_tokens };
        let reply: ScoreReply = self.read_reply(self.agent.post(self.url("/v1/score")).send_json(&body))?;
        if reply.logprobs.len() != forced_tokens.len() {
            return Err(self.malformed(format!(
                "expected {} logprobs, got {}",
                forced_tokens.len(),
                reply.logprobs.len()
            )));
        }
        let logprobs = reply.logprobs.into_iter().map(|lp| self.check_logprob(lp)).collect::<Result<Vec<_>, _>>()?;
        Ok(ScoreOutput { unk: vec![false; logprobs.len()], logprobs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    /// Minimal HTTP/1.1 server answering each request through `handler`
    /// (method, path, body) -> (status, body). Returns the base URL and the
    /// log of received requests.
    type RequestLog = Arc<Mutex<Vec<(String, String, String)>>>;

    fn serve<F>(handler: F) -> (String, RequestLog)
    where
        F: Fn(&str, &str, &str) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let seen = log.clone();
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 {
                    continue;
                }
                let mut parts = line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let path = parts.next().unwrap_or("").to_string();
                let mut len = 0usize;
                loop {
                    let mut h = String::new();
                    reader.read_line(&mut h).unwrap();
                    if h.trim().is_empty() {
                        break;
                    }
                    if let Some((k, v)) = h.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            len = v.trim().parse().unwrap();
                        }
                    }
                }
                let mut body = vec![0; len];
                reader.read_exact(&mut body).unwrap();
                let body = String::from_utf8(body).unwrap();
                let (status, reply) = handler(&method, &path, &body);
                seen.lock().unwrap().push((method, path, body));
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
            }
        });
        (url, log)
    }

    fn completion_json(texts: &[&[(&str, f64)]]) -> String {
        let completions: Vec<serde_json::Value> = texts
            .iter()
            .map(|toks| {
                let tokens: Vec<serde_json::Value> =
                    toks.iter().map(|(t, lp)| serde_json::json!({"text": t, "logprob": lp})).collect();
                let term = if toks.last().is_some_and(|t| t.0.is_empty()) { "eos" } else { "token_limit" };
                serde_json::json!({"tokens": tokens, "terminated_by": term})
            })
            .collect();
        serde_json::json!({"completions": completions, "model": "toy"}).to_string()
    }

    #[test]
    fn complete_round_trip() {
        let reply = completion_json(&[&[("Hello", -0.5), (" there", -1.0), ("", -0.1)], &[("Hi", 3e-7)]]);
        let (url, log) = serve(move |_, _, _| (200, reply.clone()));
        let p = HttpProvider::new(format!("{url}/"));
        let out = p.complete(&CompletionRequest::new("ctx", 2, 5).with_seed(9)).unwrap();
        assert_eq!(out.samples[0].decoded_text(), "Hello there");
        assert_eq!(out.samples[0].terminated_by, Termination::Eos);
        assert_eq!(out.samples[1].tokens[0].logprob, 0.0);
        assert!(out.timing.wall_ms >= 0.0);
        assert_eq!(p.name(), "http:toy");
        let (method, path, body) = log.lock().unwrap()[0].clone();
        assert_eq!((method.as_str(), path.as_str()), ("POST", "/v1/complete"));
        let sent: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(
            sent,
            serde_json::json!({"context": "ctx", "n_samples": 2, "max_tokens": 5, "temperature": 1.0, "seed": 9})
        );
    }

    #[test]
    fn empty_completion_is_replaced_and_counted() {
        let reply = completion_json(&[&[]]);
        let (url, _) = serve(move |_, _, _| (200, reply.clone()));
        let p = HttpProvider::new(url);
        let out = p.complete(&CompletionRequest::new("ctx", 1, 5)).unwrap();
        assert_eq!(out.samples[0].tokens, vec![Token::eos(0.0)]);
        assert_eq!(p.empty_replacements(), 1);
    }

    #[test]
    fn malformed_replies_are_rejected() {
        let cases = [
            "not json".to_string(),
            completion_json(&[&[("a", 0.5)]]),
            completion_json(&[&[("a", -0.1)], &[("b", -0.1)]]),
            completion_json(&[&[("a", -0.1), ("b", -0.1), ("c", -0.1)]]),
        ];
        for reply in cases {
            let (url, _) = serve(move |_, _, _| (200, reply.clone()));
            let p = HttpProvider::new(url.clone());
            match p.complete(&CompletionRequest::new("ctx", 1, 2)) {
                Err(ProviderError::Malformed { endpoint, .. }) => assert_eq!(endpoint, url),
                other => panic!("expected malformed, got {other:?}"),
            }
        }
    }

    #[test]
    fn error_status_carries_message() {
        let (url, _) = serve(|_, _, _| (400, r#"{"error": "context too long"}"#.into()));
        let p = HttpProvider::new(url);
        match p.complete(&CompletionRequest::new("ctx", 1, 2)) {
            Err(ProviderError::Backend { status, message, .. }) => {
                assert_eq!(status, 400);
                assert_eq!(message, "context too long");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unreachable_is_transport_error() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        drop(listener);
        let p = HttpProvider::with_timeout(url.clone(), Duration::from_secs(2));
        match p.complete(&CompletionRequest::new("ctx", 1, 2)) {
            Err(ProviderError::Transport { endpoint, .. }) => assert_eq!(endpoint, url),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn score_and_health() {
        let (url, log) = serve(|method, path, _| match (method, path) {
            ("POST", "/v1/score") => (200, r#"{"logprobs": [-0.25, -1.5]}"#.into()),
            ("GET", "/v1/health") => (200, r#"{"model": "toy", "ready": true}"#.into()),
            _ => (404, r#"{"error": "no route"}"#.into()),
        });
        let p = HttpProvider::new(url);
        let s = p.score("ctx", &["a".into(), " b".into()]).unwrap();
        assert_eq!(s.logprobs, vec![-0.25, -1.5]);
        assert_eq!(p.health().unwrap(), Health { model: "toy".into(), ready: true });
        let sent: serde_json::Value = serde_json::from_str(&log.lock().unwrap()[0].2).unwrap();
        assert_eq!(sent, serde_json::json!({"context": "ctx", "tokens": ["a", " b"]}));
        assert_eq!(p.score("ctx", &[]), Err(ProviderError::EmptyForcedTokens));
    }
}
