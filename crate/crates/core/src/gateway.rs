//! Uniform text-completion interface to a chat-style LLM endpoint: retries
//! with exponential backoff, a global in-flight bound, a requests-per-minute
//! ceiling, and an append-only response cache keyed by request hash.
//!
//! The transport is injectable so the entire pipeline can run against a
//! scripted stub with zero network access.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("configuration: {0}")]
    Config(String),
    #[error("transport failed after {attempts} attempt(s){}: {msg}",
            last_status.map(|s| format!(" (last HTTP status {s})")).unwrap_or_default())]
    Transport {
        attempts: u32,
        last_status: Option<u16>,
        msg: String,
    },
    #[error("malformed endpoint response: {0}")]
    Protocol(String),
    #[error("cache file {path}: {msg}")]
    Cache { path: String, msg: String },
}

/// One completion request; the cache key is a pure function of
/// (prompt, model, temperature).
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub prompt: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl CompletionRequest {
    pub fn request_key(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.model_name.as_bytes());
        hasher.update([0x1f]);
        hasher.update(format!("{}", self.temperature).as_bytes());
        hasher.update([0x1f]);
        hasher.update(self.prompt.as_bytes());
        hex::encode(hasher.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionResult {
    pub text: String,
    pub from_cache: bool,
    pub latency_ms: u64,
    /// Network attempts performed; 0 on a cache hit.
    pub attempts: u32,
}

/// Raw HTTP-level reply; the gateway interprets status and body.
#[derive(Debug, Clone)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

pub trait Transport: Send + Sync {
    /// Post one chat-completion body; `Err` is a connection-level failure.
    fn post_chat(&self, body: &serde_json::Value) -> Result<TransportReply, String>;
}

#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
    pub max_in_flight: usize,
    /// 0 disables the per-minute ceiling.
    pub requests_per_minute: u32,
    /// Seeds the deterministic backoff jitter.
    pub jitter_seed: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 250,
            max_in_flight: 4,
            requests_per_minute: 60,
            jitter_seed: 42,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct CacheStats {
    pub entries: usize,
    pub hits: usize,
    pub misses: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheLine {
    request_key: String,
    model: String,
    prompt_sha: String,
    text: String,
    timestamp: u64,
}

struct CacheState {
    map: HashMap<String, String>,
    writer: Option<BufWriter<File>>,
    path: String,
    hits: usize,
    misses: usize,
}

struct GateState {
    in_flight: usize,
    sent: VecDeque<Instant>,
}

/// Blocking admission control: bounded concurrency plus a sliding-minute
/// request ceiling.
struct RateGate {
    state: Mutex<GateState>,
    cv: Condvar,
    max_in_flight: usize,
    rpm: u32,
}

impl RateGate {
    fn new(max_in_flight: usize, rpm: u32) -> Self {
        Self {
            state: Mutex::new(GateState {
                in_flight: 0,
                sent: VecDeque::new(),
            }),
            cv: Condvar::new(),
            max_in_flight: max_in_flight.max(1),
            rpm,
        }
    }

    fn acquire(&self) -> Permit<'_> {
        loop {
            let mut st = self.state.lock().expect("rate gate");
            while st.in_flight >= self.max_in_flight {
                st = self.cv.wait(st).expect("rate gate");
            }
            if self.rpm > 0 {
                let now = Instant::now();
                while st
                    .sent
                    .front()
                    .is_some_and(|t| now.duration_since(*t) >= Duration::from_secs(60))
                {
                    st.sent.pop_front();
                }
                if st.sent.len() >= self.rpm as usize {
                    let oldest = *st.sent.front().expect("nonempty window");
                    let wait = Duration::from_secs(60)
                        .saturating_sub(now.duration_since(oldest))
                        .min(Duration::from_millis(200));
                    drop(st);
                    std::thread::sleep(wait.max(Duration::from_millis(1)));
                    continue;
                }
                st.sent.push_back(now);
            }
            st.in_flight += 1;
            return Permit { gate: self };
        }
    }
}

struct Permit<'a> {
    gate: &'a RateGate,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.gate.state.lock().expect("rate gate");
        st.in_flight -= 1;
        drop(st);
        self.gate.cv.notify_one();
    }
}

/// Shareable gateway; all internal state is synchronized.
pub struct Gateway {
    transport: Box<dyn Transport>,
    policy: RetryPolicy,
    cache: Mutex<CacheState>,
    gate: RateGate,
    jitter: Mutex<u64>,
}

impl Gateway {
    /// Opens (or starts) the cache file when a path is given; entries from an
    /// interrupted run are picked up so the run can resume.
    pub fn new(
        transport: Box<dyn Transport>,
        policy: RetryPolicy,
        cache_path: Option<&Path>,
    ) -> Result<Self, GatewayError> {
        let mut map = HashMap::new();
        let mut writer = None;
        let mut path_str = String::from("<memory>");
        if let Some(path) = cache_path {
            path_str = path.display().to_string();
            if path.exists() {
                let file = File::open(path).map_err(|e| GatewayError::Cache {
                    path: path_str.clone(),
                    msg: e.to_string(),
                })?;
                for (line_no, line) in BufReader::new(file).lines().enumerate() {
                    let line = line.map_err(|e| GatewayError::Cache {
                        path: path_str.clone(),
                        msg: e.to_string(),
                    })?;
                    if line.trim().is_empty() {
                        continue;
                    }
                    let entry: CacheLine =
                        serde_json::from_str(&line).map_err(|e| GatewayError::Cache {
                            path: path_str.clone(),
                            msg: format!("line {}: {e}", line_no + 1),
                        })?;
                    map.entry(entry.request_key).or_insert(entry.text);
                }
            }
            let file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GatewayError::Cache {
                    path: path_str.clone(),
                    msg: e.to_string(),
                })?;
            writer = Some(BufWriter::new(file));
        }
        let gate = RateGate::new(policy.max_in_flight, policy.requests_per_minute);
        let seed = if policy.jitter_seed == 0 {
            0x9e37_79b9_7f4a_7c15
        } else {
            policy.jitter_seed
        };
        Ok(Self {
            transport,
            policy,
            cache: Mutex::new(CacheState {
                map,
                writer,
                path: path_str,
                hits: 0,
                misses: 0,
            }),
            gate,
            jitter: Mutex::new(seed),
        })
    }

    pub fn cache_stats(&self) -> CacheStats {
        let cache = self.cache.lock().expect("cache");
        CacheStats {
            entries: cache.map.len(),
            hits: cache.hits,
            misses: cache.misses,
        }
    }

    fn next_jitter_ms(&self, cap: u64) -> u64 {
        if cap == 0 {
            return 0;
        }
        let mut s = self.jitter.lock().expect("jitter");
        *s ^= *s << 13;
        *s ^= *s >> 7;
        *s ^= *s << 17;
        *s % cap
    }

    /// Cached-or-fetched completion honoring the retry/rate policy.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        if request.prompt.trim().is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let key = request.request_key();
        {
            let mut cache = self.cache.lock().expect("cache");
            let cached = cache.map.get(&key).cloned();
            if let Some(text) = cached {
                cache.hits += 1;
                return Ok(CompletionResult {
                    text,
                    from_cache: true,
                    latency_ms: 0,
                    attempts: 0,
                });
            }
            cache.misses += 1;
        }

        let body = serde_json::json!({
            "model": request.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });

        let permit = self.gate.acquire();
        let started = Instant::now();
        let mut attempts = 0;
        let text = loop {
            attempts += 1;
            let (retryable, status, msg) = match self.transport.post_chat(&body) {
                Ok(reply) if reply.status == 200 => {
                    break parse_completion_text(&reply.body)?;
                }
                Ok(reply) => {
                    let retryable = reply.status == 429 || (500..=599).contains(&reply.status);
                    (retryable, Some(reply.status), truncate(&reply.body, 200))
                }
                Err(msg) => (true, None, msg),
            };
            if !retryable || attempts >= self.policy.max_attempts {
                return Err(GatewayError::Transport {
                    attempts,
                    last_status: status,
                    msg,
                });
            }
            let base = self.policy.backoff_base_ms;
            let backoff = base.saturating_mul(1 << (attempts - 1).min(16))
                + self.next_jitter_ms(base / 2 + 1);
            std::thread::sleep(Duration::from_millis(backoff));
        };
        let latency_ms = started.elapsed().as_millis() as u64;
        drop(permit);

        let mut cache = self.cache.lock().expect("cache");
        if !cache.map.contains_key(&key) {
            let entry = CacheLine {
                request_key: key.clone(),
                model: request.model_name.clone(),
                prompt_sha: hex::encode(Sha256::digest(request.prompt.as_bytes())),
                text: text.clone(),
                timestamp: SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0),
            };
            if let Some(w) = cache.writer.as_mut() {
                let line = serde_json::to_string(&entry).expect("cache line serializes");
                writeln!(w, "{line}")
                    .and_then(|()| w.flush())
                    .map_err(|e| GatewayError::Cache {
                        path: cache.path.clone(),
                        msg: e.to_string(),
                    })?;
            }
            cache.map.insert(key, text.clone());
        }

        Ok(CompletionResult {
            text,
            from_cache: false,
            latency_ms,
            attempts,
        })
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        s.to_string()
    } else {
        let mut end = max;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &s[..end])
    }
}

/// Pull the first choice's message content out of a chat-completion reply.
fn parse_completion_text(body: &str) -> Result<String, GatewayError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| GatewayError::Protocol(format!("body is not JSON: {e}")))?;
    value
        .get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(|t| t.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::Protocol("missing choices[0].message.content".to_string()))
}

/// Real HTTP transport. The credential comes from `EBIKE_LLM_API_KEY` and the
/// endpoint from configuration; both are checked before any network call.
pub struct HttpTransport {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    pub const API_KEY_ENV: &'static str = "EBIKE_LLM_API_KEY";
    pub const ENDPOINT_ENV: &'static str = "EBIKE_LLM_ENDPOINT";

    pub fn from_env(endpoint: Option<String>) -> Result<Self, GatewayError> {
        let endpoint = endpoint
            .or_else(|| std::env::var(Self::ENDPOINT_ENV).ok())
            .filter(|e| !e.trim().is_empty())
            .ok_or_else(|| {
                GatewayError::Config(format!(
                    "no LLM endpoint configured (set {})",
                    Self::ENDPOINT_ENV
                ))
            })?;
        let api_key = std::env::var(Self::API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| {
                GatewayError::Config(format!("missing credential (set {})", Self::API_KEY_ENV))
            })?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Config(format!("http client: {e}")))?;
        Ok(Self {
            endpoint,
            api_key,
            client,
        })
    }
}

impl Transport for HttpTransport {
    fn post_chat(&self, body: &serde_json::Value) -> Result<TransportReply, String> {
        let response = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .map_err(|e| e.to_string())?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| e.to_string())?;
        Ok(TransportReply { status, body })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn ok_body(text: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": text}}]
        })
        .to_string()
    }

    /// Plays back a fixed list of replies, then repeats the last one.
    struct Scripted {
        replies: Mutex<VecDeque<Result<TransportReply, String>>>,
        calls: AtomicU32,
    }

    impl Scripted {
        fn new(replies: Vec<Result<TransportReply, String>>) -> Self {
            Self {
                replies: Mutex::new(replies.into()),
                calls: AtomicU32::new(0),
            }
        }
    }

    impl Transport for Scripted {
        fn post_chat(&self, _body: &serde_json::Value) -> Result<TransportReply, String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            let mut replies = self.replies.lock().unwrap();
            if replies.len() > 1 {
                replies.pop_front().unwrap()
            } else {
                replies.front().cloned().unwrap()
            }
        }
    }

    fn fast_policy() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            backoff_base_ms: 0,
            max_in_flight: 4,
            requests_per_minute: 0,
            jitter_seed: 7,
        }
    }

    fn request(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            prompt: prompt.into(),
            model_name: "test-model".into(),
            temperature: 0.0,
            max_tokens: 64,
        }
    }

    #[test]
    fn request_key_is_pure_and_input_sensitive() {
        let a = request("hello").request_key();
        let b = request("hello").request_key();
        assert_eq!(a, b);
        assert_ne!(a, request("hello!").request_key());
        let mut other_model = request("hello");
        other_model.model_name = "another".into();
        assert_ne!(a, other_model.request_key());
        let mut other_temp = request("hello");
        other_temp.temperature = 0.5;
        assert_ne!(a, other_temp.request_key());
    }

    #[test]
    fn second_identical_call_hits_cache() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 200,
            body: ok_body("yes"),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        let r1 = gw.complete(&request("is it an e-bike?")).unwrap();
        assert!(!r1.from_cache);
        assert_eq!(r1.attempts, 1);
        let r2 = gw.complete(&request("is it an e-bike?")).unwrap();
        assert!(r2.from_cache);
        assert_eq!(r2.attempts, 0);
        assert_eq!(r2.text, r1.text);
        assert_eq!(
            gw.cache_stats(),
            CacheStats {
                entries: 1,
                hits: 1,
                misses: 1
            }
        );
    }

    #[test]
    fn retries_through_429_then_succeeds() {
        let transport = Scripted::new(vec![
            Ok(TransportReply {
                status: 429,
                body: "slow down".into(),
            }),
            Ok(TransportReply {
                status: 200,
                body: ok_body("ok"),
            }),
        ]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        let r = gw.complete(&request("p")).unwrap();
        assert_eq!(r.attempts, 2);
        assert_eq!(r.text, "ok");
    }

    #[test]
    fn exhausted_retries_carry_last_status() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 503,
            body: "down".into(),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        match gw.complete(&request("p")) {
            Err(GatewayError::Transport {
                attempts,
                last_status,
                ..
            }) => {
                assert_eq!(attempts, 3);
                assert_eq!(last_status, Some(503));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn non_retryable_status_fails_fast() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 401,
            body: "bad key".into(),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        match gw.complete(&request("p")) {
            Err(GatewayError::Transport { attempts, .. }) => assert_eq!(attempts, 1),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_response_is_protocol_error() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 200,
            body: "{\"nope\": true}".into(),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        assert!(matches!(
            gw.complete(&request("p")),
            Err(GatewayError::Protocol(_))
        ));
    }

    #[test]
    fn empty_prompt_never_reaches_transport() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 200,
            body: ok_body("x"),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        assert!(matches!(
            gw.complete(&request("   ")),
            Err(GatewayError::EmptyPrompt)
        ));
        assert_eq!(gw.cache_stats().misses, 0);
    }

    #[test]
    fn cache_persists_across_gateways() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        {
            let transport = Scripted::new(vec![Ok(TransportReply {
                status: 200,
                body: ok_body("answer"),
            })]);
            let gw = Gateway::new(Box::new(transport), fast_policy(), Some(&path)).unwrap();
            gw.complete(&request("q")).unwrap();
        }
        // A transport that always fails proves the reply comes from disk.
        let transport = Scripted::new(vec![Err("no network".into())]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), Some(&path)).unwrap();
        let r = gw.complete(&request("q")).unwrap();
        assert!(r.from_cache);
        assert_eq!(r.text, "answer");
        assert_eq!(gw.cache_stats().entries, 1);
    }

    #[test]
    fn distinct_requests_create_distinct_entries() {
        let transport = Scripted::new(vec![Ok(TransportReply {
            status: 200,
            body: ok_body("t"),
        })]);
        let gw = Gateway::new(Box::new(transport), fast_policy(), None).unwrap();
        gw.complete(&request("a")).unwrap();
        gw.complete(&request("b")).unwrap();
        assert_eq!(gw.cache_stats().entries, 2);
    }

    /// Counts concurrent callers to prove the in-flight bound.
    struct Concurrency {
        current: AtomicU32,
        peak: AtomicU32,
    }

    impl Transport for Concurrency {
        fn post_chat(&self, _body: &serde_json::Value) -> Result<TransportReply, String> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(3));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok(TransportReply {
                status: 200,
                body: ok_body("r"),
            })
        }
    }

    #[test]
    fn in_flight_never_exceeds_bound() {
        let transport = Box::leak(Box::new(Concurrency {
            current: AtomicU32::new(0),
            peak: AtomicU32::new(0),
        }));
        let policy = RetryPolicy {
            max_in_flight: 2,
            ..fast_policy()
        };
        let gw = Gateway::new(Box::new(SharedTransport(transport)), policy, None).unwrap();
        std::thread::scope(|s| {
            for i in 0..8 {
                let gw = &gw;
                s.spawn(move || {
                    gw.complete(&request(&format!("p{i}"))).unwrap();
                });
            }
        });
        assert!(transport.peak.load(Ordering::SeqCst) <= 2);
        assert_eq!(gw.cache_stats().entries, 8);
    }

    struct SharedTransport(&'static Concurrency);

    impl Transport for SharedTransport {
        fn post_chat(&self, body: &serde_json::Value) -> Result<TransportReply, String> {
            self.0.post_chat(body)
        }
    }
}
