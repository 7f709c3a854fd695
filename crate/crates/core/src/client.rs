// SPDX-License-Identifier: MIT OR Apache-2.0

//! Chat-completion clients used by the external routing scorer and judge.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use crate::error::{Error, Result};

/// Environment variable holding the bearer token for [`HttpChatClient`].
pub const API_KEY_ENV: &str = "FACETSTEER_API_KEY";

pub trait ChatClient: Send + Sync {
    fn complete(&self, system: &str, user: &str) -> Result<String>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Attempts after the first one.
    pub max_retries: usize,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay: Duration::from_millis(250),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: usize) -> Self {
        Self {
            max_retries,
            base_delay: Duration::ZERO,
        }
    }

    /// Run `f` until it succeeds, sleeping `base * 2^k` between attempts.
    pub fn run<T>(&self, mut f: impl FnMut(usize) -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt >= self.max_retries => {
                    return Err(Error::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(_) => {
                    let delay = self.base_delay.saturating_mul(1 << attempt.min(16));
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
            }
        }
    }
}

/// Ask for a completion and parse a JSON object out of it, retrying both
/// transport failures and replies that `parse` rejects.
pub fn complete_structured<T>(
    client: &dyn ChatClient,
    retry: &RetryPolicy,
    system: &str,
    user: &str,
    parse: impl Fn(&Value) -> Result<T>,
) -> Result<T> {
    retry.run(|_| {
        let reply = client.complete(system, user)?;
        let obj = extract_json_object(&reply)?;
        parse(&obj)
    })
}

/// First `{` to last `}` of a reply, parsed as JSON.
pub fn extract_json_object(reply: &str) -> Result<Value> {
    let (Some(a), Some(b)) = (reply.find('{'), reply.rfind('}')) else {
        return Err(Error::schema("reply contains no JSON object"));
    };
    if b < a {
        return Err(Error::schema("reply contains no JSON object"));
    }
    serde_json::from_str(&reply[a..=b]).map_err(|e| Error::schema(format!("reply is not valid JSON: {e}")))
}

/// OpenAI-compatible `POST {base_url}/chat/completions` client.
pub struct HttpChatClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(base_url: &str, model: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            agent,
        }
    }

    /// Like [`HttpChatClient::new`] with the key taken from `FACETSTEER_API_KEY`.
    pub fn from_env(base_url: &str, model: &str, timeout: Duration) -> Self {
        Self::new(base_url, model, std::env::var(API_KEY_ENV).ok(), timeout)
    }
}

impl ChatClient for HttpChatClient {
    fn complete(&self, system: &str, user: &str) -> Result<String> {
        let body = json!({
            "model": self.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(format!("{}/chat/completions", self.base_url));
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send_json(&body).map_err(map_ureq)?;
        let v: Value = resp.body_mut().read_json().map_err(map_ureq)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| Error::Client("response has no choices[0].message.content".into()))
    }
}

fn map_ureq(e: ureq::Error) -> Error {
    match e {
        ureq::Error::Timeout(_) => Error::Timeout,
        other => Error::Client(other.to_string()),
    }
}

/// Replays canned replies in order; for tests and offline runs.
#[derive(Debug, Default)]
pub struct ReplayClient {
    replies: Mutex<VecDeque<Result<String>>>,
    calls: Mutex<usize>,
}

impl ReplayClient {
    pub fn new(replies: impl IntoIterator<Item = Result<String>>) -> Self {
        Self {
            replies: Mutex::new(replies.into_iter().collect()),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("poisoned")
    }
}

impl ChatClient for ReplayClient {
    fn complete(&self, _system: &str, _user: &str) -> Result<String> {
        *self.calls.lock().expect("poisoned") += 1;
        self.replies
            .lock()
            .expect("poisoned")
            .pop_front()
            .unwrap_or_else(|| Err(Error::Client("replay queue exhausted".into())))
    }
}

/// Order-preserving map with at most `max_in_flight` calls running at once.
pub fn bounded_map<T, U, F>(items: &[T], max_in_flight: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync,
{
    let width = max_in_flight.max(1);
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(width) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|it| s.spawn(|| f(it))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("worker panicked")));
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    use super::*;

    #[test]
    fn retry_gives_up_after_two_retries() {
        let c = ReplayClient::new(vec![Ok("nope".into()), Ok("still no".into()), Ok("{}".into())]);
        let err = complete_structured(&c, &RetryPolicy::no_delay(1), "s", "u", |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::RetriesExhausted { attempts: 2, .. }));
        let c = ReplayClient::new(vec![Ok("x".into()), Ok("y".into()), Ok("{\"a\":1}".into())]);
        let v = complete_structured(&c, &RetryPolicy::no_delay(2), "s", "u", |v| Ok(v["a"].clone())).unwrap();
        assert_eq!(v, json!(1));
        assert_eq!(c.calls(), 3);
    }

    #[test]
    fn extracts_fenced_json() {
        let v = extract_json_object("```json\n{\"k\": [1, 2]}\n```").unwrap();
        assert_eq!(v["k"][1], 2);
        assert!(extract_json_object("} {").is_err());
    }

    #[test]
    fn bounded_map_keeps_order_and_bound() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let items: Vec<usize> = (0..10).collect();
        let out = bounded_map(&items, 3, |&i| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(2));
            live.fetch_sub(1, Ordering::SeqCst);
            i * 2
        });
        assert_eq!(out, (0..10).map(|i| i * 2).collect::<Vec<_>>());
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn http_client_round_trip() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut auth = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let l = line.to_ascii_lowercase();
                if let Some(v) = l.strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if l.starts_with("authorization:") {
                    auth = line.trim().to_string();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut body = vec![0; len];
            reader.read_exact(&mut body).unwrap();
            let req: Value = serde_json::from_slice(&body).unwrap();
            let reply = json!({"choices": [{"message": {"role": "assistant", "content": "hello"}}]}).to_string();
            write!(
                stream,
                "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                reply.len(),
                reply
            )
            .unwrap();
            (req, auth)
        });
        let c = HttpChatClient::new(
            &format!("http://{addr}/v1/"),
            "toy",
            Some("k123".into()),
            Duration::from_secs(5),
        );
        assert_eq!(c.complete("sys", "hi").unwrap(), "hello");
        let (req, auth) = server.join().unwrap();
        assert_eq!(req["model"], "toy");
        assert_eq!(req["messages"][1]["content"], "hi");
        assert_eq!(auth.to_ascii_lowercase(), "authorization: bearer k123");
    }
}
