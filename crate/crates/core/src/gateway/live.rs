use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use super::{ChatBackend, ChatCompletion, ChatExchange, ChatMessage, GatewayError, Usage};

pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1), capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct LiveBackend {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

#[derive(Serialize)]
struct RequestBody<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    n: u32,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ResponseBody {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ResponseUsage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    index: Option<usize>,
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ResponseUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

enum Attempt {
    Done(ChatCompletion),
    Retry(GatewayError),
    Fail(GatewayError),
}

impl LiveBackend {
    pub fn new(
        base_url: &str,
        api_key: impl Into<String>,
        request_timeout: Duration,
        retry: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let api_key = api_key.into();
        if api_key.trim().is_empty() {
            return Err(GatewayError::Config("API key is empty".into()));
        }
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(request_timeout))
            .build();
        Ok(Self {
            agent: ureq::Agent::new_with_config(config),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            retry,
        })
    }

    fn attempt(&self, exchange: &ChatExchange, attempt: u32) -> Attempt {
        let body = RequestBody {
            model: &exchange.model_name,
            messages: &exchange.messages,
            n: exchange.n,
            temperature: exchange.temperature,
            max_tokens: exchange.max_output_tokens,
        };
        let response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(&body);
        let mut response = match response {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry(GatewayError::Transport {
                    attempts: attempt,
                    message: e.to_string(),
                })
            }
        };
        let status = response.status().as_u16();
        match status {
            200..=299 => {}
            401 | 403 => return Attempt::Fail(GatewayError::Auth { status }),
            429 => return Attempt::Retry(GatewayError::RateLimited { attempts: attempt }),
            500..=599 => {
                return Attempt::Retry(GatewayError::Http {
                    status,
                    body: response.body_mut().read_to_string().unwrap_or_default(),
                })
            }
            _ => {
                return Attempt::Fail(GatewayError::Http {
                    status,
                    body: response.body_mut().read_to_string().unwrap_or_default(),
                })
            }
        }
        let parsed: ResponseBody = match response.body_mut().read_json() {
            Ok(p) => p,
            Err(e) => return Attempt::Fail(GatewayError::Malformed(e.to_string())),
        };
        let mut choices = parsed.choices;
        choices.sort_by_key(|c| c.index.unwrap_or(usize::MAX));
        Attempt::Done(ChatCompletion {
            texts: choices
                .into_iter()
                .map(|c| c.message.content.unwrap_or_default())
                .collect(),
            usage: parsed.usage.map(|u| Usage {
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
            }),
        })
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, exchange: &ChatExchange) -> Result<ChatCompletion, GatewayError> {
        let mut attempt = 1;
        loop {
            match self.attempt(exchange, attempt) {
                Attempt::Done(completion) => {
                    if let Some(usage) = completion.usage {
                        debug!(
                            prompt_tokens = usage.prompt_tokens,
                            completion_tokens = usage.completion_tokens,
                            "completion usage"
                        );
                    }
                    return Ok(completion);
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) if attempt >= self.retry.max_attempts => {
                    return Err(match e {
                        GatewayError::RateLimited { .. } => GatewayError::RateLimited { attempts: attempt },
                        GatewayError::Transport { message, .. } => GatewayError::Transport {
                            attempts: attempt,
                            message,
                        },
                        other => other,
                    })
                }
                Attempt::Retry(e) => {
                    let delay = self.retry.delay(attempt);
                    warn!(attempt, ?delay, error = %e, "retrying completion request");
                    thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Serves the given (status, body) responses in order, one per connection.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap();
                    }
                }
                let mut request = vec![0; length];
                reader.read_exact(&mut request).unwrap();
                bodies.push(String::from_utf8(request).unwrap());
                let mut stream = reader.into_inner();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
            bodies
        });
        (url, handle)
    }

    fn fast_retry() -> RetryPolicy {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    fn exchange() -> ChatExchange {
        ChatExchange {
            messages: vec![ChatMessage::user("hi")],
            n: 2,
            temperature: 1.0,
            model_name: "gpt-test".into(),
            max_output_tokens: 32,
        }
    }

    #[test]
    fn retries_rate_limits_then_succeeds() {
        let ok = r#"{"choices":[{"index":1,"message":{"content":"b"}},{"index":0,"message":{"content":"a"}}],"usage":{"prompt_tokens":5,"completion_tokens":2}}"#;
        let (url, server) = serve(vec![(429, "{}".into()), (200, ok.into())]);
        let backend = LiveBackend::new(&url, "k", Duration::from_secs(5), fast_retry()).unwrap();
        let completion = backend.complete(&exchange()).unwrap();
        assert_eq!(completion.texts, vec!["a", "b"]);
        let bodies = server.join().unwrap();
        let sent: serde_json::Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["n"], 2);
        assert_eq!(sent["max_tokens"], 32);
        assert_eq!(sent["model"], "gpt-test");
        assert_eq!(sent["messages"][0]["role"], "user");
    }

    #[test]
    fn auth_failure_is_fatal_without_retry() {
        let (url, server) = serve(vec![(401, "{}".into())]);
        let backend = LiveBackend::new(&url, "k", Duration::from_secs(5), fast_retry()).unwrap();
        let err = backend.complete(&exchange()).unwrap_err();
        assert!(matches!(err, GatewayError::Auth { status: 401 }));
        assert!(err.is_fatal());
        server.join().unwrap();
    }

    #[test]
    fn rate_limit_exhaustion_is_surfaced() {
        let (url, server) = serve(vec![(429, "{}".into()); 3]);
        let backend = LiveBackend::new(&url, "k", Duration::from_secs(5), fast_retry()).unwrap();
        let err = backend.complete(&exchange()).unwrap_err();
        assert!(matches!(err, GatewayError::RateLimited { attempts: 3 }));
        assert!(!err.is_fatal());
        server.join().unwrap();
    }

    #[test]
    fn empty_key_is_a_config_error() {
        assert!(matches!(
            LiveBackend::new(DEFAULT_BASE_URL, " ", Duration::from_secs(1), RetryPolicy::default()),
            Err(GatewayError::Config(_))
        ));
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(policy.delay(1), Duration::from_millis(100));
        assert_eq!(policy.delay(3), Duration::from_millis(400));
        assert_eq!(policy.delay(4), Duration::from_millis(500));
        assert_eq!(policy.delay(64), Duration::from_millis(500));
    }
}
