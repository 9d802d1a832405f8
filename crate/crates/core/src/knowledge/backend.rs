//! LLM backends behind a common trait, selected by name at runtime.
//!
//! `mock` is a deterministic rule-based extractor over the synthetic corpus
//! grammar so the entire pipeline runs offline; `http` talks to any
//! OpenAI-compatible chat-completions endpoint.

use crate::corpus::Action;
use crate::error::{Error, Result};
use crate::knowledge::parse_triplet_line;
use serde_json::{json, Value};
use std::time::Duration;

/// Which pipeline step issued a request. HTTP backends ignore this; the
/// rule-based mock uses it to pick its extraction mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RequestKind {
    Triplets,
    States,
}

/// A fully rendered chat request: system text, worked examples as
/// user/assistant turns, and the final user message.
#[derive(Clone, Debug)]
pub struct ChatRequest {
    pub kind: RequestKind,
    pub system: String,
    pub examples: Vec<(String, String)>,
    pub user: String,
    pub temperature: f64,
}

pub trait LlmBackend: Send + Sync {
    /// Stable identity string mixed into cache keys; changing the backend
    /// (or its model/endpoint) must invalidate cached responses.
    fn identity(&self) -> String;

    fn complete(&self, request: &ChatRequest) -> Result<String>;
}

/// Names accepted by [`create_backend`].
pub fn registered_backends() -> &'static [&'static str] {
    &["mock", "http"]
}

/// Instantiate a backend by registry name.
pub fn create_backend(
    kind: &str,
    url: Option<&str>,
    model: Option<&str>,
    api_key: Option<&str>,
) -> Result<Box<dyn LlmBackend>> {
    match kind {
        "mock" => Ok(Box::new(MockBackend)),
        "http" => {
            let url = url.ok_or_else(|| {
                Error::Config("http backend needs an endpoint URL (APK_LLM_URL)".into())
            })?;
            Ok(Box::new(HttpBackend::new(
                url,
                model.unwrap_or("gpt-3.5-turbo"),
                api_key,
            )))
        }
        other => Err(Error::Config(format!(
            "unknown LLM backend {other:?}; registered: {}",
            registered_backends().join(", ")
        ))),
    }
}

/// Rule-based subject-verb-object extractor over the corpus grammar
/// `a <adj> <noun> <verb>s a <adj> <noun>`, plus a fixed state-sentence
/// template. Pure and deterministic.
pub struct MockBackend;

impl MockBackend {
    /// A state request carries a rendered triplet in its user message.
    fn embedded_triplet(user: &str) -> Option<crate::knowledge::ActionTriplet> {
        let start = user.find('<')?;
        let end = user[start..].find('>')? + start;
        parse_triplet_line(&user[start..=end])
    }

    fn extract_triplet_line(user: &str) -> String {
        let words: Vec<String> = user
            .split_whitespace()
            .map(|w| {
                w.trim_matches(|c: char| !c.is_alphanumeric())
                    .to_lowercase()
            })
            .filter(|w| !w.is_empty())
            .collect();
        let verb_pos = words
            .iter()
            .position(|w| Action::from_conjugated(w).is_some());
        match verb_pos {
            Some(pos) if pos >= 1 && pos + 1 < words.len() => {
                let action = Action::from_conjugated(&words[pos]).unwrap();
                let subject = &words[pos - 1];
                let object = words.last().unwrap();
                format!("<{}, {}, {}>", subject, action.base(), object)
            }
            _ => "none".to_string(),
        }
    }
}

impl LlmBackend for MockBackend {
    fn identity(&self) -> String {
        "mock".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        match request.kind {
            RequestKind::States => match Self::embedded_triplet(&request.user) {
                Some(t) => Ok(format!(
                    "the {} is {}ing the {}, changing its state",
                    t.subject(),
                    t.action(),
                    t.object()
                )),
                None => Ok(String::new()),
            },
            RequestKind::Triplets => Ok(Self::extract_triplet_line(&request.user)),
        }
    }
}

/// OpenAI-compatible chat-completions client with bounded retries.
pub struct HttpBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    attempts: usize,
}

impl HttpBackend {
    pub fn new(url: &str, model: &str, api_key: Option<&str>) -> Self {
        HttpBackend {
            url: url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key: api_key.map(str::to_string),
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("http client"),
            attempts: 3,
        }
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let mut messages = vec![json!({"role": "system", "content": request.system})];
        for (input, output) in &request.examples {
            messages.push(json!({"role": "user", "content": input}));
            messages.push(json!({"role": "assistant", "content": output}));
        }
        messages.push(json!({"role": "user", "content": request.user}));
        json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
        })
    }
}

impl LlmBackend for HttpBackend {
    fn identity(&self) -> String {
        format!("http:{}:{}", self.url, self.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String> {
        let body = self.body(request);
        let mut last_err = String::new();
        for attempt in 0..self.attempts {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(250 << attempt));
            }
            let mut req = self.client.post(&self.url).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            match req.send().and_then(|r| r.error_for_status()) {
                Ok(resp) => {
                    let value: Value = resp.json().map_err(|e| Error::Backend {
                        caption_id: None,
                        message: format!("malformed response body: {e}"),
                    })?;
                    let content = value["choices"][0]["message"]["content"]
                        .as_str()
                        .ok_or_else(|| Error::Backend {
                            caption_id: None,
                            message: "response missing choices[0].message.content".into(),
                        })?;
                    return Ok(content.to_string());
                }
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Backend {
            caption_id: None,
            message: format!("{} failed after {} attempts: {last_err}", self.url, self.attempts),
        })
    }
}
