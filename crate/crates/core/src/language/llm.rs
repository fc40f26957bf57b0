use super::{rules, Confidence, DecompositionResult, DecompositionSource};
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    /// Four worked examples followed by the query caption.
    #[default]
    FewShotV1,
}

const SYSTEM_PROMPT: &str = "You split image captions that contain a negation. \
Reply with exactly three lines: POSITIVE: <what the caption affirms>, \
NEGATIVE: <the negated thing, rephrased affirmatively as \"a photo of ...\">, \
REVERSED: <NEGATIVE but not of the affirmed subject>. Use no other text.";

const FEW_SHOT: [(&str, &str, &str, &str); 4] = [
    (
        "a photo of a dog not on grass",
        "a photo of a dog",
        "a photo of grass",
        "a photo of grass but not of a dog",
    ),
    (
        "a photo of the cat but not of the bird",
        "a photo of the cat",
        "a photo of the bird",
        "a photo of the bird but not of the cat",
    ),
    (
        "a scene without a bus",
        "a scene",
        "a photo of a bus",
        "a photo of a bus but not of a scene",
    ),
    (
        "a photo of the tree with no car",
        "a photo of the tree",
        "a photo of the car",
        "a photo of the car but not of the tree",
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmClientConfig {
    /// Full URL of a chat-completion style endpoint.
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer token, if any.
    pub token_env: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after the first before falling back to the rules.
    pub retry_budget: u32,
    pub prompt_template: PromptTemplate,
    pub max_in_flight: usize,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            endpoint: "http://127.0.0.1:8080/v1/chat/completions".to_string(),
            model: "llama-3-8b-instruct".to_string(),
            token_env: Some("NEAT_LLM_TOKEN".to_string()),
            timeout: Duration::from_secs(30),
            retry_budget: 2,
            prompt_template: PromptTemplate::FewShotV1,
            max_in_flight: 4,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(NeatError::invalid("llm timeout must be positive"));
        }
        if self.max_in_flight == 0 {
            return Err(NeatError::invalid("max_in_flight must be at least 1"));
        }
        if self.endpoint.is_empty() {
            return Err(NeatError::invalid("llm endpoint is empty"));
        }
        Ok(())
    }
}

/// The user message sent for one caption.
pub fn build_prompt(template: PromptTemplate, caption: &str) -> String {
    match template {
        PromptTemplate::FewShotV1 => {
            let mut out = String::new();
            for (c, p, n, r) in FEW_SHOT {
                out.push_str(&format!(
                    "Caption: {c}\nPOSITIVE: {p}\nNEGATIVE: {n}\nREVERSED: {r}\n\n"
                ));
            }
            out.push_str(&format!("Caption: {caption}\n"));
            out
        }
    }
}

/// Parses a reply of `POSITIVE:` / `NEGATIVE:` lines with an optional
/// `REVERSED:` line. Anything else is rejected.
pub fn parse_reply(reply: &str) -> Result<DecompositionResult> {
    let mut fields: HashMap<&str, String> = HashMap::new();
    for line in reply.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| NeatError::Llm(format!("unparsable line {line:?}")))?;
        let key = match key.trim().to_ascii_uppercase().as_str() {
            "POSITIVE" => "positive",
            "NEGATIVE" => "negative",
            "REVERSED" => "reversed",
            other => return Err(NeatError::Llm(format!("unexpected field {other:?}"))),
        };
        let value = value.trim().to_lowercase();
        if value.is_empty() {
            return Err(NeatError::Llm(format!("empty {key} field")));
        }
        if fields.insert(key, value).is_some() {
            return Err(NeatError::Llm(format!("duplicate {key} field")));
        }
    }
    let positive = fields
        .remove("positive")
        .ok_or_else(|| NeatError::Llm("missing POSITIVE".into()))?;
    let negative = fields
        .remove("negative")
        .ok_or_else(|| NeatError::Llm("missing NEGATIVE".into()))?;
    for part in [&positive, &negative] {
        if part
            .split_whitespace()
            .any(|w| matches!(w, "not" | "no" | "without"))
        {
            return Err(NeatError::Llm(format!(
                "part {part:?} still contains a negation cue"
            )));
        }
    }
    let reversed = fields
        .remove("reversed")
        .unwrap_or_else(|| rules::reversed_from_parts(&positive, &negative));
    Ok(DecompositionResult {
        positive_part: positive,
        negative_part: negative,
        reversed,
        source: DecompositionSource::Llm,
        confidence: Confidence::Heuristic,
        fallback_reason: None,
    })
}

/// Remote decomposer with a per-run cache and a rule-engine fallback.
pub struct LlmDecomposer {
    config: LlmClientConfig,
    agent: ureq::Agent,
    /// `None` marks a caption on which both the remote model and the rules failed.
    cache: Mutex<HashMap<String, Option<DecompositionResult>>>,
    requests: AtomicUsize,
}

impl LlmDecomposer {
    pub fn new(config: LlmClientConfig) -> Result<Self> {
        config.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(LlmDecomposer {
            config,
            agent,
            cache: Mutex::new(HashMap::new()),
            requests: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.config
    }

    /// Number of HTTP requests issued so far.
    pub fn requests_sent(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn decompose(&self, caption: &str) -> Result<DecompositionResult> {
        if caption.trim().is_empty() {
            return Err(NeatError::invalid("caption is empty"));
        }
        if let Some(hit) = self.cache.lock().expect("cache poisoned").get(caption) {
            // the rules are pure, so a cached failure is reproduced without a request
            return hit.clone().map_or_else(|| rules::decompose(caption), Ok);
        }
        let mut last_err = String::new();
        let mut result = None;
        for attempt in 0..=self.config.retry_budget {
            match self.query(caption) {
                Ok(r) => {
                    result = Some(r);
                    break;
                }
                Err(e) => {
                    log::warn!("llm attempt {} for {caption:?} failed: {e}", attempt + 1);
                    last_err = e.to_string();
                }
            }
        }
        let result = match result {
            Some(r) => Ok(r),
            None => rules::decompose(caption).map(|mut r| {
                r.fallback_reason = Some(format!(
                    "{} attempt(s) failed, last error: {last_err}",
                    self.config.retry_budget + 1
                ));
                r
            }),
        };
        self.cache
            .lock()
            .expect("cache poisoned")
            .insert(caption.to_string(), result.as_ref().ok().cloned());
        result
    }

    /// Decomposes many captions with at most `max_in_flight` concurrent
    /// requests. Repeated captions are queried once.
    pub fn decompose_all(&self, captions: &[String]) -> Vec<Result<DecompositionResult>> {
        let mut unique: Vec<&str> = captions.iter().map(String::as_str).collect();
        unique.sort_unstable();
        unique.dedup();
        let next = AtomicUsize::new(0);
        let workers = self.config.max_in_flight.min(unique.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(c) = unique.get(i) else { break };
                    // results land in the cache and are collected below
                    let _ = self.decompose(c);
                });
            }
        });
        captions.iter().map(|c| self.decompose(c)).collect()
    }

    fn query(&self, caption: &str) -> Result<DecompositionResult> {
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": build_prompt(self.config.prompt_template, caption)},
            ],
        });
        let token = self
            .config
            .token_env
            .as_deref()
            .and_then(|name| std::env::var(name).ok());
        log::debug!(
            "POST {} authorization={} body={body}",
            self.config.endpoint,
            if token.is_some() {
                "Bearer <redacted>"
            } else {
                "none"
            }
        );
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(t) = &token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        self.requests.fetch_add(1, Ordering::SeqCst);
        let mut resp = req
            .send_json(&body)
            .map_err(|e| NeatError::Llm(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| NeatError::Llm(e.to_string()))?;
        log::debug!("response {status}: {text}");
        if !status.is_success() {
            return Err(NeatError::Llm(format!("http status {status}")));
        }
        let value: Value =
            serde_json::from_str(&text).map_err(|e| NeatError::Llm(format!("bad json: {e}")))?;
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| NeatError::Llm("reply has no message content".into()))?;
        parse_reply(content)
    }
}
