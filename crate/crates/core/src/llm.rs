//! Prompted-LLM baseline: prompt rendering, an OpenAI-compatible chat client
//! and lenient reply parsing.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{build_target, parse_output, CodecError, ParsedOutput, Record};
use crate::schema::{Element, Polarity, SchemaConfig, Task};

pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_API_KEY_VAR: &str = "OPENAI_API_KEY";
pub const COMPLETIONS_PATH: &str = "/v1/chat/completions";

/// Lines mentioning `{categories}` are dropped for tasks without a category
/// element, and lines mentioning `{polarities}` for tasks without polarity.
/// Other placeholders: `{elements}`, `{format}`, `{separator}`, `{null}`.
pub const DEFAULT_INSTRUCTION: &str = "\
Extract all sentiment tuples from the sentence below. Each tuple consists of {elements}.
Aspect terms are copied from the sentence; use \"{null}\" when the aspect is implicit.
The aspect category must be one of: {categories}.
The sentiment polarity must be one of: {polarities}.
Write each tuple as {format} and join multiple tuples with \" {separator} \".
Answer with the tuples only.";

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("requested {wanted} demonstrations for `{language}` but only {available} training records exist")]
    TooFewDemonstrations {
        language: String,
        wanted: usize,
        available: usize,
    },
    #[error("demonstration `{id}`: {source}")]
    Demonstration { id: String, source: CodecError },
    #[error("cannot read template {path}: {message}")]
    Template { path: String, message: String },
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("gave up after {attempts} attempts (last HTTP {last_status})")]
    RetriesExhausted { attempts: u32, last_status: u16 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("transport: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub instruction: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            instruction: DEFAULT_INSTRUCTION.to_string(),
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self, LlmError> {
        let instruction = std::fs::read_to_string(path).map_err(|e| LlmError::Template {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(PromptTemplate {
            instruction: instruction.trim_end().to_string(),
        })
    }

    pub fn render(&self, task: Task, cfg: &SchemaConfig) -> String {
        let names: Vec<&str> = task
            .elements()
            .iter()
            .map(|e| match e {
                Element::Aspect => "an aspect term",
                Element::Category => "an aspect category",
                Element::Polarity => "a sentiment polarity",
            })
            .collect();
        let elements = match names.as_slice() {
            [a, b] => format!("{a} and {b}"),
            [a, b, c] => format!("{a}, {b} and {c}"),
            other => other.join(", "),
        };
        let format = task
            .elements()
            .iter()
            .map(|&e| {
                let slot = match e {
                    Element::Aspect => "<aspect>",
                    Element::Category => "<category>",
                    Element::Polarity => "<polarity>",
                };
                format!("{} {slot}", cfg.marker(e))
            })
            .collect::<Vec<_>>()
            .join(" ");
        let categories = cfg
            .categories()
            .iter()
            .map(|c| c.phrase())
            .collect::<Vec<_>>()
            .join(", ");
        let polarities = [Polarity::Positive, Polarity::Negative, Polarity::Neutral]
            .iter()
            .map(|&p| format!("{} ({})", cfg.polarity_phrase(p), p.label()))
            .collect::<Vec<_>>()
            .join(", ");
        self.instruction
            .lines()
            .filter(|l| task.has(Element::Category) || !l.contains("{categories}"))
            .filter(|l| task.has(Element::Polarity) || !l.contains("{polarities}"))
            .map(|l| {
                l.replace("{elements}", &elements)
                    .replace("{format}", &format)
                    .replace("{separator}", cfg.separator())
                    .replace("{null}", cfg.null_phrase())
                    .replace("{categories}", &categories)
                    .replace("{polarities}", &polarities)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSpec {
    pub task: Task,
    pub language: String,
    pub demonstrations: Vec<Record>,
}

impl PromptSpec {
    pub fn zero_shot(task: Task, language: &str) -> Self {
        PromptSpec {
            task,
            language: language.to_string(),
            demonstrations: Vec::new(),
        }
    }

    /// The first `k` training records tagged with `language`, in file order.
    pub fn few_shot(task: Task, language: &str, train: &[Record], k: usize) -> Result<Self, LlmError> {
        let demos: Vec<Record> = train
            .iter()
            .filter(|r| r.language == language)
            .take(k)
            .cloned()
            .collect();
        if demos.len() < k {
            return Err(LlmError::TooFewDemonstrations {
                language: language.to_string(),
                wanted: k,
                available: demos.len(),
            });
        }
        Ok(PromptSpec {
            task,
            language: language.to_string(),
            demonstrations: demos,
        })
    }

    pub fn shot_count(&self) -> usize {
        self.demonstrations.len()
    }
}

/// Instruction, then one `Sentence:`/`Output:` pair per demonstration, then
/// the query with an empty `Output:`.
pub fn build_prompt(
    spec: &PromptSpec,
    sentence: &str,
    cfg: &SchemaConfig,
    template: &PromptTemplate,
) -> Result<String, LlmError> {
    let mut parts = vec![template.render(spec.task, cfg)];
    for d in &spec.demonstrations {
        let target = build_target(&d.tuples, spec.task, cfg).map_err(|source| LlmError::Demonstration {
            id: d.id.clone(),
            source,
        })?;
        parts.push(format!("Sentence: {}\nOutput: {}", d.text, target.rendered));
    }
    parts.push(format!("Sentence: {sentence}\nOutput:"));
    Ok(parts.join("\n\n"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn user(model: &str, prompt: String) -> Self {
        ChatRequest {
            model: model.to_string(),
            messages: vec![ChatMessage {
                role: "user".into(),
                content: prompt,
            }],
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    #[serde(default)]
    pub prompt_tokens: u64,
    #[serde(default)]
    pub completion_tokens: u64,
    #[serde(default)]
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub attempts: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
}

#[derive(Deserialize)]
struct WireMessage {
    content: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): `base * 2^(attempt-1)`, capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

fn retryable(status: u16) -> bool {
    status == 429 || (500..600).contains(&status)
}

pub struct LlmClient {
    agent: ureq::Agent,
    endpoint: String,
    api_key: String,
    pub retry: RetryPolicy,
}

impl LlmClient {
    /// `endpoint` is the base URL, e.g. `https://api.openai.com`.
    pub fn new(endpoint: &str, api_key: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        LlmClient {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            api_key: api_key.to_string(),
            retry: RetryPolicy::default(),
        }
    }

    pub fn from_env(endpoint: &str, var: &str, timeout: Duration) -> Result<Self, LlmError> {
        let key = std::env::var(var).map_err(|_| LlmError::MissingCredential(var.to_string()))?;
        Ok(Self::new(endpoint, &key, timeout))
    }

    pub fn url(&self) -> String {
        format!("{}{}", self.endpoint, COMPLETIONS_PATH)
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let body = serde_json::to_string(req).expect("request serializes");
        let url = self.url();
        let mut attempt = 0;
        loop {
            attempt += 1;
            let result = self
                .agent
                .post(&url)
                .header("Authorization", &format!("Bearer {}", self.api_key))
                .header("Content-Type", "application/json")
                .send(&body);
            let mut resp = match result {
                Ok(r) => r,
                Err(ureq::Error::Timeout(_)) => return Err(LlmError::Timeout),
                Err(e) => return Err(LlmError::Transport(e.to_string())),
            };
            let status = resp.status().as_u16();
            let text = match resp.body_mut().read_to_string() {
                Ok(t) => t,
                Err(ureq::Error::Timeout(_)) => return Err(LlmError::Timeout),
                Err(e) => return Err(LlmError::Transport(e.to_string())),
            };
            match status {
                200..=299 => return parse_wire(&text, attempt),
                401 | 403 => return Err(LlmError::Auth(status)),
                s if retryable(s) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::RetriesExhausted {
                            attempts: attempt,
                            last_status: s,
                        });
                    }
                    log::warn!("HTTP {s} from {url}, retrying (attempt {attempt})");
                    std::thread::sleep(self.retry.delay(attempt));
                }
                s => return Err(LlmError::Http { status: s, body: text }),
            }
        }
    }

    /// Runs requests with at most `max_in_flight` outstanding; results keep
    /// the input order.
    pub fn complete_many(&self, reqs: &[ChatRequest], max_in_flight: usize) -> Vec<Result<ChatResponse, LlmError>> {
        let next = AtomicUsize::new(0);
        let slots: Vec<Mutex<Option<Result<ChatResponse, LlmError>>>> = reqs.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..max_in_flight.clamp(1, reqs.len().max(1)) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= reqs.len() {
                        break;
                    }
                    let r = self.complete(&reqs[i]);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    }
}

fn parse_wire(text: &str, attempts: u32) -> Result<ChatResponse, LlmError> {
    let wire: WireResponse = serde_json::from_str(text).map_err(|e| LlmError::MalformedResponse(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| LlmError::MalformedResponse("no choices".into()))?;
    Ok(ChatResponse {
        text: choice.message.content.unwrap_or_default(),
        usage: wire.usage,
        attempts,
    })
}

/// Drops code fences and prose lines, cuts anything before the first marker
/// on each remaining line, and joins lines with the separator.
pub fn clean_reply(text: &str, task: Task, cfg: &SchemaConfig) -> String {
    let markers: Vec<&str> = task.elements().iter().map(|&e| cfg.marker(e)).collect();
    let kept: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with("```"))
        .filter_map(|l| {
            let at = markers.iter().filter_map(|m| l.find(m)).min()?;
            Some(l[at..].trim_end_matches(['.', ' ']))
        })
        .filter(|l| !l.is_empty())
        .collect();
    if kept.is_empty() {
        return text.trim().to_string();
    }
    kept.join(&format!(" {} ", cfg.separator()))
}

pub fn parse_reply(text: &str, task: Task, cfg: &SchemaConfig) -> ParsedOutput {
    parse_output(&clean_reply(text, task, cfg), task, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::SentimentTuple;

    fn rec(id: &str, lang: &str, text: &str, tuples: Vec<SentimentTuple>) -> Record {
        Record {
            id: id.into(),
            text: text.into(),
            language: lang.into(),
            tuples,
        }
    }

    fn soup() -> SentimentTuple {
        SentimentTuple::triplet("soup", "FOOD#QUALITY", Polarity::Positive).unwrap()
    }

    #[test]
    fn zero_shot_layout() {
        let cfg = SchemaConfig::restaurants();
        let p = build_prompt(&PromptSpec::zero_shot(Task::Tasd, "en"), "Nice soup", &cfg, &PromptTemplate::default()).unwrap();
        assert!(p.ends_with("\n\nSentence: Nice soup\nOutput:"));
        assert_eq!(p.matches("Sentence:").count(), 1);
        assert!(p.contains("[A] <aspect> [C] <category> [P] <polarity>"));
        assert!(p.contains("food quality"));
        assert!(p.contains("great (positive)"));
    }

    #[test]
    fn acte_and_e2e_omit_elements() {
        let cfg = SchemaConfig::restaurants();
        let train = vec![rec("1", "en", "tasty soup", vec![soup()])];
        let spec = PromptSpec::few_shot(Task::Acte, "en", &train, 1).unwrap();
        let p = build_prompt(&spec, "q", &cfg, &PromptTemplate::default()).unwrap();
        assert!(!p.contains("polarity"));
        assert!(!p.contains("[P]"));
        assert!(p.contains("Output: [A] soup [C] food quality\n"));

        let spec = PromptSpec::few_shot(Task::E2eAbsa, "en", &train, 1).unwrap();
        let p = build_prompt(&spec, "q", &cfg, &PromptTemplate::default()).unwrap();
        assert!(!p.contains("category"));
        assert!(p.contains("Output: [A] soup [P] great\n"));
    }

    #[test]
    fn few_shot_takes_language_head() {
        let mut train: Vec<Record> = (0..15).map(|i| rec(&format!("en{i}"), "en", "x", vec![soup()])).collect();
        train.extend((0..12).map(|i| rec(&format!("es{i}"), "es", &format!("sopa {i}"), vec![soup()])));
        let spec = PromptSpec::few_shot(Task::Tasd, "es", &train, 10).unwrap();
        assert_eq!(spec.shot_count(), 10);
        let ids: Vec<_> = spec.demonstrations.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, (0..10).map(|i| format!("es{i}")).collect::<Vec<_>>());
        assert!(matches!(
            PromptSpec::few_shot(Task::Tasd, "es", &train, 13),
            Err(LlmError::TooFewDemonstrations { available: 12, .. })
        ));
    }

    #[test]
    fn zero_shot_is_prefix_of_few_shot() {
        let cfg = SchemaConfig::restaurants();
        let t = PromptTemplate::default();
        let train = vec![rec("1", "en", "tasty soup", vec![soup()])];
        let zero = build_prompt(&PromptSpec::zero_shot(Task::Tasd, "en"), "q", &cfg, &t).unwrap();
        let few = build_prompt(&PromptSpec::few_shot(Task::Tasd, "en", &train, 1).unwrap(), "q", &cfg, &t).unwrap();
        let instruction = zero.split("\n\nSentence:").next().unwrap();
        assert!(few.starts_with(instruction));
    }

    #[test]
    fn wire_shape() {
        let req = ChatRequest::user("m", "hi".into());
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"model":"m","messages":[{"role":"user","content":"hi"}],"temperature":0.0}"#
        );
    }

    #[test]
    fn reply_leniency() {
        let cfg = SchemaConfig::restaurants();
        let exact = parse_reply("[A] soup [C] food quality [P] great", Task::Tasd, &cfg);
        assert_eq!(exact.tuples.len(), 1);
        assert!(exact.diagnostics.is_empty());
        let fenced = parse_reply(
            "Here you go:\n```\nOutput: [A] soup [C] food quality [P] great.\n```\nHope this helps!",
            Task::Tasd,
            &cfg,
        );
        assert_eq!(fenced.tuples, exact.tuples);
        assert!(fenced.diagnostics.is_empty(), "{:?}", fenced.diagnostics);
        let two = parse_reply(
            "[A] soup [C] food quality [P] great\n[A] it [C] service general [P] bad",
            Task::Tasd,
            &cfg,
        );
        assert_eq!(two.tuples.len(), 2);
        let refusal = parse_reply("I cannot help with that.", Task::Tasd, &cfg);
        assert!(refusal.tuples.is_empty());
        assert!(!refusal.diagnostics.is_empty());
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        let d: Vec<u128> = (1..=5).map(|a| p.delay(a).as_millis()).collect();
        assert_eq!(d, vec![100, 200, 400, 500, 500]);
    }
}
