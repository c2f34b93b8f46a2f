//! Vision-LLM backend.
//!
//! Requests go through the narrow [`Transport`] trait (prompt text plus image
//! files in, response text out). [`HttpTransport`] speaks the
//! chat-completions wire format; tests substitute a scripted transport.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::prompts::evaluation_prompt;
use super::{evaluate_with_retry, AbortError, EvalError, EvaluationRequest, Evaluator, Outcome};
use crate::dataset::BuildingRecord;
use crate::fitness::DataEstimate;
use crate::parsing::{parse_answer, RawAnswer};
use crate::schema::{canonical_key, render_cue_list, DataItem, Genotype};

pub const API_KEY_ENV: &str = "CUEVO_LLM_API_KEY";
pub const ENDPOINT_ENV: &str = "CUEVO_LLM_ENDPOINT";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1";
pub const DEFAULT_MODEL: &str = "gpt-4o";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    /// Credentials rejected or missing; never retried.
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("request failed: {0}")]
    Request(String),
    #[error("cannot attach image {path}: {message}")]
    Image { path: String, message: String },
}

/// One prompt with its attached images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LlmRequest {
    pub prompt: String,
    pub images: Vec<PathBuf>,
}

pub trait Transport: Send + Sync {
    fn send(&self, request: &LlmRequest) -> Result<String, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Arc<T> {
    fn send(&self, request: &LlmRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

impl<T: Transport + ?Sized> Transport for &T {
    fn send(&self, request: &LlmRequest) -> Result<String, TransportError> {
        (**self).send(request)
    }
}

#[derive(Debug, Clone)]
pub struct HttpTransportConfig {
    pub endpoint: String,
    pub api_key: String,
    pub model: String,
    /// Minimum spacing between request starts; zero disables the ceiling.
    pub min_interval: Duration,
    pub timeout: Duration,
}

impl HttpTransportConfig {
    /// Reads credentials and endpoint from the environment.
    pub fn from_env(model: Option<&str>) -> Result<Self, TransportError> {
        let api_key = std::env::var(API_KEY_ENV)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| TransportError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| DEFAULT_ENDPOINT.to_string());
        Ok(HttpTransportConfig {
            endpoint,
            api_key,
            model: model.unwrap_or(DEFAULT_MODEL).to_string(),
            min_interval: Duration::ZERO,
            timeout: Duration::from_secs(180),
        })
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage>,
}

#[derive(Serialize)]
struct ChatMessage {
    role: &'static str,
    content: Vec<ContentPart>,
}

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ContentPart {
    Text { text: String },
    ImageUrl { image_url: ImageUrl },
}

#[derive(Serialize)]
struct ImageUrl {
    url: String,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("webp") => "image/webp",
        Some("gif") => "image/gif",
        _ => "image/jpeg",
    }
}

/// Encodes an image file as a base64 data URL.
pub fn data_url(path: &Path) -> Result<String, TransportError> {
    let bytes = std::fs::read(path).map_err(|e| TransportError::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(format!(
        "data:{};base64,{}",
        mime_for(path),
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

/// Builds the chat-completions body for one request.
pub fn chat_body(model: &str, request: &LlmRequest) -> Result<serde_json::Value, TransportError> {
    let mut content = vec![ContentPart::Text {
        text: request.prompt.clone(),
    }];
    for path in &request.images {
        content.push(ContentPart::ImageUrl {
            image_url: ImageUrl { url: data_url(path)? },
        });
    }
    let body = ChatRequest {
        model,
        messages: vec![ChatMessage {
            role: "user",
            content,
        }],
    };
    Ok(serde_json::to_value(body).expect("request serialization is infallible"))
}

/// Chat-completions client over blocking HTTP.
pub struct HttpTransport {
    config: HttpTransportConfig,
    client: reqwest::blocking::Client,
    next_slot: Mutex<Instant>,
    requests: AtomicU64,
}

impl HttpTransport {
    pub fn new(config: HttpTransportConfig) -> Result<Self, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        Ok(HttpTransport {
            config,
            client,
            next_slot: Mutex::new(Instant::now()),
            requests: AtomicU64::new(0),
        })
    }

    /// Number of requests sent so far.
    pub fn request_count(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    fn wait_for_slot(&self) {
        if self.config.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut slot = self.next_slot.lock().expect("rate limiter poisoned");
            let now = Instant::now();
            let start = (*slot).max(now);
            *slot = start + self.config.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

impl Transport for HttpTransport {
    fn send(&self, request: &LlmRequest) -> Result<String, TransportError> {
        let body = chat_body(&self.config.model, request)?;
        self.wait_for_slot();
        self.requests.fetch_add(1, Ordering::Relaxed);
        let url = format!("{}/chat/completions", self.config.endpoint.trim_end_matches('/'));
        let response = self
            .client
            .post(url)
            .bearer_auth(&self.config.api_key)
            .json(&body)
            .send()
            .map_err(|e| TransportError::Request(e.to_string()))?;
        let status = response.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(TransportError::Auth(format!(
                "{status}; check {API_KEY_ENV} and {ENDPOINT_ENV}"
            )));
        }
        if !status.is_success() {
            let text = response.text().unwrap_or_default();
            return Err(TransportError::Request(format!("{status}: {text}")));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| TransportError::Request(format!("malformed response: {e}")))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| TransportError::Request("response has no message content".into()))
    }
}

/// Builds the request sent for one (genotype, building) evaluation.
pub fn evaluation_request(genotype: &Genotype, building: &BuildingRecord, item: DataItem) -> LlmRequest {
    LlmRequest {
        prompt: evaluation_prompt(item, &building.region, &render_cue_list(genotype)),
        images: building.images_for(item).to_vec(),
    }
}

/// Evaluator that asks a vision LLM for each estimate.
pub struct LlmEvaluator<T> {
    transport: T,
    current_year: i32,
}

impl<T: Transport> LlmEvaluator<T> {
    pub fn new(transport: T, current_year: i32) -> Self {
        LlmEvaluator {
            transport,
            current_year,
        }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }
}

impl<T: Transport> Evaluator for LlmEvaluator<T> {
    fn evaluate(&self, request: &EvaluationRequest<'_>) -> Result<DataEstimate, EvalError> {
        let llm_request = evaluation_request(request.genotype, request.building, request.data_item);
        let text = self.transport.send(&llm_request).map_err(|e| match e {
            TransportError::Auth(m) => EvalError::Fatal(format!("authentication failed: {m}")),
            TransportError::Image { .. } => EvalError::Fatal(e.to_string()),
            TransportError::Request(m) => EvalError::Transport(m),
        })?;
        let answer = RawAnswer {
            text,
            item: request.data_item,
        };
        Ok(parse_answer(&answer, self.current_year)?)
    }
}

/// One LLM estimate with the retry policy applied.
pub fn llm_evaluate<T: Transport>(
    evaluator: &LlmEvaluator<T>,
    genotype: &Genotype,
    building: &BuildingRecord,
    item: DataItem,
    retry_limit: u32,
) -> Result<Outcome, AbortError> {
    let key = canonical_key(genotype);
    let request = EvaluationRequest {
        genotype,
        key: &key,
        building,
        data_item: item,
        attempt: 0,
        eval_counter: 0,
    };
    evaluate_with_retry(evaluator, request, retry_limit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{GroundTruth, ImageSet};
    use crate::fitness::WindowClass;
    use std::collections::BTreeMap;

    struct Replay {
        responses: Mutex<Vec<Result<String, TransportError>>>,
        seen: Mutex<Vec<LlmRequest>>,
    }

    impl Replay {
        fn new(mut responses: Vec<Result<String, TransportError>>) -> Self {
            responses.reverse();
            Replay {
                responses: Mutex::new(responses),
                seen: Mutex::new(Vec::new()),
            }
        }
    }

    impl Transport for Replay {
        fn send(&self, request: &LlmRequest) -> Result<String, TransportError> {
            self.seen.lock().unwrap().push(request.clone());
            self.responses.lock().unwrap().pop().expect("script exhausted")
        }
    }

    fn building() -> BuildingRecord {
        let mut image_sets = BTreeMap::new();
        image_sets.insert(ImageSet::Windows, vec![PathBuf::from("w1.jpg"), PathBuf::from("w2.jpg")]);
        image_sets.insert(ImageSet::Building, vec![PathBuf::from("ext.jpg")]);
        BuildingRecord {
            id: "flat".into(),
            region: "UK".into(),
            image_sets,
            truth: GroundTruth::default(),
            split: None,
        }
    }

    #[test]
    fn well_formed_answer_is_parsed() {
        let t = Replay::new(vec![Ok("Frame: yes ... ### (2) double glazed ###".into())]);
        let ev = LlmEvaluator::new(t, 2026);
        let g = Genotype::from_labels(&[&["Window Frame Material"]]);
        let out = llm_evaluate(&ev, &g, &building(), DataItem::Windows, 2).unwrap();
        assert_eq!(
            out,
            Outcome::Estimate { estimate: DataEstimate::Windows(WindowClass::Double), attempts: 1 }
        );
        let seen = ev.transport().seen.lock().unwrap();
        assert_eq!(seen[0].images, vec![PathBuf::from("w1.jpg"), PathBuf::from("w2.jpg")]);
        assert!(seen[0].prompt.contains("following features: Window Frame Material\n"));
    }

    #[test]
    fn missing_delimiters_consume_a_retry_and_resend_the_prompt() {
        let t = Replay::new(vec![Ok("double glazed".into()), Ok("### single glazed ###".into())]);
        let ev = LlmEvaluator::new(t, 2026);
        let g = Genotype::from_labels(&[&["a"]]);
        let out = llm_evaluate(&ev, &g, &building(), DataItem::Windows, 2).unwrap();
        assert!(matches!(out, Outcome::Estimate { attempts: 2, .. }));
        let seen = ev.transport().seen.lock().unwrap();
        assert_eq!(seen.len(), 2);
        assert_eq!(seen[0], seen[1]);
    }

    #[test]
    fn auth_failure_aborts_without_retry() {
        let t = Replay::new(vec![Err(TransportError::Auth("401".into()))]);
        let ev = LlmEvaluator::new(t, 2026);
        let g = Genotype::from_labels(&[&["a"]]);
        let out = llm_evaluate(&ev, &g, &building(), DataItem::Windows, 5);
        assert!(matches!(out, Err(AbortError::Fatal { .. })));
        assert_eq!(ev.transport().seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn chat_body_inlines_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("a.png");
        std::fs::write(&img, [1u8, 2, 3]).unwrap();
        let body = chat_body("gpt-4o", &LlmRequest { prompt: "hi".into(), images: vec![img] }).unwrap();
        assert_eq!(body["model"], "gpt-4o");
        let content = &body["messages"][0]["content"];
        assert_eq!(content[0]["type"], "text");
        assert_eq!(content[0]["text"], "hi");
        assert_eq!(content[1]["type"], "image_url");
        assert_eq!(content[1]["image_url"]["url"], "data:image/png;base64,AQID");
        let missing = chat_body("m", &LlmRequest { prompt: "x".into(), images: vec!["/nope.jpg".into()] });
        assert!(matches!(missing, Err(TransportError::Image { .. })));
    }
}
