//! Provider-agnostic access to a chat-completion model.
//!
//! Every response leaving this module has passed schema validation. Responses
//! that fail validation are re-requested with the violations appended, up to
//! `max_repair_attempts` provider calls in total.

pub mod echo;
pub mod live;
pub mod mock;
pub mod schema;

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::digest::sha256_hex;
use crate::model::Stage;

pub use self::live::LiveProvider;
pub use self::mock::{EchoConfig, MockFailure, MockProvider, MockScript, ScriptedReply};
pub use self::schema::{RegistryError, Schema, SchemaRegistry, Violation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Live,
    Mock,
}

impl ProviderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ProviderKind::Live => "live",
            ProviderKind::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasoningEffort {
    Minimal,
    Standard,
}

impl ReasoningEffort {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasoningEffort::Minimal => "minimal",
            ReasoningEffort::Standard => "standard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub provider_kind: ProviderKind,
    /// Chat-completions URL; ignored by the mock provider.
    pub endpoint: Option<String>,
    pub model_name: String,
    pub reasoning_effort: ReasoningEffort,
    pub max_output_tokens: u32,
    #[serde(with = "duration_secs")]
    pub request_timeout: Duration,
    /// Total provider calls allowed per request, first attempt included.
    pub max_repair_attempts: u32,
    pub temperature: f64,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
}

impl ProviderConfig {
    pub fn mock() -> Self {
        Self {
            provider_kind: ProviderKind::Mock,
            endpoint: None,
            model_name: "mock-echo".into(),
            reasoning_effort: ReasoningEffort::Minimal,
            max_output_tokens: 16_000,
            request_timeout: Duration::from_secs(600),
            max_repair_attempts: 3,
            temperature: 1.0,
            api_key_env: "OPENAI_API_KEY".into(),
        }
    }

    pub fn live(endpoint: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            provider_kind: ProviderKind::Live,
            endpoint: Some(endpoint.into()),
            model_name: model_name.into(),
            // Sized for 2,000–4,000-word documents.
            max_output_tokens: 32_000,
            ..Self::mock()
        }
    }
}

mod duration_secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        Duration::try_from_secs_f64(secs).map_err(serde::de::Error::custom)
    }
}

/// One structured request to the model on behalf of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRequest {
    pub stage: Stage,
    pub system_prompt: String,
    pub payload: Value,
    pub schema_id: String,
}

impl ChainRequest {
    /// The payload as sent to the model. `serde_json::Value` keeps object
    /// keys sorted, so this is byte-stable.
    pub fn user_message(&self) -> String {
        serde_json::to_string(&self.payload).expect("payload serializes")
    }

    pub fn digest(&self) -> String {
        digest_messages(&self.initial_messages())
    }

    pub fn initial_messages(&self) -> Vec<Message> {
        vec![
            Message::new(Role::System, self.system_prompt.clone()),
            Message::new(Role::User, self.user_message()),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

fn digest_messages(messages: &[Message]) -> String {
    sha256_hex(
        serde_json::to_string(messages)
            .expect("messages serialize")
            .as_bytes(),
    )
}

/// What a provider sees for one call.
pub struct ProviderCall<'a> {
    pub request: &'a ChainRequest,
    pub messages: &'a [Message],
    /// 1-based attempt number.
    pub attempt: u32,
    pub digest: String,
    pub config: &'a ProviderConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error, Serialize)]
pub enum ProviderError {
    #[error("provider unreachable: {0}")]
    Unreachable(String),
    #[error("provider timed out after {0:?}")]
    Timeout(Duration),
    #[error("provider rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("mock script has no response for call {0}")]
    ScriptExhausted(u64),
}

pub trait Provider: Send + Sync {
    /// Human-readable model label, used in the codebook disclaimer.
    fn label(&self) -> String;

    fn send(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError>;
}

/// One raw provider reply and what was wrong with it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawAttempt {
    pub raw_text: String,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum GatewayError {
    #[error("schema `{0}` is not registered")]
    UnknownSchema(String),
    #[error("schema `{0}` is already registered")]
    DuplicateSchema(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("response violated schema `{schema_id}` after {} attempt(s)", attempts.len())]
    SchemaViolation {
        schema_id: String,
        attempts: Vec<RawAttempt>,
    },
}

impl GatewayError {
    pub fn code(&self) -> &'static str {
        match self {
            GatewayError::UnknownSchema(_) => "unknown_schema",
            GatewayError::DuplicateSchema(_) => "duplicate_schema",
            GatewayError::Provider(ProviderError::Timeout(_)) => "provider_timeout",
            GatewayError::Provider(ProviderError::Rejected { .. }) => "provider_rejected",
            GatewayError::Provider(_) => "provider_unreachable",
            GatewayError::SchemaViolation { .. } => "schema_violation",
        }
    }
}

impl From<RegistryError> for GatewayError {
    fn from(e: RegistryError) -> Self {
        match e {
            RegistryError::Duplicate(id) => GatewayError::DuplicateSchema(id),
            RegistryError::Unknown(id) => GatewayError::UnknownSchema(id),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainResponse {
    pub raw_text: String,
    pub parsed: Value,
    pub attempts: u32,
    pub provider_latency: Duration,
    pub request_digest: String,
    pub response_digest: String,
    /// Every raw reply received, in order.
    pub raw_attempts: Vec<RawAttempt>,
}

pub struct Gateway {
    config: ProviderConfig,
    provider: Arc<dyn Provider>,
    schemas: SchemaRegistry,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("config", &self.config)
            .field("provider", &self.provider.label())
            .finish()
    }
}

impl Gateway {
    pub fn new(config: ProviderConfig, provider: Arc<dyn Provider>) -> Self {
        Self {
            config,
            provider,
            schemas: SchemaRegistry::new(),
        }
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn provider_label(&self) -> String {
        self.provider.label()
    }

    pub fn register_schema(&self, schema_id: &str, schema: Schema) -> Result<(), GatewayError> {
        Ok(self.schemas.register(schema_id, schema)?)
    }

    pub fn has_schema(&self, schema_id: &str) -> bool {
        self.schemas.contains(schema_id)
    }

    /// Validates a document against a registered schema.
    pub fn validate(&self, schema_id: &str, value: &Value) -> Result<Vec<Violation>, GatewayError> {
        Ok(self.schemas.validate(schema_id, value)?)
    }

    pub fn complete(&self, request: &ChainRequest) -> Result<ChainResponse, GatewayError> {
        if !self.schemas.contains(&request.schema_id) {
            return Err(GatewayError::UnknownSchema(request.schema_id.clone()));
        }
        let max_attempts = self.config.max_repair_attempts.max(1);
        let request_digest = request.digest();
        let mut messages = request.initial_messages();
        let mut raw_attempts = Vec::new();
        let mut latency = Duration::ZERO;

        for attempt in 1..=max_attempts {
            let call = ProviderCall {
                request,
                messages: &messages,
                attempt,
                digest: digest_messages(&messages),
                config: &self.config,
            };
            let started = Instant::now();
            let raw = self.provider.send(&call)?;
            latency += started.elapsed();

            let violations = match extract_json(&raw) {
                Ok(parsed) => {
                    let violations = self.schemas.validate(&request.schema_id, &parsed)?;
                    if violations.is_empty() {
                        raw_attempts.push(RawAttempt {
                            raw_text: raw.clone(),
                            violations: Vec::new(),
                        });
                        return Ok(ChainResponse {
                            response_digest: sha256_hex(raw.as_bytes()),
                            raw_text: raw,
                            parsed,
                            attempts: attempt,
                            provider_latency: latency,
                            request_digest,
                            raw_attempts,
                        });
                    }
                    violations.iter().map(ToString::to_string).collect()
                }
                Err(e) => vec![format!("response is not valid JSON: {e}")],
            };
            tracing::debug!(
                schema = %request.schema_id,
                attempt,
                violations = violations.len(),
                "model response rejected"
            );
            messages.push(Message::new(Role::Assistant, raw.clone()));
            messages.push(Message::new(Role::User, repair_instruction(&violations)));
            raw_attempts.push(RawAttempt {
                raw_text: raw,
                violations,
            });
        }
        Err(GatewayError::SchemaViolation {
            schema_id: request.schema_id.clone(),
            attempts: raw_attempts,
        })
    }
}

fn repair_instruction(violations: &[String]) -> String {
    let mut text =
        String::from("Your previous response does not match the required output format:\n");
    for v in violations {
        text.push_str("- ");
        text.push_str(v);
        text.push('\n');
    }
    text.push_str(
        "Reply again with only the corrected JSON document. Keep every chunk text exactly as it appears in the data.",
    );
    text
}

/// Parses the JSON document in a model reply, tolerating code fences and
/// surrounding prose.
pub fn extract_json(raw: &str) -> Result<Value, serde_json::Error> {
    let trimmed = raw.trim();
    let unfenced = trimmed
        .strip_prefix("```")
        .map(|rest| {
            let body = rest.split_once('\n').map_or("", |(_, b)| b);
            body.trim_end().trim_end_matches("```")
        })
        .unwrap_or(trimmed);
    match serde_json::from_str(unfenced) {
        Ok(v) => Ok(v),
        Err(first) => match (unfenced.find('{'), unfenced.rfind('}')) {
            (Some(start), Some(end)) if start < end => {
                serde_json::from_str(&unfenced[start..=end]).map_err(|_| first)
            }
            _ => Err(first),
        },
    }
}
