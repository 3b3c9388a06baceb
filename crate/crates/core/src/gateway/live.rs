//! OpenAI-compatible chat-completions provider.

use serde_json::{json, Value};

use super::{Provider, ProviderCall, ProviderConfig, ProviderError, ReasoningEffort, Role};

#[derive(Debug)]
pub struct LiveProvider {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
    model_name: String,
}

impl LiveProvider {
    /// Builds a provider from the config; the API key is read from
    /// `config.api_key_env` once, here.
    pub fn new(config: &ProviderConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.request_timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            endpoint: config
                .endpoint
                .clone()
                .unwrap_or_else(|| "https://api.openai.com/v1/chat/completions".into()),
            api_key: std::env::var(&config.api_key_env).ok(),
            model_name: config.model_name.clone(),
        }
    }

    fn body(call: &ProviderCall<'_>) -> Value {
        let messages: Vec<Value> = call
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        let effort = match call.config.reasoning_effort {
            ReasoningEffort::Minimal => "minimal",
            ReasoningEffort::Standard => "medium",
        };
        json!({
            "model": call.config.model_name,
            "messages": messages,
            "max_completion_tokens": call.config.max_output_tokens,
            "reasoning_effort": effort,
            "temperature": call.config.temperature,
            "response_format": { "type": "json_object" },
        })
    }
}

impl Provider for LiveProvider {
    fn label(&self) -> String {
        self.model_name.clone()
    }

    fn send(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request.send_json(Self::body(call)).map_err(|e| match e {
            ureq::Error::Timeout(_) => ProviderError::Timeout(call.config.request_timeout),
            other => ProviderError::Unreachable(other.to_string()),
        })?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| ProviderError::Unreachable(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(ProviderError::Rejected { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| ProviderError::Rejected {
            status,
            body: format!("unparseable completion envelope: {e}"),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| ProviderError::Rejected {
                status,
                body: "completion has no message content".into(),
            })
    }
}

#[cfg(test)]
mod tests {
    use std::time::Duration;

    use super::*;
    use crate::gateway::{ChainRequest, Message};
    use crate::model::Stage;

    #[test]
    fn unreachable_endpoint_is_reported() {
        let config = ProviderConfig {
            request_timeout: Duration::from_secs(5),
            ..ProviderConfig::live("http://127.0.0.1:9/v1/chat/completions", "m")
        };
        let provider = LiveProvider::new(&config);
        let request = ChainRequest {
            stage: Stage::Codes,
            system_prompt: String::new(),
            payload: json!({}),
            schema_id: "codes.v1".into(),
        };
        let messages = [Message::new(Role::User, "{}")];
        let call = ProviderCall {
            request: &request,
            messages: &messages,
            attempt: 1,
            digest: String::new(),
            config: &config,
        };
        let body = LiveProvider::body(&call);
        assert_eq!(body["response_format"]["type"], "json_object");
        assert!(matches!(
            provider.send(&call),
            Err(ProviderError::Unreachable(_) | ProviderError::Timeout(_))
        ));
    }
}
