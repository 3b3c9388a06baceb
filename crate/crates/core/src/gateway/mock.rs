//! Deterministic offline provider.
//!
//! A script maps request digests or call ordinals to canned replies. Calls
//! not covered by the script fall through to the echo generator when one is
//! configured, which answers every built-in stage schema from the request
//! payload alone.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{echo, Provider, ProviderCall, ProviderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    Unreachable,
    Timeout,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScriptedReply {
    /// Raw reply text, sent as-is.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Structured reply, serialized compactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub json: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail: Option<MockFailure>,
    #[serde(default)]
    pub delay_ms: u64,
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: Some(text.into()),
            ..Self::default()
        }
    }

    pub fn json(value: Value) -> Self {
        Self {
            json: Some(value),
            ..Self::default()
        }
    }

    pub fn fail(kind: MockFailure) -> Self {
        Self {
            fail: Some(kind),
            ..Self::default()
        }
    }

    pub fn delayed(mut self, delay: Duration) -> Self {
        self.delay_ms = delay.as_millis() as u64;
        self
    }
}

/// Settings for the echo generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EchoConfig {
    /// Fraction of each document's whitespace-delimited tokens, from the
    /// start, that the generated codes cover.
    #[serde(default = "one")]
    pub keep_fraction: f64,
    #[serde(default)]
    pub delay_ms: u64,
}

fn one() -> f64 {
    1.0
}

impl Default for EchoConfig {
    fn default() -> Self {
        Self {
            keep_fraction: 1.0,
            delay_ms: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    /// Replies by call ordinal: the n-th provider call (0-based) gets `responses[n]`.
    #[serde(default)]
    pub responses: Vec<ScriptedReply>,
    /// Replies keyed by the digest of the call's messages; checked first.
    #[serde(default)]
    pub by_digest: BTreeMap<String, ScriptedReply>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<EchoConfig>,
}

impl MockScript {
    pub fn sequence(replies: impl IntoIterator<Item = ScriptedReply>) -> Self {
        Self {
            responses: replies.into_iter().collect(),
            ..Self::default()
        }
    }

    /// Script that answers everything with verbatim echo output.
    pub fn echo() -> Self {
        Self::echo_with(EchoConfig::default())
    }

    pub fn echo_with(config: EchoConfig) -> Self {
        Self {
            fallback: Some(config),
            ..Self::default()
        }
    }

    pub fn with_fallback(mut self, config: EchoConfig) -> Self {
        self.fallback = Some(config);
        self
    }

    pub fn load(path: &Path) -> Result<Self, MockScriptError> {
        let text = std::fs::read_to_string(path).map_err(|source| MockScriptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| MockScriptError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MockScriptError {
    #[error("cannot read mock script {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid mock script {path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug)]
pub struct MockProvider {
    script: MockScript,
    calls: Mutex<u64>,
    seen: Mutex<Vec<String>>,
}

impl MockProvider {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            calls: Mutex::new(0),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn echo() -> Self {
        Self::new(MockScript::echo())
    }

    /// Number of calls served so far.
    pub fn calls(&self) -> u64 {
        *self.calls.lock().expect("mock poisoned")
    }

    /// Digests of every call received, in order.
    pub fn seen_digests(&self) -> Vec<String> {
        self.seen.lock().expect("mock poisoned").clone()
    }

    fn wait(delay_ms: u64, timeout: Duration) -> Result<(), ProviderError> {
        let delay = Duration::from_millis(delay_ms);
        if delay > timeout {
            thread::sleep(timeout);
            return Err(ProviderError::Timeout(timeout));
        }
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        Ok(())
    }
}

impl Provider for MockProvider {
    fn label(&self) -> String {
        self.script
            .label
            .clone()
            .unwrap_or_else(|| "a mock language model".into())
    }

    fn send(&self, call: &ProviderCall<'_>) -> Result<String, ProviderError> {
        let ordinal = {
            let mut calls = self.calls.lock().expect("mock poisoned");
            let n = *calls;
            *calls += 1;
            n
        };
        self.seen
            .lock()
            .expect("mock poisoned")
            .push(call.digest.clone());
        let timeout = call.config.request_timeout;

        let scripted = self
            .script
            .by_digest
            .get(&call.digest)
            .or_else(|| self.script.responses.get(ordinal as usize));
        if let Some(reply) = scripted {
            Self::wait(reply.delay_ms, timeout)?;
            return match (&reply.fail, &reply.text, &reply.json) {
                (Some(MockFailure::Unreachable), _, _) => Err(ProviderError::Unreachable(format!(
                    "scripted failure at call {ordinal}"
                ))),
                (Some(MockFailure::Timeout), _, _) => Err(ProviderError::Timeout(timeout)),
                (None, Some(text), _) => Ok(text.clone()),
                (None, None, Some(json)) => {
                    Ok(serde_json::to_string(json).expect("json serializes"))
                }
                (None, None, None) => Ok(String::new()),
            };
        }
        match &self.script.fallback {
            Some(echo_config) => {
                Self::wait(echo_config.delay_ms, timeout)?;
                let value = echo::respond(call.request, echo_config);
                Ok(serde_json::to_string(&value).expect("json serializes"))
            }
            None => Err(ProviderError::ScriptExhausted(ordinal)),
        }
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::gateway::{ChainRequest, Message, ProviderConfig, Role};
    use crate::model::Stage;

    fn call_with<'a>(
        request: &'a ChainRequest,
        messages: &'a [Message],
        config: &'a ProviderConfig,
        digest: &str,
    ) -> ProviderCall<'a> {
        ProviderCall {
            request,
            messages,
            attempt: 1,
            digest: digest.to_owned(),
            config,
        }
    }

    fn request() -> ChainRequest {
        ChainRequest {
            stage: Stage::Codes,
            system_prompt: String::new(),
            payload: json!({}),
            schema_id: "x".into(),
        }
    }

    #[test]
    fn digest_entries_win_over_ordinals() {
        let mut script = MockScript::sequence([ScriptedReply::text("by ordinal")]);
        script
            .by_digest
            .insert("abc".into(), ScriptedReply::text("by digest"));
        let mock = MockProvider::new(script);
        let config = ProviderConfig::mock();
        let req = request();
        let msgs = [Message::new(Role::User, "")];
        assert_eq!(
            mock.send(&call_with(&req, &msgs, &config, "abc")).unwrap(),
            "by digest"
        );
        // Ordinal 1 has no entry and there is no fallback.
        assert_eq!(
            mock.send(&call_with(&req, &msgs, &config, "zzz")),
            Err(ProviderError::ScriptExhausted(1))
        );
        assert_eq!(mock.seen_digests(), ["abc", "zzz"]);
    }

    #[test]
    fn delays_beyond_the_timeout_time_out() {
        let mock = MockProvider::new(MockScript::sequence([
            ScriptedReply::text("late").delayed(Duration::from_millis(50))
        ]));
        let config = ProviderConfig {
            request_timeout: Duration::from_millis(5),
            ..ProviderConfig::mock()
        };
        let req = request();
        let msgs = [];
        assert!(matches!(
            mock.send(&call_with(&req, &msgs, &config, "d")),
            Err(ProviderError::Timeout(_))
        ));
    }

    #[test]
    fn scripts_parse_from_json() {
        let script: MockScript = serde_json::from_str(
            r#"{"responses": [{"json": {"codes": []}}, {"fail": "timeout", "delay_ms": 10}],
                "fallback": {"keep_fraction": 0.5}}"#,
        )
        .unwrap();
        assert_eq!(script.responses.len(), 2);
        assert_eq!(script.responses[1].fail, Some(MockFailure::Timeout));
        assert_eq!(script.fallback.unwrap().keep_fraction, 0.5);
    }
}
