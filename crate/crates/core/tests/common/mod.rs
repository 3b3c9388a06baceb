#![allow(dead_code)]

use std::sync::Arc;

use qdachain::gateway::mock::{MockProvider, MockScript, ScriptedReply};
use qdachain::ids::QuestionId;
use qdachain::store::{MemoryStore, SessionStore};
use qdachain::{Engine, Gateway, ProviderConfig, ResearchQuestion, SourceDocument, SteppingClock};
use serde_json::Value;

pub fn engine_with(script: MockScript, store: Arc<dyn SessionStore>) -> Engine {
    let gateway = Gateway::new(ProviderConfig::mock(), Arc::new(MockProvider::new(script)));
    Engine::new(store, Arc::new(gateway), Arc::new(SteppingClock::default())).unwrap()
}

pub fn echo_engine() -> Engine {
    engine_with(MockScript::echo(), Arc::new(MemoryStore::default()))
}

pub fn scripted(replies: Vec<Value>) -> Engine {
    engine_with(
        MockScript::sequence(replies.into_iter().map(ScriptedReply::json)),
        Arc::new(MemoryStore::default()),
    )
}

pub fn doc(id: &str, body: &str) -> SourceDocument {
    SourceDocument::new(id, format!("{id} title"), body)
}

pub fn question(id: &str, text: &str) -> ResearchQuestion {
    ResearchQuestion {
        id: QuestionId::from(id),
        text: text.into(),
    }
}

pub const INTERVIEW_A: &str =
    "I moved to the city for work. The rent is far too high for what you get. \
Most of my friends share flats with strangers. We rarely cook together, but we talk every evening. \
Public transport is reliable, although the night buses are crowded.";

pub const INTERVIEW_B: &str =
    "Working from home changed my routine completely. I miss the small talk at the office. \
My manager checks in every morning by video. The quiet helps me focus on hard problems. \
Sometimes I walk to a cafe just to hear other people.";

pub fn interviews() -> Vec<SourceDocument> {
    vec![
        doc("interview-a", INTERVIEW_A),
        doc("interview-b", INTERVIEW_B),
    ]
}

/// Nudge reply labelling `n` units with prefix `p`, cycling through tiers.
pub fn nudge_reply(p: char, n: usize) -> Value {
    let tiers = ["most_confident", "less_confident", "ambiguous"];
    let critique: Vec<Value> = (0..n)
        .map(|i| serde_json::json!({"unit": format!("{p}{}", i + 1), "confidence": tiers[i % 3], "rationale": "fixture"}))
        .collect();
    serde_json::json!({"what_llm_did": "Grouped the input.", "self_critique": critique})
}
