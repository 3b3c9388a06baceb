//! Long-running chain operations, polled by id.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tokio::task::JoinSet;

use crate::api_error::ApiError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum OpStatus {
    Pending,
    Done { result_ref: Value },
    Failed { error: ApiError },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub op_id: String,
    pub session_id: String,
    pub stage: String,
    pub action: String,
    #[serde(flatten)]
    pub status: OpStatus,
}

#[derive(Debug, Default)]
pub struct OpRegistry {
    next: AtomicU64,
    records: Mutex<HashMap<String, OpRecord>>,
    tasks: Mutex<JoinSet<()>>,
}

impl OpRegistry {
    pub fn open(&self, session_id: &str, stage: &str, action: &str) -> OpRecord {
        let op_id = format!("op-{}", self.next.fetch_add(1, Ordering::SeqCst) + 1);
        let record = OpRecord {
            op_id: op_id.clone(),
            session_id: session_id.into(),
            stage: stage.into(),
            action: action.into(),
            status: OpStatus::Pending,
        };
        self.records
            .lock()
            .expect("ops poisoned")
            .insert(op_id, record.clone());
        record
    }

    pub fn finish(&self, op_id: &str, status: OpStatus) {
        if let Some(r) = self.records.lock().expect("ops poisoned").get_mut(op_id) {
            r.status = status;
        }
    }

    pub fn get(&self, op_id: &str) -> Option<OpRecord> {
        self.records
            .lock()
            .expect("ops poisoned")
            .get(op_id)
            .cloned()
    }

    /// Runs blocking work on the runtime's blocking pool, tracked for draining.
    pub fn spawn_blocking(&self, f: impl FnOnce() + Send + 'static) {
        let mut tasks = self.tasks.lock().expect("ops poisoned");
        while tasks.try_join_next().is_some() {}
        tasks.spawn_blocking(f);
    }

    /// Waits for every tracked operation to finish.
    pub async fn drain(&self) {
        let mut tasks = std::mem::take(&mut *self.tasks.lock().expect("ops poisoned"));
        while let Some(result) = tasks.join_next().await {
            if let Err(e) = result {
                tracing::error!(error = %e, "chain operation panicked");
            }
        }
    }
}
