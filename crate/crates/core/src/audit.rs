//! Append-only audit trail and event-sourced replay.
//!
//! Every state change of a session is an event. The live engine appends the
//! event first and then folds it into its in-memory state with
//! [`apply_event`], the same function replay uses, so a replayed session is
//! identical to the live one by construction.
//!
//! Trail format: newline-delimited JSON. Line one is a [`TrailHeader`]; each
//! further line is one [`AuditEvent`]. Events are chained: `digest` covers
//! the event's own fields and `prev_digest`, which is the previous event's
//! digest (or the header digest for the first event).

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::clock::Timestamp;
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::hierarchy::{EditOutcome, Mutation};
use crate::ids::{PromptId, SessionId, VersionId};
use crate::model::{AnalysisSession, Memo, PromptRecord, SavedVersion, Stage, StageOutputs};
use crate::validation::CoverageReport;

pub const TRAIL_FORMAT: &str = "qdachain-trail";
pub const TRAIL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrailHeader {
    pub format: String,
    pub schema_version: u32,
    pub session_id: SessionId,
}

impl TrailHeader {
    pub fn new(session_id: SessionId) -> Self {
        Self {
            format: TRAIL_FORMAT.into(),
            schema_version: TRAIL_SCHEMA_VERSION,
            session_id,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("header serializes")
    }

    /// Chain anchor for the first event.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_line().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actor {
    System,
    Analyst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    SessionCreated,
    StageCommitted,
    StageRejected,
    Edit,
    MemoAdded,
    PromptIssued,
    Regeneration,
    CoverageComputed,
    VersionSaved,
    ExportProduced,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::SessionCreated => "session_created",
            EventKind::StageCommitted => "stage_committed",
            EventKind::StageRejected => "stage_rejected",
            EventKind::Edit => "edit",
            EventKind::MemoAdded => "memo_added",
            EventKind::PromptIssued => "prompt_issued",
            EventKind::Regeneration => "regeneration",
            EventKind::CoverageComputed => "coverage_computed",
            EventKind::VersionSaved => "version_saved",
            EventKind::ExportProduced => "export_produced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEvent {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub actor: Actor,
    pub kind: EventKind,
    pub payload: Value,
    pub payload_digest: String,
    pub prev_digest: String,
    pub digest: String,
}

#[derive(Serialize)]
struct SealedFields<'a> {
    seq: u64,
    timestamp: &'a Timestamp,
    actor: Actor,
    kind: EventKind,
    payload_digest: &'a str,
    prev_digest: &'a str,
}

fn payload_digest(payload: &Value) -> String {
    sha256_hex(
        serde_json::to_string(payload)
            .expect("payload serializes")
            .as_bytes(),
    )
}

impl AuditEvent {
    pub fn seal(
        seq: u64,
        timestamp: Timestamp,
        actor: Actor,
        kind: EventKind,
        payload: Value,
        prev_digest: String,
    ) -> Self {
        let payload_digest = payload_digest(&payload);
        let mut event = Self {
            seq,
            timestamp,
            actor,
            kind,
            payload,
            payload_digest,
            prev_digest,
            digest: String::new(),
        };
        event.digest = event.expected_digest();
        event
    }

    fn expected_digest(&self) -> String {
        let fields = SealedFields {
            seq: self.seq,
            timestamp: &self.timestamp,
            actor: self.actor,
            kind: self.kind,
            payload_digest: &self.payload_digest,
            prev_digest: &self.prev_digest,
        };
        sha256_hex(
            serde_json::to_string(&fields)
                .expect("fields serialize")
                .as_bytes(),
        )
    }

    /// Checks the event's own digests and its link to the predecessor.
    pub fn verify(&self, expected_seq: u64, prev_digest: &str) -> Result<()> {
        let corrupt = |reason: &str| Error::CorruptLog {
            seq: expected_seq,
            reason: reason.to_owned(),
        };
        if self.seq != expected_seq {
            return Err(corrupt(&format!(
                "expected seq {expected_seq}, found {}",
                self.seq
            )));
        }
        if payload_digest(&self.payload) != self.payload_digest {
            return Err(corrupt("payload digest mismatch"));
        }
        if self.prev_digest != prev_digest {
            return Err(corrupt("chain link mismatch"));
        }
        if self.expected_digest() != self.digest {
            return Err(corrupt("event digest mismatch"));
        }
        Ok(())
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.payload.clone()).map_err(|e| Error::CorruptLog {
            seq: self.seq,
            reason: format!("malformed {} payload: {e}", self.kind.as_str()),
        })
    }
}

/// Pointer from an event to a full model transcript in the blob store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRef {
    /// `stage` or `nudge`.
    pub purpose: String,
    pub schema_id: String,
    pub request_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_digest: Option<String>,
    pub attempts: u32,
    pub blob: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session: AnalysisSession,
}

/// Payload of `stage_committed` and `regeneration`: the complete stage
/// outputs after the change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCommitted {
    pub stage: Stage,
    /// `stage` for a full run, `nudge` when only the nudge was regenerated.
    pub part: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<PromptId>,
    pub outputs: StageOutputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_report: Option<CoverageReport>,
    #[serde(default)]
    pub warnings: Vec<String>,
    #[serde(default)]
    pub transcripts: Vec<TranscriptRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Value>,
}

impl From<&Error> for ErrorRecord {
    fn from(e: &Error) -> Self {
        Self {
            code: e.code().to_owned(),
            message: e.to_string(),
            detail: e.detail(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRejected {
    pub stage: Stage,
    pub part: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<PromptId>,
    pub error: ErrorRecord,
    #[serde(default)]
    pub transcripts: Vec<TranscriptRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditApplied {
    pub stage: Stage,
    pub unit_id: String,
    pub mutation: Mutation,
    pub outcome: EditOutcome,
    pub outputs: StageOutputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage_report: Option<CoverageReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoAdded {
    pub memo: Memo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptIssued {
    pub prompt: PromptRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageComputed {
    pub coverage_report: CoverageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VersionSaved {
    pub version_id: VersionId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportProduced {
    pub version_id: VersionId,
    pub format: String,
    pub document_digest: String,
}

/// Folds one event into `session`. The first event of a trail must be
/// `session_created`; use [`fold`] to start from scratch.
pub fn apply_event(session: &mut AnalysisSession, event: &AuditEvent) -> Result<()> {
    match event.kind {
        EventKind::SessionCreated => {
            return Err(Error::CorruptLog {
                seq: event.seq,
                reason: "session_created after the first event".into(),
            })
        }
        EventKind::StageCommitted | EventKind::Regeneration => {
            let p: StageCommitted = event.payload_as()?;
            session.stage_outputs = p.outputs;
            if let Some(report) = p.coverage_report {
                session.coverage_report = Some(report);
            }
            if let Some(prompt_id) = &p.prompt_id {
                if let Some(record) = session
                    .prompt_records
                    .iter_mut()
                    .find(|r| &r.id == prompt_id)
                {
                    record.applied = true;
                }
            }
        }
        EventKind::StageRejected | EventKind::ExportProduced => {}
        EventKind::Edit => {
            let p: EditApplied = event.payload_as()?;
            session.stage_outputs = p.outputs;
            if let Some(report) = p.coverage_report {
                session.coverage_report = Some(report);
            }
        }
        EventKind::MemoAdded => {
            let p: MemoAdded = event.payload_as()?;
            session.memos.push(p.memo);
        }
        EventKind::PromptIssued => {
            let p: PromptIssued = event.payload_as()?;
            session.prompt_records.push(p.prompt);
        }
        EventKind::CoverageComputed => {
            let p: CoverageComputed = event.payload_as()?;
            session.coverage_report = Some(p.coverage_report);
        }
        EventKind::VersionSaved => {
            let p: VersionSaved = event.payload_as()?;
            session.saved_versions.push(SavedVersion {
                version_id: p.version_id,
                seq_at_save: event.seq,
                label: p.label,
                saved_at: event.timestamp,
            });
        }
    }
    session.last_seq = event.seq;
    Ok(())
}

/// Rebuilds a session from events `1..=up_to` (all events when `None`).
pub fn fold(events: &[AuditEvent], up_to: Option<u64>) -> Result<AnalysisSession> {
    let first = events.first().ok_or_else(|| Error::CorruptLog {
        seq: 1,
        reason: "trail has no events".into(),
    })?;
    if first.kind != EventKind::SessionCreated {
        return Err(Error::CorruptLog {
            seq: first.seq,
            reason: "trail does not start with session_created".into(),
        });
    }
    let mut session = first.payload_as::<SessionCreated>()?.session;
    session.last_seq = first.seq;
    for event in &events[1..] {
        if up_to.is_some_and(|n| event.seq > n) {
            break;
        }
        apply_event(&mut session, event)?;
    }
    Ok(session)
}

/// A parsed and verified trail.
#[derive(Debug, Clone, PartialEq)]
pub struct Trail {
    pub header: TrailHeader,
    pub events: Vec<AuditEvent>,
}

impl Trail {
    pub fn new(header: TrailHeader) -> Self {
        Self {
            header,
            events: Vec::new(),
        }
    }

    /// Parses complete trail lines and verifies the digest chain.
    pub fn parse(lines: &[String]) -> Result<Self> {
        let header_line = lines.first().ok_or_else(|| Error::CorruptLog {
            seq: 0,
            reason: "missing trail header".into(),
        })?;
        let header: TrailHeader =
            serde_json::from_str(header_line).map_err(|e| Error::CorruptLog {
                seq: 0,
                reason: format!("malformed trail header: {e}"),
            })?;
        if header.format != TRAIL_FORMAT || header.schema_version != TRAIL_SCHEMA_VERSION {
            return Err(Error::CorruptLog {
                seq: 0,
                reason: format!(
                    "unsupported trail format {} v{}",
                    header.format, header.schema_version
                ),
            });
        }
        let mut prev = header.digest();
        let mut events = Vec::with_capacity(lines.len().saturating_sub(1));
        for (i, line) in lines[1..].iter().enumerate() {
            let seq = i as u64 + 1;
            let event: AuditEvent = serde_json::from_str(line).map_err(|e| Error::CorruptLog {
                seq,
                reason: format!("malformed event: {e}"),
            })?;
            event.verify(seq, &prev)?;
            prev = event.digest.clone();
            events.push(event);
        }
        Ok(Self { header, events })
    }

    pub fn last_seq(&self) -> u64 {
        self.events.last().map_or(0, |e| e.seq)
    }

    pub fn last_digest(&self) -> String {
        self.events
            .last()
            .map_or_else(|| self.header.digest(), |e| e.digest.clone())
    }

    pub fn replay(&self, up_to: Option<u64>) -> Result<AnalysisSession> {
        fold(&self.events, up_to)
    }
}
