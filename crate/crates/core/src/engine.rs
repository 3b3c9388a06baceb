//! Session lifecycle and the operations of the analysis workflow.
//!
//! Every mutation follows the same write-ahead path: build an event, fold it
//! into a copy of the session, append it to the trail, then swap the copy in.
//! A failed append leaves the live session untouched.
//!
//! Chain operations (stage runs, regenerations, nudges) take a per-session
//! reservation for their whole duration and call the model without holding
//! the session lock. While a reservation is held, structural edits are
//! refused; memos, prompts and version saves still go through.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::audit::{
    self, Actor, AuditEvent, CoverageComputed, EditApplied, ErrorRecord, EventKind, ExportProduced,
    MemoAdded, PromptIssued, SessionCreated, StageCommitted, StageRejected, Trail, TrailHeader,
    TranscriptRef, VersionSaved,
};
use crate::chain::{self, StageParameters};
use crate::clock::{Clock, Timestamp};
use crate::codebook::{self, RenderFormat, TrustworthyCodebook};
use crate::digest::sha256_hex;
use crate::error::{Error, Result};
use crate::gateway::{ChainRequest, ChainResponse, Gateway, GatewayError};
use crate::hierarchy::{self, EditOutcome, Mutation};
use crate::ids::{MemoId, PromptId, SessionId, VersionId};
use crate::model::{
    AnalysisSession, Author, Memo, Nudge, PromptParameters, PromptRecord, ResearchQuestion,
    SavedVersion, SessionSettings, SourceDocument, Stage, SESSION_SCHEMA_VERSION,
};
use crate::store::SessionStore;
use crate::theme_map::{self, ThemeGraph};
use crate::validation::{self, CoverageReport};

struct SlotState {
    session: AnalysisSession,
    last_digest: String,
}

struct Slot {
    id: SessionId,
    state: RwLock<SlotState>,
    busy: AtomicBool,
}

/// Exclusive right to run one chain operation on a session. Released on drop.
pub struct Reservation {
    slot: Arc<Slot>,
}

impl Reservation {
    pub fn session_id(&self) -> &SessionId {
        &self.slot.id
    }
}

impl Drop for Reservation {
    fn drop(&mut self) {
        self.slot.busy.store(false, Ordering::SeqCst);
    }
}

impl std::fmt::Debug for Reservation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reservation")
            .field("session", &self.slot.id)
            .finish()
    }
}

/// Outcome of a committed stage run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub stage: Stage,
    pub seq: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<PromptId>,
    pub warnings: Vec<String>,
    pub session: AnalysisSession,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditResult {
    pub seq: u64,
    pub outcome: EditOutcome,
    pub session: AnalysisSession,
}

/// Full transcript of one gateway call, kept in the blob store.
#[derive(Serialize)]
struct Transcript<'a> {
    request: &'a ChainRequest,
    request_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    response: Option<TranscriptResponse<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<ErrorRecord>,
}

#[derive(Serialize)]
struct TranscriptResponse<'a> {
    raw_text: &'a str,
    parsed: &'a Value,
    attempts: u32,
    provider_latency_ms: u128,
    raw_attempts: &'a [crate::gateway::RawAttempt],
}

pub struct Engine {
    store: Arc<dyn SessionStore>,
    gateway: Arc<Gateway>,
    clock: Arc<dyn Clock>,
    slots: Mutex<HashMap<SessionId, Arc<Slot>>>,
    sessions_created: AtomicU64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("gateway", &self.gateway)
            .finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(
        store: Arc<dyn SessionStore>,
        gateway: Arc<Gateway>,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        for (id, schema) in chain::schemas() {
            if !gateway.has_schema(id) {
                gateway.register_schema(id, schema)?;
            }
        }
        Ok(Self {
            store,
            gateway,
            clock,
            slots: Mutex::new(HashMap::new()),
            sessions_created: AtomicU64::new(0),
        })
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    pub fn store(&self) -> &Arc<dyn SessionStore> {
        &self.store
    }

    pub fn provider_label(&self) -> String {
        self.gateway.provider_label()
    }

    pub fn create_session(
        &self,
        documents: Vec<SourceDocument>,
        questions: Vec<ResearchQuestion>,
    ) -> Result<AnalysisSession> {
        if documents.is_empty() {
            return Err(Error::NoDocuments);
        }
        let mut doc_ids = std::collections::HashSet::new();
        for doc in &documents {
            if doc.body.trim().is_empty() {
                return Err(Error::EmptyDocument(doc.id.0.clone()));
            }
            if !doc_ids.insert(&doc.id) {
                return Err(Error::DuplicateId(doc.id.0.clone()));
            }
        }
        let mut question_ids = std::collections::HashSet::new();
        for q in &questions {
            if q.text.trim().is_empty() {
                return Err(Error::EmptyQuestion(q.id.0.clone()));
            }
            if !question_ids.insert(&q.id) {
                return Err(Error::DuplicateId(q.id.0.clone()));
            }
        }

        let created_at = self.clock.now();
        let ordinal = self.sessions_created.fetch_add(1, Ordering::SeqCst);
        let id = self.mint_session_id(&created_at, ordinal, &documents)?;
        let config = self.gateway.config();
        let session = AnalysisSession {
            schema_version: SESSION_SCHEMA_VERSION,
            id: id.clone(),
            created_at,
            settings: SessionSettings {
                template_version: chain::TEMPLATE_VERSION.into(),
                provider_kind: config.provider_kind.as_str().into(),
                model_name: config.model_name.clone(),
                reasoning_effort: config.reasoning_effort.as_str().into(),
                temperature: config.temperature,
            },
            documents,
            research_questions: questions,
            stage_outputs: Default::default(),
            memos: Vec::new(),
            prompt_records: Vec::new(),
            coverage_report: None,
            saved_versions: Vec::new(),
            last_seq: 1,
        };

        let header = TrailHeader::new(id.clone());
        let payload = serde_json::to_value(SessionCreated {
            session: session.clone(),
        })
        .expect("session serializes");
        let event = AuditEvent::seal(
            1,
            created_at,
            Actor::Analyst,
            EventKind::SessionCreated,
            payload,
            header.digest(),
        );
        self.store.create_session(&id, &header.to_line())?;
        self.store.append_line(&id, &event.to_line())?;
        self.write_document(&session);
        let slot = Arc::new(Slot {
            id: id.clone(),
            state: RwLock::new(SlotState {
                session: session.clone(),
                last_digest: event.digest,
            }),
            busy: AtomicBool::new(false),
        });
        self.slots.lock().expect("slots poisoned").insert(id, slot);
        tracing::info!(session = %session.id, documents = session.documents.len(), "session created");
        Ok(session)
    }

    /// Session ids derive from the creation instant, the engine's creation
    /// ordinal and the documents, so identical runs under a deterministic
    /// clock produce identical ids.
    fn mint_session_id(
        &self,
        created_at: &Timestamp,
        ordinal: u64,
        documents: &[SourceDocument],
    ) -> Result<SessionId> {
        let mut seed = format!("{}|{ordinal}", created_at.to_rfc3339());
        for doc in documents {
            seed.push('|');
            seed.push_str(&sha256_hex(doc.body.as_bytes()));
        }
        for salt in 0u32.. {
            let digest = sha256_hex(format!("{seed}|{salt}").as_bytes());
            let id = SessionId(format!("s-{}", &digest[..16]));
            if !self.store.exists(&id)? {
                return Ok(id);
            }
        }
        unreachable!("salt space exhausted")
    }

    fn write_document(&self, session: &AnalysisSession) {
        if let Err(e) = self
            .store
            .write_session_document(&session.id, &session.to_document())
        {
            // The trail is authoritative; the document is rebuilt on load.
            tracing::warn!(session = %session.id, error = %e, "session document not written");
        }
    }

    fn slot(&self, id: &SessionId) -> Result<Arc<Slot>> {
        let mut slots = self.slots.lock().expect("slots poisoned");
        if let Some(slot) = slots.get(id) {
            return Ok(slot.clone());
        }
        if !self.store.exists(id)? {
            return Err(Error::UnknownSession(id.0.clone()));
        }
        let trail = self.load_trail(id)?;
        let session = trail.replay(None)?;
        let slot = Arc::new(Slot {
            id: id.clone(),
            state: RwLock::new(SlotState {
                session,
                last_digest: trail.last_digest(),
            }),
            busy: AtomicBool::new(false),
        });
        self.write_document(&slot.state.read().expect("slot poisoned").session);
        slots.insert(id.clone(), slot.clone());
        Ok(slot)
    }

    /// Reads and verifies a session's trail, dropping a torn final line.
    fn load_trail(&self, id: &SessionId) -> Result<Trail> {
        let lines = self.store.read_trail(id)?;
        if lines.torn_tail.is_some() {
            tracing::warn!(session = %id, "dropping torn trail tail");
            self.store.repair_trail(id)?;
        }
        Trail::parse(&lines.lines)
    }

    pub fn list_sessions(&self) -> Result<Vec<SessionId>> {
        Ok(self.store.list_sessions()?)
    }

    pub fn session(&self, id: &SessionId) -> Result<AnalysisSession> {
        let slot = self.slot(id)?;
        let state = slot.state.read().expect("slot poisoned");
        Ok(state.session.clone())
    }

    pub fn is_busy(&self, id: &SessionId) -> Result<bool> {
        Ok(self.slot(id)?.busy.load(Ordering::SeqCst))
    }

    /// Claims the session for one chain operation, or fails with `Busy`.
    pub fn reserve(&self, id: &SessionId) -> Result<Reservation> {
        let slot = self.slot(id)?;
        slot.busy
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .map_err(|_| Error::Busy)?;
        Ok(Reservation { slot })
    }

    /// Appends one event and folds it into the live session.
    fn commit(
        &self,
        slot: &Slot,
        state: &mut SlotState,
        actor: Actor,
        kind: EventKind,
        timestamp: Timestamp,
        payload: Value,
    ) -> Result<AuditEvent> {
        let seq = state.session.last_seq + 1;
        let event = AuditEvent::seal(
            seq,
            timestamp,
            actor,
            kind,
            payload,
            state.last_digest.clone(),
        );
        let mut next = state.session.clone();
        audit::apply_event(&mut next, &event)?;
        self.store.append_line(&slot.id, &event.to_line())?;
        state.session = next;
        state.last_digest = event.digest.clone();
        self.write_document(&state.session);
        tracing::debug!(session = %slot.id, seq, kind = kind.as_str(), "event committed");
        Ok(event)
    }

    fn commit_now(
        &self,
        slot: &Slot,
        actor: Actor,
        kind: EventKind,
        payload: impl Serialize,
    ) -> Result<(AuditEvent, AnalysisSession)> {
        let mut state = slot.state.write().expect("slot poisoned");
        let payload = serde_json::to_value(payload).expect("payload serializes");
        let event = self.commit(slot, &mut state, actor, kind, self.clock.now(), payload)?;
        Ok((event, state.session.clone()))
    }

    pub fn edit_unit(
        &self,
        id: &SessionId,
        stage: Stage,
        unit_id: &str,
        mutation: Mutation,
    ) -> Result<EditResult> {
        let slot = self.slot(id)?;
        let mut state = slot.state.write().expect("slot poisoned");
        if slot.busy.load(Ordering::SeqCst) {
            return Err(Error::Busy);
        }
        let mut outputs = state.session.stage_outputs.clone();
        let outcome = hierarchy::apply_edit(
            &mut outputs,
            &state.session.documents,
            stage,
            unit_id,
            &mutation,
        )?;
        let coverage_report = (stage == Stage::Codes)
            .then(|| validation::compute_coverage(&state.session.documents, outputs.chunks()));
        let payload = EditApplied {
            stage,
            unit_id: unit_id.to_owned(),
            mutation,
            outcome: outcome.clone(),
            outputs,
            coverage_report,
        };
        let payload = serde_json::to_value(payload).expect("payload serializes");
        let event = self.commit(
            &slot,
            &mut state,
            Actor::Analyst,
            EventKind::Edit,
            self.clock.now(),
            payload,
        )?;
        Ok(EditResult {
            seq: event.seq,
            outcome,
            session: state.session.clone(),
        })
    }

    pub fn add_memo(&self, id: &SessionId, stage: Stage, text: &str) -> Result<Memo> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        let slot = self.slot(id)?;
        let mut state = slot.state.write().expect("slot poisoned");
        let now = self.clock.now();
        let memo = Memo {
            id: MemoId(format!("memo-{}", state.session.memos.len() + 1)),
            stage,
            text: text.to_owned(),
            created_at: now,
            author: Author::Analyst,
        };
        let payload =
            serde_json::to_value(MemoAdded { memo: memo.clone() }).expect("payload serializes");
        self.commit(
            &slot,
            &mut state,
            Actor::Analyst,
            EventKind::MemoAdded,
            now,
            payload,
        )?;
        Ok(memo)
    }

    /// Stores a prompt for later regeneration; `applied` stays false until a
    /// regeneration with it succeeds.
    pub fn issue_prompt(
        &self,
        id: &SessionId,
        stage: Stage,
        text: &str,
        number_of_codes: Option<u32>,
    ) -> Result<PromptRecord> {
        let slot = self.slot(id)?;
        self.record_prompt(&slot, stage, text, number_of_codes)
    }

    fn record_prompt(
        &self,
        slot: &Slot,
        stage: Stage,
        text: &str,
        number_of_codes: Option<u32>,
    ) -> Result<PromptRecord> {
        let text = text.trim();
        if text.is_empty() {
            return Err(Error::EmptyText);
        }
        StageParameters {
            number_of_codes,
            user_prompt: None,
        }
        .validate(stage)?;
        let mut state = slot.state.write().expect("slot poisoned");
        let now = self.clock.now();
        let prompt = PromptRecord {
            id: PromptId(format!("prompt-{}", state.session.prompt_records.len() + 1)),
            stage,
            user_prompt_text: text.to_owned(),
            parameters: PromptParameters { number_of_codes },
            issued_at: now,
            applied: false,
        };
        let payload = serde_json::to_value(PromptIssued {
            prompt: prompt.clone(),
        })
        .expect("payload serializes");
        self.commit(
            slot,
            &mut state,
            Actor::Analyst,
            EventKind::PromptIssued,
            now,
            payload,
        )?;
        Ok(prompt)
    }

    pub fn save_version(&self, id: &SessionId, label: Option<String>) -> Result<SavedVersion> {
        let slot = self.slot(id)?;
        let mut state = slot.state.write().expect("slot poisoned");
        let version_id = VersionId(format!("v{}", state.session.saved_versions.len() + 1));
        let label = label.map(|l| l.trim().to_owned()).filter(|l| !l.is_empty());
        let payload =
            serde_json::to_value(VersionSaved { version_id, label }).expect("payload serializes");
        self.commit(
            &slot,
            &mut state,
            Actor::Analyst,
            EventKind::VersionSaved,
            self.clock.now(),
            payload,
        )?;
        Ok(state
            .session
            .saved_versions
            .last()
            .expect("just saved")
            .clone())
    }

    /// Current coverage; computed on the fly (without an event) if none is stored.
    pub fn coverage(&self, id: &SessionId) -> Result<CoverageReport> {
        let session = self.session(id)?;
        Ok(session.coverage_report.unwrap_or_else(|| {
            validation::compute_coverage(&session.documents, session.stage_outputs.chunks())
        }))
    }

    /// Recomputes coverage and records it in the trail.
    pub fn compute_coverage(&self, id: &SessionId) -> Result<CoverageReport> {
        let slot = self.slot(id)?;
        let mut state = slot.state.write().expect("slot poisoned");
        let report = validation::compute_coverage(
            &state.session.documents,
            state.session.stage_outputs.chunks(),
        );
        let payload = serde_json::to_value(CoverageComputed {
            coverage_report: report.clone(),
        })
        .expect("payload serializes");
        self.commit(
            &slot,
            &mut state,
            Actor::System,
            EventKind::CoverageComputed,
            self.clock.now(),
            payload,
        )?;
        Ok(report)
    }

    pub fn theme_map(&self, id: &SessionId) -> Result<ThemeGraph> {
        let session = self.session(id)?;
        theme_map::build_graph(&session.stage_outputs)
    }

    /// Verified events with `seq >= from_seq`.
    pub fn trail(&self, id: &SessionId, from_seq: u64) -> Result<Vec<AuditEvent>> {
        self.slot(id)?;
        let trail = self.load_trail(id)?;
        Ok(trail
            .events
            .into_iter()
            .filter(|e| e.seq >= from_seq)
            .collect())
    }

    /// Rebuilds the session from its stored trail, up to `up_to` inclusive.
    pub fn replay(&self, id: &SessionId, up_to: Option<u64>) -> Result<AnalysisSession> {
        if !self.store.exists(id)? {
            return Err(Error::UnknownSession(id.0.clone()));
        }
        self.load_trail(id)?.replay(up_to)
    }

    /// Assembles the codebook of a saved version. Pure: appends nothing.
    pub fn export(&self, id: &SessionId, version_id: &VersionId) -> Result<TrustworthyCodebook> {
        let session = self.session(id)?;
        let version = session
            .version(version_id)
            .ok_or_else(|| Error::UnknownVersion(version_id.0.clone()))?
            .clone();
        let trail = self.load_trail(id)?;
        let at_version = trail.replay(Some(version.seq_at_save))?;
        let events: Vec<AuditEvent> = trail
            .events
            .into_iter()
            .take_while(|e| e.seq <= version.seq_at_save)
            .collect();
        codebook::assemble(
            &at_version,
            &events,
            &version,
            &self.provider_label(),
            self.clock.now(),
        )
    }

    /// Exports, renders, and records an `export_produced` event.
    pub fn record_export(
        &self,
        id: &SessionId,
        version_id: &VersionId,
        format: RenderFormat,
    ) -> Result<(TrustworthyCodebook, String)> {
        let codebook = self.export(id, version_id)?;
        let rendered = codebook::render(&codebook, format);
        let slot = self.slot(id)?;
        self.commit_now(
            &slot,
            Actor::Analyst,
            EventKind::ExportProduced,
            ExportProduced {
                version_id: version_id.clone(),
                format: format.as_str().into(),
                document_digest: sha256_hex(rendered.as_bytes()),
            },
        )?;
        Ok((codebook, rendered))
    }

    pub fn run_stage(
        &self,
        id: &SessionId,
        stage: Stage,
        params: StageParameters,
    ) -> Result<StageRun> {
        let reservation = self.reserve(id)?;
        self.run_stage_reserved(&reservation, stage, params)
    }

    pub fn run_codes_stage(&self, id: &SessionId, params: StageParameters) -> Result<StageRun> {
        self.run_stage(id, Stage::Codes, params)
    }

    pub fn run_subthemes_stage(&self, id: &SessionId, params: StageParameters) -> Result<StageRun> {
        self.run_stage(id, Stage::Subthemes, params)
    }

    pub fn run_themes_stage(&self, id: &SessionId, params: StageParameters) -> Result<StageRun> {
        self.run_stage(id, Stage::Themes, params)
    }

    pub fn run_summary_stage(&self, id: &SessionId) -> Result<StageRun> {
        self.run_stage(id, Stage::Summary, StageParameters::default())
    }

    /// Runs a stage under an existing reservation. A non-empty `user_prompt`
    /// is first stored as a prompt record and the run becomes a regeneration
    /// with that prompt.
    pub fn run_stage_reserved(
        &self,
        reservation: &Reservation,
        stage: Stage,
        params: StageParameters,
    ) -> Result<StageRun> {
        params.validate(stage)?;
        let slot = &reservation.slot;
        let prompt_id = match params
            .user_prompt
            .as_deref()
            .map(str::trim)
            .filter(|p| !p.is_empty())
        {
            Some(text) => Some(
                self.record_prompt(slot, stage, text, params.number_of_codes)?
                    .id,
            ),
            None => None,
        };
        self.execute_stage(slot, stage, params, prompt_id)
    }

    pub fn regenerate_with_prompt(&self, id: &SessionId, prompt_id: &PromptId) -> Result<StageRun> {
        let reservation = self.reserve(id)?;
        self.regenerate_reserved(&reservation, prompt_id)
    }

    pub fn regenerate_reserved(
        &self,
        reservation: &Reservation,
        prompt_id: &PromptId,
    ) -> Result<StageRun> {
        let slot = &reservation.slot;
        let record = {
            let state = slot.state.read().expect("slot poisoned");
            state
                .session
                .prompt(prompt_id)
                .cloned()
                .ok_or_else(|| Error::UnknownPrompt(prompt_id.0.clone()))?
        };
        let params = StageParameters {
            number_of_codes: record.parameters.number_of_codes,
            user_prompt: Some(record.user_prompt_text.clone()),
        };
        self.execute_stage(slot, record.stage, params, Some(record.id))
    }

    /// Regenerates the nudge of a committed stage, e.g. after edits.
    pub fn generate_nudge(&self, id: &SessionId, stage: Stage) -> Result<Nudge> {
        let reservation = self.reserve(id)?;
        self.generate_nudge_reserved(&reservation, stage)
    }

    pub fn generate_nudge_reserved(
        &self,
        reservation: &Reservation,
        stage: Stage,
    ) -> Result<Nudge> {
        let slot = &reservation.slot;
        if !stage.has_units() {
            return Err(Error::Precondition("the summary stage has no nudge".into()));
        }
        let snapshot = slot.state.read().expect("slot poisoned").session.clone();
        if !snapshot.stage_outputs.is_committed(stage) {
            return Err(Error::StageNotCommitted { stage });
        }
        let mut transcripts = Vec::new();
        let result = (|| {
            let request = chain::nudge_request(&snapshot, &snapshot.stage_outputs, stage);
            let response = self.call(slot, "nudge", &request, &mut transcripts)?;
            chain::interpret_nudge(&snapshot.stage_outputs, stage, &response.parsed)
        })();
        match result {
            Ok(nudge) => {
                let mut outputs = snapshot.stage_outputs.clone();
                chain::attach_nudge(&mut outputs, stage, nudge.clone());
                let payload = StageCommitted {
                    stage,
                    part: "nudge".into(),
                    prompt_id: None,
                    outputs,
                    coverage_report: None,
                    warnings: Vec::new(),
                    transcripts,
                };
                self.commit_now(slot, Actor::System, EventKind::StageCommitted, payload)?;
                Ok(nudge)
            }
            Err(e) => Err(self.reject(slot, stage, "nudge", None, transcripts, e)),
        }
    }

    fn execute_stage(
        &self,
        slot: &Slot,
        stage: Stage,
        params: StageParameters,
        prompt_id: Option<PromptId>,
    ) -> Result<StageRun> {
        let snapshot = slot.state.read().expect("slot poisoned").session.clone();
        let mut transcripts = Vec::new();
        let result = (|| {
            chain::check_preconditions(&snapshot, stage)?;
            let request = chain::build_request(&snapshot, stage, &params);
            let response = self.call(slot, "stage", &request, &mut transcripts)?;
            let draft = chain::interpret(&snapshot, stage, &params, &response.parsed)?;
            let mut outputs = draft.outputs;
            if stage.has_units() {
                let request = chain::nudge_request(&snapshot, &outputs, stage);
                let response = self.call(slot, "nudge", &request, &mut transcripts)?;
                let nudge = chain::interpret_nudge(&outputs, stage, &response.parsed)?;
                chain::attach_nudge(&mut outputs, stage, nudge);
            }
            let coverage = (stage == Stage::Codes)
                .then(|| validation::compute_coverage(&snapshot.documents, outputs.chunks()));
            Ok((outputs, coverage, draft.warnings))
        })();
        match result {
            Ok((outputs, coverage_report, warnings)) => {
                let kind = if prompt_id.is_some() {
                    EventKind::Regeneration
                } else {
                    EventKind::StageCommitted
                };
                let payload = StageCommitted {
                    stage,
                    part: "stage".into(),
                    prompt_id: prompt_id.clone(),
                    outputs,
                    coverage_report,
                    warnings: warnings.clone(),
                    transcripts,
                };
                let (event, session) = self.commit_now(slot, Actor::System, kind, payload)?;
                tracing::info!(session = %slot.id, %stage, seq = event.seq, "stage committed");
                Ok(StageRun {
                    stage,
                    seq: event.seq,
                    prompt_id,
                    warnings,
                    session,
                })
            }
            Err(e) => Err(self.reject(slot, stage, "stage", prompt_id, transcripts, e)),
        }
    }

    /// Records a rejected chain operation and hands the error back.
    fn reject(
        &self,
        slot: &Slot,
        stage: Stage,
        part: &str,
        prompt_id: Option<PromptId>,
        transcripts: Vec<TranscriptRef>,
        error: Error,
    ) -> Error {
        // Storage failures cannot be recorded in the store that just failed.
        if !matches!(error, Error::Storage(_)) {
            let payload = StageRejected {
                stage,
                part: part.into(),
                prompt_id,
                error: ErrorRecord::from(&error),
                transcripts,
            };
            if let Err(e) = self.commit_now(slot, Actor::System, EventKind::StageRejected, payload)
            {
                tracing::warn!(session = %slot.id, error = %e, "stage rejection not recorded");
            }
        }
        tracing::info!(session = %slot.id, %stage, code = error.code(), "stage rejected");
        error
    }

    /// One gateway call, with its full transcript written to the blob store.
    fn call(
        &self,
        slot: &Slot,
        purpose: &str,
        request: &ChainRequest,
        transcripts: &mut Vec<TranscriptRef>,
    ) -> Result<ChainResponse> {
        let result = self.gateway.complete(request);
        let request_digest = request.digest();
        let (response, error, attempts) = match &result {
            Ok(r) => (
                Some(TranscriptResponse {
                    raw_text: &r.raw_text,
                    parsed: &r.parsed,
                    attempts: r.attempts,
                    provider_latency_ms: r.provider_latency.as_millis(),
                    raw_attempts: &r.raw_attempts,
                }),
                None,
                r.attempts,
            ),
            Err(e) => {
                let attempts = match e {
                    GatewayError::SchemaViolation { attempts, .. } => attempts.len() as u32,
                    _ => 0,
                };
                (
                    None,
                    Some(ErrorRecord::from(&Error::Gateway(e.clone()))),
                    attempts,
                )
            }
        };
        let transcript = Transcript {
            request,
            request_digest: request_digest.clone(),
            response,
            error,
        };
        let bytes = serde_json::to_vec_pretty(&transcript).expect("transcript serializes");
        let blob = sha256_hex(&bytes);
        self.store.put_blob(&slot.id, &blob, &bytes)?;
        transcripts.push(TranscriptRef {
            purpose: purpose.into(),
            schema_id: request.schema_id.clone(),
            request_digest,
            response_digest: result.as_ref().ok().map(|r| r.response_digest.clone()),
            attempts,
            blob,
        });
        Ok(result?)
    }

    /// Full transcript blob referenced from a trail event.
    pub fn transcript(&self, id: &SessionId, blob: &str) -> Result<Option<Value>> {
        Ok(self
            .store
            .get_blob(id, blob)?
            .and_then(|bytes| serde_json::from_slice(&bytes).ok()))
    }
}

/// Summary of a session, as listed by the service.
pub fn session_summary(session: &AnalysisSession) -> Value {
    json!({
        "id": session.id,
        "created_at": session.created_at,
        "documents": session.documents.len(),
        "last_seq": session.last_seq,
        "stages": Stage::ALL.iter().map(|s| json!({
            "stage": s,
            "committed": session.stage_outputs.is_committed(*s),
            "stale": session.stage_outputs.is_stale(*s),
        })).collect::<Vec<_>>(),
    })
}

/// How long to wait between polls when blocking on an operation.
pub const POLL_INTERVAL: Duration = Duration::from_millis(20);
