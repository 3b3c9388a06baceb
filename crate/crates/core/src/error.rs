use serde::Serialize;

use crate::gateway::GatewayError;
use crate::model::Stage;
use crate::store::StoreError;
use crate::validation::SpanError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A chunk rejected by the verbatim check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OffendingChunk {
    pub code_name: String,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("document `{0}` has an empty body")]
    EmptyDocument(String),
    #[error("a session needs at least one document")]
    NoDocuments,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("research question `{0}` is empty")]
    EmptyQuestion(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown {stage} unit `{unit_id}`")]
    UnknownUnit { stage: Stage, unit_id: String },
    #[error("unknown document `{0}`")]
    UnknownDocument(String),
    #[error("chunk text is not a verbatim excerpt of any document: {0:?}")]
    ChunkNotVerbatim(String),
    #[error("chunk text only occurs where it would overlap an existing chunk: {0:?}")]
    ChunkOverlap(String),
    #[error("`{unit_id}` still has {children} children; pass cascade to delete it")]
    HasChildren { unit_id: String, children: usize },
    #[error("invalid mutation: {0}")]
    InvalidMutation(String),
    #[error("text must not be empty")]
    EmptyText,
    #[error("stage {stage} is not committed")]
    StageNotCommitted { stage: Stage },
    #[error("cannot run {stage}: upstream stage {upstream} is stale")]
    StaleUpstream { stage: Stage, upstream: Stage },
    #[error("stage {stage} is stale")]
    StaleStage { stage: Stage },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("another chain operation is running on this session")]
    Busy,
    #[error("model referenced unknown unit `{0}`")]
    HallucinatedReference(String),
    #[error("model assigned unit `{0}` to more than one parent")]
    DuplicateAssignment(String),
    #[error("invalid research question reference `{0}`")]
    InvalidQuestionReference(String),
    #[error("unresolvable reference `{0}`")]
    UnresolvableReference(String),
    #[error("{} chunk(s) failed the verbatim check", .0.len())]
    VerbatimViolation(Vec<OffendingChunk>),
    #[error("nudge does not label every unit exactly once (missing: {missing:?}, duplicated: {duplicated:?}, unknown: {unknown:?})")]
    IncompleteCoverage {
        missing: Vec<String>,
        duplicated: Vec<String>,
        unknown: Vec<String>,
    },
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("unknown version `{0}`")]
    UnknownVersion(String),
    #[error("summary stage is missing for this version: {0}")]
    MissingSummary(String),
    #[error("corrupt audit log at seq {seq}: {reason}")]
    CorruptLog { seq: u64, reason: String },
    #[error(transparent)]
    Span(#[from] SpanError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error("template error: {0}")]
    Template(String),
}

impl Error {
    /// Stable machine-readable code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyDocument(_) => "empty_document",
            Error::NoDocuments => "no_documents",
            Error::DuplicateId(_) => "duplicate_id",
            Error::EmptyQuestion(_) => "empty_question",
            Error::UnknownSession(_) => "unknown_session",
            Error::UnknownUnit { .. } => "unknown_unit",
            Error::UnknownDocument(_) => "unknown_document",
            Error::ChunkNotVerbatim(_) => "chunk_not_verbatim",
            Error::ChunkOverlap(_) => "chunk_overlap",
            Error::HasChildren { .. } => "has_children",
            Error::InvalidMutation(_) => "invalid_mutation",
            Error::EmptyText => "empty_text",
            Error::StageNotCommitted { .. } => "stage_not_committed",
            Error::StaleUpstream { .. } => "stale_upstream",
            Error::StaleStage { .. } => "stale_stage",
            Error::Precondition(_) => "precondition_failed",
            Error::Busy => "busy",
            Error::HallucinatedReference(_) => "hallucinated_reference",
            Error::DuplicateAssignment(_) => "duplicate_assignment",
            Error::InvalidQuestionReference(_) => "invalid_question_reference",
            Error::UnresolvableReference(_) => "unresolvable_reference",
            Error::VerbatimViolation(_) => "verbatim_violation",
            Error::IncompleteCoverage { .. } => "incomplete_coverage",
            Error::UnknownPrompt(_) => "unknown_prompt",
            Error::UnknownVersion(_) => "unknown_version",
            Error::MissingSummary(_) => "missing_summary",
            Error::CorruptLog { .. } => "corrupt_log",
            Error::Span(_) => "span_out_of_bounds",
            Error::Gateway(e) => e.code(),
            Error::Storage(_) => "storage_failure",
            Error::Template(_) => "template_error",
        }
    }

    /// Structured detail for API clients, when the error carries any.
    pub fn detail(&self) -> Option<serde_json::Value> {
        match self {
            Error::VerbatimViolation(chunks) => Some(serde_json::json!({ "chunks": chunks })),
            Error::IncompleteCoverage {
                missing,
                duplicated,
                unknown,
            } => Some(serde_json::json!({
                "missing": missing,
                "duplicated": duplicated,
                "unknown": unknown,
            })),
            Error::CorruptLog { seq, .. } => Some(serde_json::json!({ "seq": seq })),
            Error::Gateway(GatewayError::SchemaViolation { attempts, .. }) => {
                Some(serde_json::json!({ "attempts": attempts }))
            }
            _ => None,
        }
    }

    /// Every code `code()` can return.
    pub const CODES: &'static [&'static str] = &[
        "empty_document",
        "no_documents",
        "duplicate_id",
        "empty_question",
        "unknown_session",
        "unknown_unit",
        "unknown_document",
        "chunk_not_verbatim",
        "chunk_overlap",
        "has_children",
        "invalid_mutation",
        "empty_text",
        "stage_not_committed",
        "stale_upstream",
        "stale_stage",
        "precondition_failed",
        "busy",
        "hallucinated_reference",
        "duplicate_assignment",
        "invalid_question_reference",
        "unresolvable_reference",
        "verbatim_violation",
        "incomplete_coverage",
        "unknown_prompt",
        "unknown_version",
        "missing_summary",
        "corrupt_log",
        "span_out_of_bounds",
        "provider_unreachable",
        "provider_timeout",
        "provider_rejected",
        "schema_violation",
        "unknown_schema",
        "duplicate_schema",
        "storage_failure",
        "template_error",
    ];
}
