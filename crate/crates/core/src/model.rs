//! Domain types shared by every part of the engine.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::ids::{
    ChunkId, CodeId, DocumentId, IdCounters, MemoId, PromptId, QuestionId, SessionId, SubthemeId,
    ThemeId, VersionId,
};
use crate::validation::{self, CoverageReport};

/// Version of the session document layout.
pub const SESSION_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Codes,
    Subthemes,
    Themes,
    Summary,
}

impl Stage {
    pub const ALL: [Stage; 4] = [
        Stage::Codes,
        Stage::Subthemes,
        Stage::Themes,
        Stage::Summary,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Codes => "codes",
            Stage::Subthemes => "subthemes",
            Stage::Themes => "themes",
            Stage::Summary => "summary",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// The stage whose output this stage consumes.
    pub fn upstream(self) -> Option<Stage> {
        match self {
            Stage::Codes => None,
            Stage::Subthemes => Some(Stage::Codes),
            Stage::Themes => Some(Stage::Subthemes),
            Stage::Summary => Some(Stage::Themes),
        }
    }

    /// Stages strictly after this one.
    pub fn downstream(self) -> impl Iterator<Item = Stage> {
        Stage::ALL
            .into_iter()
            .filter(move |s| s.index() > self.index())
    }

    /// Whether the stage produces units with nudges.
    pub fn has_units(self) -> bool {
        !matches!(self, Stage::Summary)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown stage `{0}`")]
pub struct UnknownStage(pub String);

impl FromStr for Stage {
    type Err = UnknownStage;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "codes" => Ok(Stage::Codes),
            "subthemes" => Ok(Stage::Subthemes),
            "themes" => Ok(Stage::Themes),
            "summary" => Ok(Stage::Summary),
            other => Err(UnknownStage(other.to_owned())),
        }
    }
}

/// Who produced the current form of a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    #[default]
    MachineGenerated,
    UserEdited,
}

impl Provenance {
    pub fn label(self) -> &'static str {
        match self {
            Provenance::MachineGenerated => "machine generated",
            Provenance::UserEdited => "user edited",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceDocument {
    pub id: DocumentId,
    pub title: String,
    pub body: String,
    pub word_count: usize,
}

impl SourceDocument {
    pub fn new(
        id: impl Into<DocumentId>,
        title: impl Into<String>,
        body: impl Into<String>,
    ) -> Self {
        let body = body.into();
        Self {
            id: id.into(),
            title: title.into(),
            word_count: validation::tokenize(&body).count(),
            body,
        }
    }

    pub fn char_len(&self) -> usize {
        self.body.chars().count()
    }
}

impl From<String> for DocumentId {
    fn from(value: String) -> Self {
        DocumentId(value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResearchQuestion {
    pub id: QuestionId,
    pub text: String,
}

/// A verbatim excerpt of one document, owned by exactly one open code.
///
/// Offsets are character (Unicode scalar) indices into the document body,
/// half-open.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkAssignment {
    pub chunk_id: ChunkId,
    pub document_id: DocumentId,
    pub start_offset: usize,
    pub end_offset: usize,
    pub text: String,
    pub code_id: CodeId,
}

impl ChunkAssignment {
    pub fn overlaps(&self, document_id: &DocumentId, start: usize, end: usize) -> bool {
        &self.document_id == document_id && self.start_offset < end && start < self.end_offset
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenCode {
    pub id: CodeId,
    pub name: String,
    pub chunk_ids: Vec<ChunkId>,
    pub provenance: Provenance,
    pub subtheme_id: Option<SubthemeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubTheme {
    pub id: SubthemeId,
    pub name: String,
    pub code_ids: Vec<CodeId>,
    pub provenance: Provenance,
    pub theme_id: Option<ThemeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Theme {
    pub id: ThemeId,
    pub name: String,
    pub description: String,
    pub subtheme_ids: Vec<SubthemeId>,
    pub provenance: Provenance,
    #[serde(default)]
    pub research_question_ids: Vec<QuestionId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Confidence {
    MostConfident,
    LessConfident,
    Ambiguous,
}

impl Confidence {
    pub fn label(self) -> &'static str {
        match self {
            Confidence::MostConfident => "most confident",
            Confidence::LessConfident => "less confident",
            Confidence::Ambiguous => "ambiguous",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CritiqueEntry {
    pub unit_id: String,
    pub confidence: Confidence,
    pub rationale: String,
}

/// "What the LLM did" plus a per-unit self-critique for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Nudge {
    pub stage: Stage,
    pub what_llm_did: String,
    pub self_critique: Vec<CritiqueEntry>,
}

impl Nudge {
    pub fn confidence_of(&self, unit_id: &str) -> Option<Confidence> {
        self.self_critique
            .iter()
            .find(|e| e.unit_id == unit_id)
            .map(|e| e.confidence)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    #[default]
    Analyst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Memo {
    pub id: MemoId,
    pub stage: Stage,
    pub text: String,
    pub created_at: Timestamp,
    pub author: Author,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptParameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_of_codes: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: PromptId,
    pub stage: Stage,
    pub user_prompt_text: String,
    pub parameters: PromptParameters,
    pub issued_at: Timestamp,
    pub applied: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedVersion {
    pub version_id: VersionId,
    pub seq_at_save: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub saved_at: Timestamp,
}

/// Reference from a key finding to a unit of the hierarchy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "level", content = "id", rename_all = "snake_case")]
pub enum UnitRef {
    Theme(ThemeId),
    Subtheme(SubthemeId),
    Code(CodeId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub summary_text: String,
    pub supporting_unit_ids: Vec<UnitRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub research_question_id: Option<QuestionId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyFindings {
    pub findings: Vec<Finding>,
    /// Themes that no finding supports, listed explicitly.
    #[serde(default)]
    pub themes_without_findings: Vec<ThemeId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodesOutput {
    pub chunks: Vec<ChunkAssignment>,
    pub codes: Vec<OpenCode>,
    pub nudge: Option<Nudge>,
    #[serde(default)]
    pub nudge_stale: bool,
    /// `None` when the model chose the number of codes.
    pub requested_codes: Option<u32>,
    #[serde(default)]
    pub warnings: Vec<String>,
    pub template_version: String,
}

impl CodesOutput {
    pub fn code(&self, id: &CodeId) -> Option<&OpenCode> {
        self.codes.iter().find(|c| &c.id == id)
    }

    pub fn chunk(&self, id: &ChunkId) -> Option<&ChunkAssignment> {
        self.chunks.iter().find(|c| &c.chunk_id == id)
    }

    pub fn chunks_of<'a>(
        &'a self,
        code: &'a OpenCode,
    ) -> impl Iterator<Item = &'a ChunkAssignment> + 'a {
        code.chunk_ids.iter().filter_map(move |id| self.chunk(id))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubthemesOutput {
    pub subthemes: Vec<SubTheme>,
    pub ungrouped_code_ids: Vec<CodeId>,
    pub nudge: Option<Nudge>,
    #[serde(default)]
    pub nudge_stale: bool,
    pub stale: bool,
    pub template_version: String,
}

impl SubthemesOutput {
    pub fn subtheme(&self, id: &SubthemeId) -> Option<&SubTheme> {
        self.subthemes.iter().find(|s| &s.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThemesOutput {
    pub themes: Vec<Theme>,
    pub ungrouped_subtheme_ids: Vec<SubthemeId>,
    pub nudge: Option<Nudge>,
    #[serde(default)]
    pub nudge_stale: bool,
    pub stale: bool,
    pub template_version: String,
}

impl ThemesOutput {
    pub fn theme(&self, id: &ThemeId) -> Option<&Theme> {
        self.themes.iter().find(|t| &t.id == id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryOutput {
    pub key_findings: KeyFindings,
    pub stale: bool,
    pub template_version: String,
}

/// Committed outputs of every stage, plus the counters used to mint unit ids.
///
/// A stage is either absent or complete; partial stages are never stored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageOutputs {
    pub codes: Option<CodesOutput>,
    pub subthemes: Option<SubthemesOutput>,
    pub themes: Option<ThemesOutput>,
    pub summary: Option<SummaryOutput>,
    pub counters: IdCounters,
}

impl StageOutputs {
    pub fn is_committed(&self, stage: Stage) -> bool {
        match stage {
            Stage::Codes => self.codes.is_some(),
            Stage::Subthemes => self.subthemes.is_some(),
            Stage::Themes => self.themes.is_some(),
            Stage::Summary => self.summary.is_some(),
        }
    }

    /// Whether a committed stage has been invalidated by an upstream change.
    pub fn is_stale(&self, stage: Stage) -> bool {
        match stage {
            Stage::Codes => false,
            Stage::Subthemes => self.subthemes.as_ref().is_some_and(|s| s.stale),
            Stage::Themes => self.themes.as_ref().is_some_and(|t| t.stale),
            Stage::Summary => self.summary.as_ref().is_some_and(|s| s.stale),
        }
    }

    pub fn mark_stale(&mut self, stage: Stage) {
        match stage {
            Stage::Codes => {}
            Stage::Subthemes => {
                if let Some(s) = self.subthemes.as_mut() {
                    s.stale = true;
                }
            }
            Stage::Themes => {
                if let Some(t) = self.themes.as_mut() {
                    t.stale = true;
                }
            }
            Stage::Summary => {
                if let Some(s) = self.summary.as_mut() {
                    s.stale = true;
                }
            }
        }
    }

    pub fn mark_downstream_stale(&mut self, stage: Stage) {
        for s in stage.downstream() {
            self.mark_stale(s);
        }
    }

    pub fn nudge(&self, stage: Stage) -> Option<&Nudge> {
        match stage {
            Stage::Codes => self.codes.as_ref().and_then(|c| c.nudge.as_ref()),
            Stage::Subthemes => self.subthemes.as_ref().and_then(|c| c.nudge.as_ref()),
            Stage::Themes => self.themes.as_ref().and_then(|c| c.nudge.as_ref()),
            Stage::Summary => None,
        }
    }

    pub fn codes(&self) -> &[OpenCode] {
        self.codes.as_ref().map_or(&[], |c| &c.codes)
    }

    pub fn chunks(&self) -> &[ChunkAssignment] {
        self.codes.as_ref().map_or(&[], |c| &c.chunks)
    }

    pub fn subthemes(&self) -> &[SubTheme] {
        self.subthemes.as_ref().map_or(&[], |s| &s.subthemes)
    }

    pub fn themes(&self) -> &[Theme] {
        self.themes.as_ref().map_or(&[], |t| &t.themes)
    }

    /// Unit ids of a stage, in display order.
    pub fn unit_ids(&self, stage: Stage) -> Vec<String> {
        match stage {
            Stage::Codes => self.codes().iter().map(|c| c.id.0.clone()).collect(),
            Stage::Subthemes => self.subthemes().iter().map(|s| s.id.0.clone()).collect(),
            Stage::Themes => self.themes().iter().map(|t| t.id.0.clone()).collect(),
            Stage::Summary => Vec::new(),
        }
    }
}

/// Sampling and template settings fixed when a session is created.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSettings {
    pub template_version: String,
    pub provider_kind: String,
    pub model_name: String,
    pub reasoning_effort: String,
    pub temperature: f64,
}

/// Root aggregate of one analysis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSession {
    pub schema_version: u32,
    pub id: SessionId,
    pub created_at: Timestamp,
    pub settings: SessionSettings,
    pub documents: Vec<SourceDocument>,
    pub research_questions: Vec<ResearchQuestion>,
    pub stage_outputs: StageOutputs,
    pub memos: Vec<Memo>,
    pub prompt_records: Vec<PromptRecord>,
    pub coverage_report: Option<CoverageReport>,
    pub saved_versions: Vec<SavedVersion>,
    /// Sequence number of the last audit event folded into this state.
    pub last_seq: u64,
}

impl AnalysisSession {
    pub fn document(&self, id: &DocumentId) -> Option<&SourceDocument> {
        self.documents.iter().find(|d| &d.id == id)
    }

    pub fn question(&self, id: &QuestionId) -> Option<&ResearchQuestion> {
        self.research_questions.iter().find(|q| &q.id == id)
    }

    pub fn prompt(&self, id: &PromptId) -> Option<&PromptRecord> {
        self.prompt_records.iter().find(|p| &p.id == id)
    }

    pub fn version(&self, id: &VersionId) -> Option<&SavedVersion> {
        self.saved_versions.iter().find(|v| &v.version_id == id)
    }

    pub fn memos_for(&self, stage: Stage) -> impl Iterator<Item = &Memo> {
        self.memos.iter().filter(move |m| m.stage == stage)
    }

    /// Session document in its persisted form.
    pub fn to_document(&self) -> String {
        serde_json::to_string_pretty(self).expect("session serializes")
    }

    pub fn from_document(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}
