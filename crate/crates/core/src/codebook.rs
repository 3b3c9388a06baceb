//! Codebook export: assembly from a replayed session and rendering.

use std::fmt::Write as _;
use std::io::Write as _;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

use crate::audit::{AuditEvent, EditApplied, EventKind, MemoAdded, PromptIssued, StageCommitted};
use crate::clock::Timestamp;
use crate::error::{Error, Result};
use crate::hierarchy::Mutation;
use crate::ids::{CodeId, DocumentId, PromptId, QuestionId, SessionId, SubthemeId, ThemeId};
use crate::model::{
    AnalysisSession, Confidence, KeyFindings, Memo, Nudge, OpenCode, PromptRecord, Provenance,
    ResearchQuestion, SavedVersion, Stage, StageOutputs, SubTheme, UnitRef,
};
use crate::theme_map;

pub const CODEBOOK_FORMAT: &str = "qdachain-codebook";
pub const CODEBOOK_SCHEMA_VERSION: u32 = 1;
pub const PRINTABLE_HEADER: &str = "<!-- qdachain printable codebook v1 -->";
pub const MAX_QUOTES_PER_CODE: usize = 3;

/// Section headings of the printable document, in order.
pub const SECTION_HEADINGS: [&str; 4] = [
    "## 1. Key Finding Summary",
    "## 2. Theme Map & Primary Codebook",
    "## 3. Codebook Development Trajectory",
    "## 4. Disclaimer",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderFormat {
    Structured,
    Printable,
}

impl RenderFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            RenderFormat::Structured => "structured",
            RenderFormat::Printable => "printable",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "structured" | "json" => Some(RenderFormat::Structured),
            "printable" | "markdown" | "md" => Some(RenderFormat::Printable),
            _ => None,
        }
    }

    pub fn content_type(self) -> &'static str {
        match self {
            RenderFormat::Structured => "application/json",
            RenderFormat::Printable => "text/markdown; charset=utf-8",
        }
    }
}

/// A verbatim chunk with its location in the source document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quote {
    pub document_id: DocumentId,
    pub start: usize,
    pub end: usize,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookCode {
    pub id: CodeId,
    pub name: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    pub chunk_count: usize,
    pub quotes: Vec<Quote>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSubtheme {
    pub id: SubthemeId,
    pub name: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    pub codes: Vec<CodebookCode>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookTheme {
    pub id: ThemeId,
    pub name: String,
    pub description: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<Confidence>,
    pub research_question_ids: Vec<QuestionId>,
    pub subthemes: Vec<CodebookSubtheme>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrimaryCodebook {
    pub themes: Vec<CodebookTheme>,
    pub ungrouped_subthemes: Vec<CodebookSubtheme>,
    pub ungrouped_codes: Vec<CodebookCode>,
}

impl PrimaryCodebook {
    pub fn quotes(&self) -> impl Iterator<Item = &Quote> {
        let grouped = self
            .themes
            .iter()
            .flat_map(|t| &t.subthemes)
            .chain(&self.ungrouped_subthemes)
            .flat_map(|s| &s.codes);
        grouped.chain(&self.ungrouped_codes).flat_map(|c| &c.quotes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSummary {
    pub id: String,
    pub name: String,
    pub provenance: Provenance,
}

/// One step of the codebook's development, in trail order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "entry", rename_all = "snake_case")]
pub enum TrajectoryEntry {
    StageSnapshot {
        seq: u64,
        timestamp: Timestamp,
        stage: Stage,
        regeneration: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        prompt_id: Option<PromptId>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        number_of_codes: Option<u32>,
        units: Vec<UnitSummary>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        finding_count: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nudge: Option<Nudge>,
    },
    Nudge {
        seq: u64,
        timestamp: Timestamp,
        nudge: Nudge,
    },
    Prompt {
        seq: u64,
        record: PromptRecord,
    },
    Memo {
        seq: u64,
        memo: Memo,
    },
    Edit {
        seq: u64,
        timestamp: Timestamp,
        stage: Stage,
        unit_id: String,
        operation: String,
        summary: String,
    },
}

impl TrajectoryEntry {
    pub fn seq(&self) -> u64 {
        match self {
            TrajectoryEntry::StageSnapshot { seq, .. }
            | TrajectoryEntry::Nudge { seq, .. }
            | TrajectoryEntry::Prompt { seq, .. }
            | TrajectoryEntry::Memo { seq, .. }
            | TrajectoryEntry::Edit { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrustworthyCodebook {
    pub format: String,
    pub schema_version: u32,
    pub session_id: SessionId,
    pub session_version: SavedVersion,
    pub generated_at: Timestamp,
    pub provider_label: String,
    pub research_questions: Vec<ResearchQuestion>,
    pub key_findings: KeyFindings,
    pub theme_map_dot: String,
    pub primary_codebook: PrimaryCodebook,
    pub trajectory: Vec<TrajectoryEntry>,
    pub disclaimer: String,
}

impl TrustworthyCodebook {
    pub fn memos(&self) -> impl Iterator<Item = &Memo> {
        self.trajectory.iter().filter_map(|e| match e {
            TrajectoryEntry::Memo { memo, .. } => Some(memo),
            _ => None,
        })
    }

    pub fn prompts(&self) -> impl Iterator<Item = &PromptRecord> {
        self.trajectory.iter().filter_map(|e| match e {
            TrajectoryEntry::Prompt { record, .. } => Some(record),
            _ => None,
        })
    }

    pub fn from_structured(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

pub fn disclaimer(provider_label: &str) -> String {
    format!(
        "This codebook was partially generated by {provider_label}. Every machine proposal was reviewed \
         by the analyst, who could edit, regenerate or discard it, and every quote was checked verbatim \
         against the source documents. Interpretive responsibility for the codes, themes and findings \
         rests with the analyst."
    )
}

/// Assembles the codebook of `session`, which must already be replayed to
/// the version's seq; `events` are the trail events up to that seq.
pub fn assemble(
    session: &AnalysisSession,
    events: &[AuditEvent],
    version: &SavedVersion,
    provider_label: &str,
    generated_at: Timestamp,
) -> Result<TrustworthyCodebook> {
    let outputs = &session.stage_outputs;
    let summary = match &outputs.summary {
        None => {
            return Err(Error::MissingSummary(format!(
                "no summary at {}",
                version.version_id
            )))
        }
        Some(s) if s.stale => {
            return Err(Error::MissingSummary(format!(
                "summary is stale at {}",
                version.version_id
            )))
        }
        Some(s) => s,
    };
    let graph = theme_map::build_graph(outputs)?;
    Ok(TrustworthyCodebook {
        format: CODEBOOK_FORMAT.into(),
        schema_version: CODEBOOK_SCHEMA_VERSION,
        session_id: session.id.clone(),
        session_version: version.clone(),
        generated_at,
        provider_label: provider_label.to_owned(),
        research_questions: session.research_questions.clone(),
        key_findings: summary.key_findings.clone(),
        theme_map_dot: theme_map::emit_dot(&graph),
        primary_codebook: primary_codebook(outputs),
        trajectory: trajectory(session, events, version.seq_at_save)?,
        disclaimer: disclaimer(provider_label),
    })
}

fn primary_codebook(outputs: &StageOutputs) -> PrimaryCodebook {
    let confidence =
        |stage: Stage, id: &str| outputs.nudge(stage).and_then(|n| n.confidence_of(id));
    let code_entry = |code: &OpenCode| {
        let chunks: Vec<_> = outputs
            .codes
            .as_ref()
            .map(|c| c.chunks_of(code).collect())
            .unwrap_or_default();
        CodebookCode {
            id: code.id.clone(),
            name: code.name.clone(),
            provenance: code.provenance,
            confidence: confidence(Stage::Codes, &code.id.0),
            chunk_count: chunks.len(),
            quotes: chunks
                .iter()
                .take(MAX_QUOTES_PER_CODE)
                .map(|c| Quote {
                    document_id: c.document_id.clone(),
                    start: c.start_offset,
                    end: c.end_offset,
                    text: c.text.clone(),
                })
                .collect(),
        }
    };
    let subtheme_entry = |sub: &SubTheme| CodebookSubtheme {
        id: sub.id.clone(),
        name: sub.name.clone(),
        provenance: sub.provenance,
        confidence: confidence(Stage::Subthemes, &sub.id.0),
        codes: sub
            .code_ids
            .iter()
            .filter_map(|id| outputs.codes().iter().find(|c| &c.id == id))
            .map(code_entry)
            .collect(),
    };
    let find_sub = |id: &SubthemeId| outputs.subthemes().iter().find(|s| &s.id == id);
    PrimaryCodebook {
        themes: outputs
            .themes()
            .iter()
            .map(|t| CodebookTheme {
                id: t.id.clone(),
                name: t.name.clone(),
                description: t.description.clone(),
                provenance: t.provenance,
                confidence: confidence(Stage::Themes, &t.id.0),
                research_question_ids: t.research_question_ids.clone(),
                subthemes: t
                    .subtheme_ids
                    .iter()
                    .filter_map(find_sub)
                    .map(subtheme_entry)
                    .collect(),
            })
            .collect(),
        ungrouped_subthemes: outputs
            .subthemes()
            .iter()
            .filter(|s| s.theme_id.is_none())
            .map(subtheme_entry)
            .collect(),
        ungrouped_codes: outputs
            .codes()
            .iter()
            .filter(|c| c.subtheme_id.is_none())
            .map(code_entry)
            .collect(),
    }
}

fn unit_summaries(outputs: &StageOutputs, stage: Stage) -> Vec<UnitSummary> {
    match stage {
        Stage::Codes => outputs
            .codes()
            .iter()
            .map(|c| UnitSummary {
                id: c.id.0.clone(),
                name: c.name.clone(),
                provenance: c.provenance,
            })
            .collect(),
        Stage::Subthemes => outputs
            .subthemes()
            .iter()
            .map(|s| UnitSummary {
                id: s.id.0.clone(),
                name: s.name.clone(),
                provenance: s.provenance,
            })
            .collect(),
        Stage::Themes => outputs
            .themes()
            .iter()
            .map(|t| UnitSummary {
                id: t.id.0.clone(),
                name: t.name.clone(),
                provenance: t.provenance,
            })
            .collect(),
        Stage::Summary => Vec::new(),
    }
}

fn edit_summary(edit: &EditApplied) -> String {
    let unit = &edit.unit_id;
    match &edit.mutation {
        Mutation::Rename { name, .. } => match &edit.outcome.previous_name {
            Some(prev) => format!("renamed {unit} from {prev:?} to {name:?}"),
            None => format!("renamed {unit} to {name:?}"),
        },
        Mutation::AddChunk { text, .. } => format!("added chunk {text:?} to {unit}"),
        Mutation::RemoveChunk { chunk_id } => format!("removed {chunk_id} from {unit}"),
        Mutation::AddUnit { name, .. } => match &edit.outcome.created_unit_id {
            Some(id) => format!("added {} {id} {name:?}", edit.stage),
            None => format!("added {} {name:?}", edit.stage),
        },
        Mutation::DeleteUnit { cascade } => {
            let name = edit
                .outcome
                .tombstone
                .as_ref()
                .map(|t| t.name.as_str())
                .unwrap_or("");
            if *cascade {
                format!("deleted {unit} {name:?} with its children")
            } else {
                format!("deleted {unit} {name:?}")
            }
        }
        Mutation::ReassignParent { parent_id } => match parent_id {
            Some(p) => format!("moved {unit} under {p}"),
            None => format!("moved {unit} to ungrouped"),
        },
    }
}

/// Trajectory entries for events up to `up_to`, interleaved in seq order.
pub fn trajectory(
    session: &AnalysisSession,
    events: &[AuditEvent],
    up_to: u64,
) -> Result<Vec<TrajectoryEntry>> {
    let mut entries = Vec::new();
    for event in events.iter().take_while(|e| e.seq <= up_to) {
        match event.kind {
            EventKind::StageCommitted | EventKind::Regeneration => {
                let commit: StageCommitted = event.payload_as()?;
                if commit.part == "nudge" {
                    if let Some(nudge) = commit.outputs.nudge(commit.stage) {
                        entries.push(TrajectoryEntry::Nudge {
                            seq: event.seq,
                            timestamp: event.timestamp,
                            nudge: nudge.clone(),
                        });
                    }
                    continue;
                }
                let number_of_codes = match commit.stage {
                    Stage::Codes => commit.outputs.codes.as_ref().map(|c| c.codes.len() as u32),
                    _ => None,
                };
                let finding_count = commit
                    .outputs
                    .summary
                    .as_ref()
                    .map(|s| s.key_findings.findings.len());
                entries.push(TrajectoryEntry::StageSnapshot {
                    seq: event.seq,
                    timestamp: event.timestamp,
                    stage: commit.stage,
                    regeneration: event.kind == EventKind::Regeneration,
                    prompt_id: commit.prompt_id,
                    number_of_codes,
                    units: unit_summaries(&commit.outputs, commit.stage),
                    finding_count,
                    nudge: commit.outputs.nudge(commit.stage).cloned(),
                });
            }
            EventKind::PromptIssued => {
                let issued: PromptIssued = event.payload_as()?;
                // The replayed record carries the applied flag as of the version.
                let record = session
                    .prompt(&issued.prompt.id)
                    .cloned()
                    .unwrap_or(issued.prompt);
                entries.push(TrajectoryEntry::Prompt {
                    seq: event.seq,
                    record,
                });
            }
            EventKind::MemoAdded => {
                let added: MemoAdded = event.payload_as()?;
                entries.push(TrajectoryEntry::Memo {
                    seq: event.seq,
                    memo: added.memo,
                });
            }
            EventKind::Edit => {
                let edit: EditApplied = event.payload_as()?;
                entries.push(TrajectoryEntry::Edit {
                    seq: event.seq,
                    timestamp: event.timestamp,
                    stage: edit.stage,
                    unit_id: edit.unit_id.clone(),
                    operation: edit.mutation.name().into(),
                    summary: edit_summary(&edit),
                });
            }
            _ => {}
        }
    }
    Ok(entries)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderOptions {
    /// Embed an SVG of the theme map when graphviz `dot` is available.
    pub embed_svg: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { embed_svg: true }
    }
}

pub fn render(codebook: &TrustworthyCodebook, format: RenderFormat) -> String {
    render_with(codebook, format, RenderOptions::default())
}

pub fn render_with(
    codebook: &TrustworthyCodebook,
    format: RenderFormat,
    options: RenderOptions,
) -> String {
    match format {
        RenderFormat::Structured => {
            serde_json::to_string_pretty(codebook).expect("codebook serializes")
        }
        RenderFormat::Printable => printable(codebook, options),
    }
}

/// Renders DOT to SVG with graphviz, if it is installed.
fn render_svg(dot: &str) -> Option<String> {
    let mut child = Command::new("dot")
        .arg("-Tsvg")
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .ok()?;
    child.stdin.take()?.write_all(dot.as_bytes()).ok()?;
    let out = child.wait_with_output().ok()?;
    if !out.status.success() {
        return None;
    }
    let svg = String::from_utf8(out.stdout).ok()?;
    // Drop the XML prolog so the image embeds inline.
    Some(svg[svg.find("<svg").unwrap_or(0)..].trim_end().to_owned())
}

/// Printable reference for a quote: ``quote `doc@start..end`: "text"``.
pub fn quote_line(q: &Quote) -> String {
    format!(
        "quote `{}@{}..{}`: {}",
        q.document_id,
        q.start,
        q.end,
        serde_json::to_string(&q.text).expect("string serializes")
    )
}

fn unit_tag(provenance: Provenance, confidence: Option<Confidence>) -> String {
    match confidence {
        Some(c) => format!("{}, {}", provenance.label(), c.label()),
        None => provenance.label().to_owned(),
    }
}

fn printable(cb: &TrustworthyCodebook, options: RenderOptions) -> String {
    let mut out = String::new();
    let theme_name = |id: &ThemeId| {
        cb.primary_codebook
            .themes
            .iter()
            .find(|t| &t.id == id)
            .map(|t| t.name.clone())
    };
    let subthemes = || {
        cb.primary_codebook
            .themes
            .iter()
            .flat_map(|t| &t.subthemes)
            .chain(&cb.primary_codebook.ungrouped_subthemes)
    };
    let codes = || {
        subthemes()
            .flat_map(|s| &s.codes)
            .chain(&cb.primary_codebook.ungrouped_codes)
    };
    let ref_label = |r: &UnitRef| match r {
        UnitRef::Theme(id) => format!("{} (`{id}`)", theme_name(id).unwrap_or_default()),
        UnitRef::Subtheme(id) => format!(
            "{} (`{id}`)",
            subthemes()
                .find(|s| &s.id == id)
                .map(|s| s.name.as_str())
                .unwrap_or("")
        ),
        UnitRef::Code(id) => format!(
            "{} (`{id}`)",
            codes()
                .find(|c| &c.id == id)
                .map(|c| c.name.as_str())
                .unwrap_or("")
        ),
    };

    let _ = writeln!(out, "{PRINTABLE_HEADER}");
    let _ = writeln!(out, "# Trustworthy Codebook\n");
    let v = &cb.session_version;
    let _ = writeln!(out, "- Session: `{}`", cb.session_id);
    match &v.label {
        Some(label) => {
            let _ = writeln!(
                out,
                "- Version: `{}` ({label}), saved {} at seq {}",
                v.version_id,
                v.saved_at.to_rfc3339(),
                v.seq_at_save
            );
        }
        None => {
            let _ = writeln!(
                out,
                "- Version: `{}`, saved {} at seq {}",
                v.version_id,
                v.saved_at.to_rfc3339(),
                v.seq_at_save
            );
        }
    }
    let _ = writeln!(out, "- Generated: {}", cb.generated_at.to_rfc3339());
    let _ = writeln!(out, "- Model: {}\n", cb.provider_label);

    let _ = writeln!(out, "{}\n", SECTION_HEADINGS[0]);
    if !cb.research_questions.is_empty() {
        out.push_str("Research questions:\n\n");
        for q in &cb.research_questions {
            let _ = writeln!(out, "- `{}`: {}", q.id, q.text);
        }
        out.push('\n');
    }
    if cb.key_findings.findings.is_empty() {
        out.push_str("_No key findings were recorded._\n\n");
    }
    for (i, f) in cb.key_findings.findings.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, f.summary_text);
        let support: Vec<String> = f.supporting_unit_ids.iter().map(ref_label).collect();
        let _ = writeln!(out, "   - Supported by: {}", support.join(", "));
        if let Some(q) = &f.research_question_id {
            let _ = writeln!(out, "   - Research question: `{q}`");
        }
    }
    if !cb.key_findings.findings.is_empty() {
        out.push('\n');
    }
    if !cb.key_findings.themes_without_findings.is_empty() {
        let names: Vec<String> = cb
            .key_findings
            .themes_without_findings
            .iter()
            .map(|id| ref_label(&UnitRef::Theme(id.clone())))
            .collect();
        let _ = writeln!(out, "Themes without findings: {}\n", names.join(", "));
    }

    let _ = writeln!(out, "{}\n", SECTION_HEADINGS[1]);
    out.push_str("### Theme map\n\n```dot\n");
    out.push_str(&cb.theme_map_dot);
    out.push_str("```\n\n");
    if options.embed_svg {
        if let Some(svg) = render_svg(&cb.theme_map_dot) {
            out.push_str(&svg);
            out.push_str("\n\n");
        }
    }
    out.push_str("### Primary codebook\n\n");
    let write_code = |out: &mut String, code: &CodebookCode, indent: &str| {
        let _ = writeln!(
            out,
            "{indent}- **Code: {}** (`{}`, {}, {} chunk(s))",
            code.name,
            code.id,
            unit_tag(code.provenance, code.confidence),
            code.chunk_count
        );
        for q in &code.quotes {
            let _ = writeln!(out, "{indent}  - {}", quote_line(q));
        }
    };
    let write_subtheme = |out: &mut String, sub: &CodebookSubtheme| {
        let _ = writeln!(
            out,
            "- **Subtheme: {}** (`{}`, {})",
            sub.name,
            sub.id,
            unit_tag(sub.provenance, sub.confidence)
        );
        for code in &sub.codes {
            write_code(out, code, "  ");
        }
    };
    if cb.primary_codebook.themes.is_empty() {
        out.push_str("_The hierarchy has no themes._\n\n");
    }
    for theme in &cb.primary_codebook.themes {
        let _ = writeln!(
            out,
            "#### Theme: {} (`{}`, {})\n",
            theme.name,
            theme.id,
            unit_tag(theme.provenance, theme.confidence)
        );
        if !theme.description.is_empty() {
            let _ = writeln!(out, "{}\n", theme.description);
        }
        if !theme.research_question_ids.is_empty() {
            let qs: Vec<String> = theme
                .research_question_ids
                .iter()
                .map(|q| format!("`{q}`"))
                .collect();
            let _ = writeln!(out, "Research questions: {}\n", qs.join(", "));
        }
        for sub in &theme.subthemes {
            write_subtheme(&mut out, sub);
        }
        out.push('\n');
    }
    if !cb.primary_codebook.ungrouped_subthemes.is_empty() {
        out.push_str("#### Ungrouped subthemes\n\n");
        for sub in &cb.primary_codebook.ungrouped_subthemes {
            write_subtheme(&mut out, sub);
        }
        out.push('\n');
    }
    if !cb.primary_codebook.ungrouped_codes.is_empty() {
        out.push_str("#### Ungrouped codes\n\n");
        for code in &cb.primary_codebook.ungrouped_codes {
            write_code(&mut out, code, "");
        }
        out.push('\n');
    }

    let _ = writeln!(out, "{}\n", SECTION_HEADINGS[2]);
    out.push_str("### Chronology\n\n");
    if cb.trajectory.is_empty() {
        out.push_str("_No trajectory entries up to this version._\n");
    }
    for entry in &cb.trajectory {
        let _ = writeln!(out, "- {}", chronology_line(entry));
    }
    out.push_str("\n### Prompting history\n\n");
    let prompts: Vec<_> = cb.prompts().collect();
    if prompts.is_empty() {
        out.push_str("_Empty: no prompts were issued up to this version._\n");
    }
    for p in prompts {
        let codes = p
            .parameters
            .number_of_codes
            .map(|n| format!(", number of codes {n}"))
            .unwrap_or_default();
        let applied = if p.applied { "applied" } else { "not applied" };
        let _ = writeln!(
            out,
            "- `{}` ({} stage{codes}, {applied}, {}): {}",
            p.id,
            p.stage,
            p.issued_at.to_rfc3339(),
            p.user_prompt_text
        );
    }
    out.push_str("\n### Reflection memos\n\n");
    let memos: Vec<_> = cb.memos().collect();
    if memos.is_empty() {
        out.push_str("_Empty: no reflection memos were written up to this version._\n");
    }
    for m in memos {
        let _ = writeln!(
            out,
            "- `{}` ({} stage, {}): {}",
            m.id,
            m.stage,
            m.created_at.to_rfc3339(),
            m.text
        );
    }

    let _ = writeln!(out, "\n{}\n", SECTION_HEADINGS[3]);
    let _ = writeln!(out, "{}", cb.disclaimer);
    out
}

fn chronology_line(entry: &TrajectoryEntry) -> String {
    match entry {
        TrajectoryEntry::StageSnapshot {
            seq,
            timestamp,
            stage,
            regeneration,
            prompt_id,
            units,
            finding_count,
            nudge,
            ..
        } => {
            let verb = if *regeneration {
                "regenerated"
            } else {
                "generated"
            };
            let with = prompt_id
                .as_ref()
                .map(|p| format!(" with `{p}`"))
                .unwrap_or_default();
            let size = match finding_count {
                Some(n) => format!("{n} finding(s)"),
                None => format!("{} unit(s)", units.len()),
            };
            let nudge = nudge
                .as_ref()
                .map(|n| format!(" Nudge: {}", n.what_llm_did))
                .unwrap_or_default();
            format!(
                "seq {seq}, {}: {stage} {verb}{with}, {size}.{nudge}",
                timestamp.to_rfc3339()
            )
        }
        TrajectoryEntry::Nudge {
            seq,
            timestamp,
            nudge,
        } => {
            format!(
                "seq {seq}, {}: {} nudge refreshed. {}",
                timestamp.to_rfc3339(),
                nudge.stage,
                nudge.what_llm_did
            )
        }
        TrajectoryEntry::Prompt { seq, record } => {
            format!(
                "seq {seq}, {}: prompt `{}` issued for {}",
                record.issued_at.to_rfc3339(),
                record.id,
                record.stage
            )
        }
        TrajectoryEntry::Memo { seq, memo } => {
            format!(
                "seq {seq}, {}: memo `{}` on {}",
                memo.created_at.to_rfc3339(),
                memo.id,
                memo.stage
            )
        }
        TrajectoryEntry::Edit {
            seq,
            timestamp,
            summary,
            ..
        } => {
            format!("seq {seq}, {}: analyst {summary}", timestamp.to_rfc3339())
        }
    }
}
