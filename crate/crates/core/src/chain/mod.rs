//! The four-stage prompt chain: request construction and interpretation of
//! model replies.
//!
//! Everything here is pure. The engine owns the gateway calls, the locking
//! and the audit events. Model payloads refer to units by positional aliases
//! (`D1`, `C3`, `S2`, `T1`, `Q1`); ids are minted here, never taken from the
//! model.

pub mod templates;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, OffendingChunk, Result};
use crate::gateway::{ChainRequest, Schema};
use crate::hierarchy::reconcile;
use crate::ids::{CodeId, DocumentId, QuestionId, SubthemeId, ThemeId};
use crate::model::{
    AnalysisSession, ChunkAssignment, CodesOutput, Confidence, CritiqueEntry, Finding, KeyFindings,
    Nudge, OpenCode, Provenance, ResearchQuestion, Stage, StageOutputs, SubTheme, SubthemesOutput,
    SummaryOutput, Theme, ThemesOutput, UnitRef,
};
use crate::validation::{self, LocateError, NormalizedDocument};

pub use self::templates::{render, template, TEMPLATE_VERSION};

pub const NUDGE_SCHEMA_ID: &str = "nudge.v1";

pub fn schema_id(stage: Stage) -> &'static str {
    match stage {
        Stage::Codes => "codes.v1",
        Stage::Subthemes => "subthemes.v1",
        Stage::Themes => "themes.v1",
        Stage::Summary => "summary.v1",
    }
}

/// Response schemas of every chain call, keyed by schema id.
pub fn schemas() -> Vec<(&'static str, Schema)> {
    let refs = || Schema::array(Schema::non_empty_string());
    vec![
        (
            schema_id(Stage::Codes),
            Schema::object([(
                "codes",
                Schema::array(Schema::object([
                    ("name", Schema::non_empty_string()),
                    (
                        "chunks",
                        Schema::non_empty_array(
                            Schema::object([("text", Schema::non_empty_string())])
                                .with_optional("document", Schema::nullable(Schema::string())),
                        ),
                    ),
                ])),
            )]),
        ),
        (
            schema_id(Stage::Subthemes),
            Schema::object([(
                "subthemes",
                Schema::array(Schema::object([
                    ("name", Schema::non_empty_string()),
                    ("codes", Schema::non_empty_array(Schema::non_empty_string())),
                ])),
            )])
            .with_optional("ungrouped", refs()),
        ),
        (
            schema_id(Stage::Themes),
            Schema::object([(
                "themes",
                Schema::array(
                    Schema::object([
                        ("name", Schema::non_empty_string()),
                        ("description", Schema::string()),
                        (
                            "subthemes",
                            Schema::non_empty_array(Schema::non_empty_string()),
                        ),
                    ])
                    .with_optional("research_questions", refs()),
                ),
            )])
            .with_optional("ungrouped", refs()),
        ),
        (
            schema_id(Stage::Summary),
            Schema::object([(
                "findings",
                Schema::array(
                    Schema::object([
                        ("summary", Schema::non_empty_string()),
                        (
                            "supporting",
                            Schema::non_empty_array(Schema::non_empty_string()),
                        ),
                    ])
                    .with_optional("research_question", Schema::nullable(Schema::string())),
                ),
            )]),
        ),
        (
            NUDGE_SCHEMA_ID,
            Schema::object([
                ("what_llm_did", Schema::non_empty_string()),
                (
                    "self_critique",
                    Schema::array(Schema::object([
                        ("unit", Schema::non_empty_string()),
                        (
                            "confidence",
                            Schema::one_of(&["most_confident", "less_confident", "ambiguous"]),
                        ),
                        ("rationale", Schema::string()),
                    ])),
                ),
            ]),
        ),
    ]
}

/// Per-run stage parameters.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageParameters {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub number_of_codes: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_prompt: Option<String>,
}

impl StageParameters {
    pub fn validate(&self, stage: Stage) -> Result<()> {
        match self.number_of_codes {
            Some(_) if stage != Stage::Codes => Err(Error::Precondition(
                "number_of_codes applies only to the codes stage".into(),
            )),
            Some(0) => Err(Error::Precondition(
                "number_of_codes must be positive".into(),
            )),
            _ => Ok(()),
        }
    }

    fn prompt(&self) -> Option<&str> {
        self.user_prompt
            .as_deref()
            .map(str::trim)
            .filter(|p| !p.is_empty())
    }
}

/// Checks that `stage` may run on `outputs`.
pub fn check_preconditions(session: &AnalysisSession, stage: Stage) -> Result<()> {
    let outputs = &session.stage_outputs;
    if session.documents.is_empty() {
        return Err(Error::NoDocuments);
    }
    if let Some(upstream) = stage.upstream() {
        if !outputs.is_committed(upstream) {
            return Err(Error::StageNotCommitted { stage: upstream });
        }
        if outputs.is_stale(upstream) {
            return Err(Error::StaleUpstream { stage, upstream });
        }
    }
    let empty = match stage {
        Stage::Codes => false,
        Stage::Subthemes => outputs.codes().is_empty(),
        Stage::Themes => outputs.subthemes().is_empty(),
        Stage::Summary => outputs.themes().is_empty(),
    };
    if empty {
        let upstream = stage.upstream().expect("non-codes stage");
        return Err(Error::Precondition(format!(
            "the {upstream} stage has no units; {stage} cannot run"
        )));
    }
    Ok(())
}

fn alias(prefix: char, index: usize) -> String {
    format!("{prefix}{}", index + 1)
}

/// Resolves a positional alias such as `C3` to index 2.
fn resolve(prefix: char, reference: &str, len: usize) -> Option<usize> {
    let rest = reference.trim().strip_prefix(prefix)?;
    let n: usize = rest.parse().ok()?;
    (1..=len).contains(&n).then(|| n - 1)
}

fn questions_payload(questions: &[ResearchQuestion]) -> Value {
    Value::Array(
        questions
            .iter()
            .enumerate()
            .map(|(i, q)| json!({ "ref": alias('Q', i), "text": q.text }))
            .collect(),
    )
}

fn questions_text(questions: &[ResearchQuestion]) -> String {
    if questions.is_empty() {
        return "(none)".into();
    }
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}: {}", alias('Q', i), q.text))
        .collect::<Vec<_>>()
        .join("\n")
}

fn pretty(value: &Value) -> String {
    serde_json::to_string_pretty(value).expect("json serializes")
}

fn system_prompt(
    kind: Option<Stage>,
    params: &StageParameters,
    questions: &[ResearchQuestion],
    data: &Value,
    upstream: &Value,
) -> String {
    let count = params
        .number_of_codes
        .map_or_else(|| "an appropriate number of".to_owned(), |n| n.to_string());
    render(
        template(kind),
        &[
            ("data", &pretty(data)),
            ("number_of_codes", &count),
            ("user_prompt", params.prompt().unwrap_or("(none)")),
            ("research_questions", &questions_text(questions)),
            ("upstream_output", &pretty(upstream)),
        ],
    )
}

fn user_prompt_value(params: &StageParameters) -> Value {
    params
        .prompt()
        .map_or(Value::Null, |p| Value::String(p.to_owned()))
}

/// Codes that survive a codes-stage regeneration.
fn preserved_codes(outputs: &StageOutputs) -> Vec<&OpenCode> {
    outputs
        .codes()
        .iter()
        .filter(|c| c.provenance == Provenance::UserEdited)
        .collect()
}

pub fn build_request(
    session: &AnalysisSession,
    stage: Stage,
    params: &StageParameters,
) -> ChainRequest {
    let outputs = &session.stage_outputs;
    let questions = &session.research_questions;
    let (payload, data, upstream) = match stage {
        Stage::Codes => {
            let doc_alias: HashMap<&DocumentId, String> = session
                .documents
                .iter()
                .enumerate()
                .map(|(i, d)| (&d.id, alias('D', i)))
                .collect();
            let documents: Value = session
                .documents
                .iter()
                .enumerate()
                .map(|(i, d)| json!({ "ref": alias('D', i), "title": d.title, "text": d.body }))
                .collect();
            let codes = outputs.codes.as_ref();
            let fixed: Value = preserved_codes(outputs)
                .into_iter()
                .flat_map(|code| {
                    let doc_alias = &doc_alias;
                    codes
                        .into_iter()
                        .flat_map(move |c| c.chunks_of(code))
                        .map(move |chunk| {
                            json!({
                                "document": doc_alias.get(&chunk.document_id),
                                "start": chunk.start_offset,
                                "end": chunk.end_offset,
                                "text": chunk.text,
                                "code": code.name,
                            })
                        })
                })
                .collect();
            let payload = json!({
                "stage": stage.as_str(),
                "documents": documents,
                "number_of_codes": params.number_of_codes,
                "user_prompt": user_prompt_value(params),
                "research_questions": questions_payload(questions),
                "fixed_chunks": fixed,
            });
            (payload, documents, Value::Null)
        }
        Stage::Subthemes => {
            let codes = outputs.codes.as_ref().expect("checked by preconditions");
            let units: Value = codes
                .codes
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    json!({
                        "ref": alias('C', i),
                        "name": c.name,
                        "excerpts": codes.chunks_of(c).map(|ch| ch.text.as_str()).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let payload = json!({
                "stage": stage.as_str(),
                "codes": units,
                "user_prompt": user_prompt_value(params),
                "research_questions": questions_payload(questions),
            });
            (payload, Value::Null, units)
        }
        Stage::Themes => {
            let code_index = index_of(outputs.codes().iter().map(|c| &c.id));
            let units: Value = outputs
                .subthemes()
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    json!({
                        "ref": alias('S', i),
                        "name": s.name,
                        "codes": s.code_ids.iter().map(|c| json!({
                            "ref": alias('C', code_index[c]),
                            "name": outputs.codes()[code_index[c]].name,
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            let payload = json!({
                "stage": stage.as_str(),
                "subthemes": units,
                "user_prompt": user_prompt_value(params),
                "research_questions": questions_payload(questions),
            });
            (payload, Value::Null, units)
        }
        Stage::Summary => {
            let payload = summary_payload(session, params);
            let upstream = json!({
                "themes": payload["themes"],
                "subthemes": payload["subthemes"],
                "codes": payload["codes"],
            });
            (payload, Value::Null, upstream)
        }
    };
    ChainRequest {
        stage,
        system_prompt: system_prompt(Some(stage), params, questions, &data, &upstream),
        payload,
        schema_id: schema_id(stage).to_owned(),
    }
}

fn index_of<'a, T: std::hash::Hash + Eq + 'a>(
    ids: impl Iterator<Item = &'a T>,
) -> HashMap<&'a T, usize> {
    ids.enumerate().map(|(i, id)| (id, i)).collect()
}

fn summary_payload(session: &AnalysisSession, params: &StageParameters) -> Value {
    let outputs = &session.stage_outputs;
    let code_index = index_of(outputs.codes().iter().map(|c| &c.id));
    let sub_index = index_of(outputs.subthemes().iter().map(|s| &s.id));
    let question_index = index_of(session.research_questions.iter().map(|q| &q.id));
    let themes: Vec<Value> = outputs
        .themes()
        .iter()
        .enumerate()
        .map(|(i, t)| {
            json!({
                "ref": alias('T', i),
                "name": t.name,
                "description": t.description,
                "subthemes": t.subtheme_ids.iter().map(|s| alias('S', sub_index[s])).collect::<Vec<_>>(),
                "research_questions": t.research_question_ids.iter()
                    .filter_map(|q| question_index.get(q).map(|&i| alias('Q', i)))
                    .collect::<Vec<_>>(),
            })
        })
        .collect();
    let subthemes: Vec<Value> = outputs
        .subthemes()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            json!({
                "ref": alias('S', i),
                "name": s.name,
                "codes": s.code_ids.iter().map(|c| alias('C', code_index[c])).collect::<Vec<_>>(),
            })
        })
        .collect();
    let codes: Vec<Value> = outputs
        .codes()
        .iter()
        .enumerate()
        .map(|(i, c)| json!({ "ref": alias('C', i), "name": c.name }))
        .collect();
    let documents: Vec<Value> = session
        .documents
        .iter()
        .enumerate()
        .map(|(i, d)| json!({ "ref": alias('D', i), "title": d.title, "word_count": d.word_count }))
        .collect();
    json!({
        "stage": Stage::Summary.as_str(),
        "themes": themes,
        "subthemes": subthemes,
        "codes": codes,
        "documents": documents,
        "user_prompt": user_prompt_value(params),
        "research_questions": questions_payload(&session.research_questions),
    })
}

#[derive(Deserialize)]
struct CodesReply {
    codes: Vec<CodeReply>,
}

#[derive(Deserialize)]
struct CodeReply {
    name: String,
    chunks: Vec<ChunkReply>,
}

#[derive(Deserialize)]
struct ChunkReply {
    #[serde(default)]
    document: Option<String>,
    text: String,
}

#[derive(Deserialize)]
struct GroupsReply {
    #[serde(default, alias = "subthemes", alias = "themes")]
    groups: Vec<GroupReply>,
    #[serde(default)]
    ungrouped: Vec<String>,
}

#[derive(Deserialize)]
struct GroupReply {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(alias = "codes", alias = "subthemes")]
    members: Vec<String>,
    #[serde(default)]
    research_questions: Vec<String>,
}

#[derive(Deserialize)]
struct SummaryReply {
    findings: Vec<FindingReply>,
}

#[derive(Deserialize)]
struct FindingReply {
    summary: String,
    supporting: Vec<String>,
    #[serde(default)]
    research_question: Option<String>,
}

#[derive(Deserialize)]
struct NudgeReply {
    what_llm_did: String,
    self_critique: Vec<CritiqueReply>,
}

#[derive(Deserialize)]
struct CritiqueReply {
    unit: String,
    confidence: Confidence,
    #[serde(default)]
    rationale: String,
}

fn parse<T: for<'de> Deserialize<'de>>(stage: Stage, parsed: &Value) -> Result<T> {
    // The gateway has already validated the shape, so a failure here is a
    // schema/struct mismatch rather than bad model output.
    serde_json::from_value(parsed.clone()).map_err(|e| {
        Error::Precondition(format!("{stage} response does not match its schema: {e}"))
    })
}

/// Result of interpreting one stage reply.
#[derive(Debug, Clone, PartialEq)]
pub struct StageDraft {
    /// Complete outputs with the stage replaced and everything downstream
    /// marked stale and pruned. The stage's nudge is still empty.
    pub outputs: StageOutputs,
    pub warnings: Vec<String>,
}

pub fn interpret(
    session: &AnalysisSession,
    stage: Stage,
    params: &StageParameters,
    parsed: &Value,
) -> Result<StageDraft> {
    let mut outputs = session.stage_outputs.clone();
    let mut warnings = Vec::new();
    match stage {
        Stage::Codes => interpret_codes(
            session,
            params,
            parse(stage, parsed)?,
            &mut outputs,
            &mut warnings,
        )?,
        Stage::Subthemes => interpret_subthemes(parse(stage, parsed)?, &mut outputs)?,
        Stage::Themes => interpret_themes(session, parse(stage, parsed)?, &mut outputs)?,
        Stage::Summary => interpret_summary(session, parse(stage, parsed)?, &mut outputs)?,
    }
    outputs.mark_downstream_stale(stage);
    reconcile(&mut outputs);
    Ok(StageDraft { outputs, warnings })
}

fn interpret_codes(
    session: &AnalysisSession,
    params: &StageParameters,
    reply: CodesReply,
    outputs: &mut StageOutputs,
    warnings: &mut Vec<String>,
) -> Result<()> {
    let documents = &session.documents;
    let normalized: Vec<NormalizedDocument> = documents
        .iter()
        .map(|d| NormalizedDocument::new(&d.body))
        .collect();

    let kept_codes: Vec<OpenCode> = preserved_codes(outputs).into_iter().cloned().collect();
    let kept_ids: HashSet<&CodeId> = kept_codes.iter().map(|c| &c.id).collect();
    let kept_chunks: Vec<ChunkAssignment> = outputs
        .chunks()
        .iter()
        .filter(|c| kept_ids.contains(&c.code_id))
        .cloned()
        .collect();
    let mut taken: Vec<Vec<(usize, usize)>> = documents
        .iter()
        .map(|d| {
            kept_chunks
                .iter()
                .filter(|c| c.document_id == d.id)
                .map(|c| (c.start_offset, c.end_offset))
                .collect()
        })
        .collect();

    let mut offending = Vec::new();
    let mut located: Vec<(String, Vec<(usize, usize, usize)>)> = Vec::new();
    for code in &reply.codes {
        let mut spans = Vec::new();
        for chunk in &code.chunks {
            let offend = |reason: &str| OffendingChunk {
                code_name: code.name.clone(),
                text: chunk.text.clone(),
                reason: reason.to_owned(),
            };
            if chunk.text.trim().is_empty() {
                offending.push(offend("empty chunk"));
                continue;
            }
            let candidates: Vec<usize> = match chunk.document.as_deref() {
                Some(reference) => match resolve('D', reference, documents.len()) {
                    Some(i) => vec![i],
                    None => {
                        offending
                            .push(offend(&format!("unknown document reference `{reference}`")));
                        continue;
                    }
                },
                None => (0..documents.len()).collect(),
            };
            let mut overlap = false;
            let mut found = None;
            for d in candidates {
                match normalized[d].locate(&chunk.text, &taken[d]) {
                    Ok(span) => {
                        found = Some((d, span));
                        break;
                    }
                    Err(LocateError::Overlapping) => overlap = true,
                    Err(LocateError::NotFound) => {}
                }
            }
            match found {
                Some((d, (start, end))) => {
                    taken[d].push((start, end));
                    spans.push((d, start, end));
                }
                None if overlap => offending.push(offend("overlaps another chunk")),
                None => offending.push(offend("not a verbatim excerpt of the data")),
            }
        }
        located.push((code.name.trim().to_owned(), spans));
    }
    if !offending.is_empty() {
        return Err(Error::VerbatimViolation(offending));
    }

    let mut counters = outputs.counters.clone();
    let mut codes = kept_codes;
    let mut chunks = kept_chunks;
    for (name, spans) in located {
        let code_id = counters.next_code();
        let mut chunk_ids = Vec::with_capacity(spans.len());
        for (d, start, end) in spans {
            let doc = &documents[d];
            let chunk = ChunkAssignment {
                chunk_id: counters.next_chunk(),
                document_id: doc.id.clone(),
                start_offset: start,
                end_offset: end,
                text: validation::char_slice(&doc.body, start, end)?.to_owned(),
                code_id: code_id.clone(),
            };
            chunk_ids.push(chunk.chunk_id.clone());
            chunks.push(chunk);
        }
        codes.push(OpenCode {
            id: code_id,
            name,
            chunk_ids,
            provenance: Provenance::MachineGenerated,
            subtheme_id: None,
        });
    }
    // Belt and braces: nothing becomes visible unless it passes the check.
    for chunk in &chunks {
        let doc = documents
            .iter()
            .find(|d| d.id == chunk.document_id)
            .ok_or_else(|| Error::UnknownDocument(chunk.document_id.0.clone()))?;
        if let Err(v) = validation::verify_verbatim(doc, chunk)? {
            return Err(Error::VerbatimViolation(vec![OffendingChunk {
                code_name: chunk.code_id.0.clone(),
                text: chunk.text.clone(),
                reason: format!("diverges at position {}", v.position),
            }]));
        }
    }

    if let Some(requested) = params.number_of_codes {
        let produced = reply.codes.len();
        if produced != requested as usize {
            warnings.push(format!(
                "requested {requested} codes but the model produced {produced}"
            ));
        }
    }
    outputs.counters = counters;
    outputs.codes = Some(CodesOutput {
        chunks,
        codes,
        nudge: None,
        nudge_stale: false,
        requested_codes: params.number_of_codes,
        warnings: warnings.clone(),
        template_version: TEMPLATE_VERSION.into(),
    });
    Ok(())
}

/// Resolves group member aliases, rejecting unknown and doubly assigned units.
fn resolve_groups(prefix: char, len: usize, reply: &GroupsReply) -> Result<Vec<Vec<usize>>> {
    let mut seen = HashSet::new();
    let mut check = |reference: &str| -> Result<usize> {
        let i = resolve(prefix, reference, len)
            .ok_or_else(|| Error::HallucinatedReference(reference.trim().to_owned()))?;
        if !seen.insert(i) {
            return Err(Error::DuplicateAssignment(reference.trim().to_owned()));
        }
        Ok(i)
    };
    let groups = reply
        .groups
        .iter()
        .map(|g| {
            g.members
                .iter()
                .map(|m| check(m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    for reference in &reply.ungrouped {
        check(reference)?;
    }
    Ok(groups)
}

fn interpret_subthemes(reply: GroupsReply, outputs: &mut StageOutputs) -> Result<()> {
    let code_ids: Vec<CodeId> = outputs.codes().iter().map(|c| c.id.clone()).collect();
    let groups = resolve_groups('C', code_ids.len(), &reply)?;
    let mut counters = outputs.counters.clone();
    let subthemes = reply
        .groups
        .iter()
        .zip(groups)
        .map(|(g, members)| SubTheme {
            id: counters.next_subtheme(),
            name: g.name.trim().to_owned(),
            code_ids: members.into_iter().map(|i| code_ids[i].clone()).collect(),
            provenance: Provenance::MachineGenerated,
            theme_id: None,
        })
        .collect();
    outputs.counters = counters;
    outputs.subthemes = Some(SubthemesOutput {
        subthemes,
        ungrouped_code_ids: Vec::new(),
        nudge: None,
        nudge_stale: false,
        stale: false,
        template_version: TEMPLATE_VERSION.into(),
    });
    Ok(())
}

fn resolve_question(session: &AnalysisSession, reference: &str) -> Result<QuestionId> {
    resolve('Q', reference, session.research_questions.len())
        .map(|i| session.research_questions[i].id.clone())
        .ok_or_else(|| Error::InvalidQuestionReference(reference.trim().to_owned()))
}

fn interpret_themes(
    session: &AnalysisSession,
    reply: GroupsReply,
    outputs: &mut StageOutputs,
) -> Result<()> {
    let sub_ids: Vec<SubthemeId> = outputs.subthemes().iter().map(|s| s.id.clone()).collect();
    let groups = resolve_groups('S', sub_ids.len(), &reply)?;
    let mut counters = outputs.counters.clone();
    let mut themes = Vec::with_capacity(groups.len());
    for (g, members) in reply.groups.iter().zip(groups) {
        let mut questions = Vec::new();
        for q in &g.research_questions {
            let id = resolve_question(session, q)?;
            if !questions.contains(&id) {
                questions.push(id);
            }
        }
        themes.push(Theme {
            id: counters.next_theme(),
            name: g.name.trim().to_owned(),
            description: g.description.trim().to_owned(),
            subtheme_ids: members.into_iter().map(|i| sub_ids[i].clone()).collect(),
            provenance: Provenance::MachineGenerated,
            research_question_ids: questions,
        });
    }
    outputs.counters = counters;
    outputs.themes = Some(ThemesOutput {
        themes,
        ungrouped_subtheme_ids: Vec::new(),
        nudge: None,
        nudge_stale: false,
        stale: false,
        template_version: TEMPLATE_VERSION.into(),
    });
    Ok(())
}

fn interpret_summary(
    session: &AnalysisSession,
    reply: SummaryReply,
    outputs: &mut StageOutputs,
) -> Result<()> {
    let codes = outputs.codes();
    let subs = outputs.subthemes();
    let themes = outputs.themes();
    let mut findings = Vec::with_capacity(reply.findings.len());
    for f in &reply.findings {
        let mut supporting = Vec::with_capacity(f.supporting.len());
        for reference in &f.supporting {
            let unresolvable = || Error::UnresolvableReference(reference.trim().to_owned());
            let unit = match reference.trim().chars().next() {
                Some('T') => UnitRef::Theme(
                    themes[resolve('T', reference, themes.len()).ok_or_else(unresolvable)?]
                        .id
                        .clone(),
                ),
                Some('S') => UnitRef::Subtheme(
                    subs[resolve('S', reference, subs.len()).ok_or_else(unresolvable)?]
                        .id
                        .clone(),
                ),
                Some('C') => UnitRef::Code(
                    codes[resolve('C', reference, codes.len()).ok_or_else(unresolvable)?]
                        .id
                        .clone(),
                ),
                _ => return Err(unresolvable()),
            };
            if !supporting.contains(&unit) {
                supporting.push(unit);
            }
        }
        let research_question_id = match f.research_question.as_deref().map(str::trim) {
            None | Some("") => None,
            Some(q) => Some(resolve_question(session, q)?),
        };
        findings.push(Finding {
            summary_text: f.summary.trim().to_owned(),
            supporting_unit_ids: supporting,
            research_question_id,
        });
    }
    let themes_without_findings = themes
        .iter()
        .filter(|t| !findings.iter().any(|f| supports(outputs, f, &t.id)))
        .map(|t| t.id.clone())
        .collect();
    outputs.summary = Some(SummaryOutput {
        key_findings: KeyFindings {
            findings,
            themes_without_findings,
        },
        stale: false,
        template_version: TEMPLATE_VERSION.into(),
    });
    Ok(())
}

/// Whether a finding cites the theme or anything beneath it.
fn supports(outputs: &StageOutputs, finding: &Finding, theme_id: &ThemeId) -> bool {
    let Some(theme) = outputs.themes().iter().find(|t| &t.id == theme_id) else {
        return false;
    };
    finding.supporting_unit_ids.iter().any(|r| match r {
        UnitRef::Theme(t) => t == theme_id,
        UnitRef::Subtheme(s) => theme.subtheme_ids.contains(s),
        UnitRef::Code(c) => outputs
            .subthemes()
            .iter()
            .filter(|s| theme.subtheme_ids.contains(&s.id))
            .any(|s| s.code_ids.contains(c)),
    })
}

fn unit_alias_prefix(stage: Stage) -> char {
    match stage {
        Stage::Codes => 'C',
        Stage::Subthemes => 'S',
        Stage::Themes => 'T',
        Stage::Summary => 'F',
    }
}

/// Request for the "what the LLM did" and self-critique of a stage's units.
pub fn nudge_request(
    session: &AnalysisSession,
    outputs: &StageOutputs,
    stage: Stage,
) -> ChainRequest {
    let prefix = unit_alias_prefix(stage);
    let units: Vec<Value> = match stage {
        Stage::Codes => {
            let codes = outputs.codes.as_ref();
            outputs
                .codes()
                .iter()
                .enumerate()
                .map(|(i, c)| {
                    let members: Vec<&str> = codes.into_iter().flat_map(|o| o.chunks_of(c)).map(|ch| ch.text.as_str()).collect();
                    json!({ "ref": alias(prefix, i), "name": c.name, "members": members })
                })
                .collect()
        }
        Stage::Subthemes => outputs
            .subthemes()
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let members: Vec<&str> = s
                    .code_ids
                    .iter()
                    .filter_map(|id| outputs.codes().iter().find(|c| &c.id == id))
                    .map(|c| c.name.as_str())
                    .collect();
                json!({ "ref": alias(prefix, i), "name": s.name, "members": members })
            })
            .collect(),
        Stage::Themes => outputs
            .themes()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let members: Vec<&str> = t
                    .subtheme_ids
                    .iter()
                    .filter_map(|id| outputs.subthemes().iter().find(|s| &s.id == id))
                    .map(|s| s.name.as_str())
                    .collect();
                json!({ "ref": alias(prefix, i), "name": t.name, "description": t.description, "members": members })
            })
            .collect(),
        Stage::Summary => Vec::new(),
    };
    let units = Value::Array(units);
    let payload = json!({
        "target_stage": stage.as_str(),
        "units": units,
        "research_questions": questions_payload(&session.research_questions),
    });
    ChainRequest {
        stage,
        system_prompt: system_prompt(
            None,
            &StageParameters::default(),
            &session.research_questions,
            &Value::Null,
            &units,
        ),
        payload,
        schema_id: NUDGE_SCHEMA_ID.to_owned(),
    }
}

/// Checks that the critique labels every unit exactly once and maps aliases
/// back to unit ids.
pub fn interpret_nudge(outputs: &StageOutputs, stage: Stage, parsed: &Value) -> Result<Nudge> {
    let reply: NudgeReply = parse(stage, parsed)?;
    let unit_ids = outputs.unit_ids(stage);
    let prefix = unit_alias_prefix(stage);
    let mut counts = vec![0usize; unit_ids.len()];
    let mut unknown = Vec::new();
    let mut entries = Vec::with_capacity(reply.self_critique.len());
    for entry in &reply.self_critique {
        match resolve(prefix, &entry.unit, unit_ids.len()) {
            Some(i) => {
                counts[i] += 1;
                if counts[i] == 1 {
                    entries.push((i, entry));
                }
            }
            None => unknown.push(entry.unit.trim().to_owned()),
        }
    }
    let missing: Vec<String> = (0..unit_ids.len())
        .filter(|&i| counts[i] == 0)
        .map(|i| alias(prefix, i))
        .collect();
    let duplicated: Vec<String> = (0..unit_ids.len())
        .filter(|&i| counts[i] > 1)
        .map(|i| alias(prefix, i))
        .collect();
    if !missing.is_empty() || !duplicated.is_empty() || !unknown.is_empty() {
        return Err(Error::IncompleteCoverage {
            missing,
            duplicated,
            unknown,
        });
    }
    entries.sort_by_key(|(i, _)| *i);
    Ok(Nudge {
        stage,
        what_llm_did: reply.what_llm_did.trim().to_owned(),
        self_critique: entries
            .into_iter()
            .map(|(i, e)| CritiqueEntry {
                unit_id: unit_ids[i].clone(),
                confidence: e.confidence,
                rationale: e.rationale.trim().to_owned(),
            })
            .collect(),
    })
}

/// Installs a nudge on a stage's outputs.
pub fn attach_nudge(outputs: &mut StageOutputs, stage: Stage, nudge: Nudge) {
    match stage {
        Stage::Codes => {
            if let Some(c) = outputs.codes.as_mut() {
                c.nudge = Some(nudge);
                c.nudge_stale = false;
            }
        }
        Stage::Subthemes => {
            if let Some(s) = outputs.subthemes.as_mut() {
                s.nudge = Some(nudge);
                s.nudge_stale = false;
            }
        }
        Stage::Themes => {
            if let Some(t) = outputs.themes.as_mut() {
                t.nudge = Some(nudge);
                t.nudge_stale = false;
            }
        }
        Stage::Summary => {}
    }
}
