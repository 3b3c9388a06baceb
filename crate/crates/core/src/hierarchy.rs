//! Analyst edits over the code → subtheme → theme hierarchy.
//!
//! Parent records own their child lists; `reconcile` rebuilds the child-side
//! parent pointers, the ungrouped buckets, and prunes dangling references
//! after every structural change.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{ChunkId, CodeId, DocumentId, SubthemeId, ThemeId};
use crate::model::{
    ChunkAssignment, Nudge, OpenCode, Provenance, SourceDocument, Stage, StageOutputs, SubTheme,
    Theme, UnitRef,
};
use crate::validation::{self, LocateError, NormalizedDocument};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Mutation {
    Rename {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        description: Option<String>,
    },
    AddChunk {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        document_id: Option<DocumentId>,
        text: String,
    },
    RemoveChunk {
        chunk_id: ChunkId,
    },
    /// Creates a new unit at the stage; the unit id of the request is ignored.
    AddUnit {
        name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        parent_id: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        description: Option<String>,
    },
    DeleteUnit {
        #[serde(default)]
        cascade: bool,
    },
    /// Moves the unit under another parent; `None` moves it to the ungrouped bucket.
    ReassignParent {
        #[serde(default)]
        parent_id: Option<String>,
    },
}

impl Mutation {
    pub fn name(&self) -> &'static str {
        match self {
            Mutation::Rename { .. } => "rename",
            Mutation::AddChunk { .. } => "add_chunk",
            Mutation::RemoveChunk { .. } => "remove_chunk",
            Mutation::AddUnit { .. } => "add_unit",
            Mutation::DeleteUnit { .. } => "delete_unit",
            Mutation::ReassignParent { .. } => "reassign_parent",
        }
    }
}

/// Snapshot of a deleted unit, kept in the audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tombstone {
    pub stage: Stage,
    pub unit_id: String,
    pub name: String,
    pub provenance: Provenance,
    pub children: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOutcome {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unit_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_chunk: Option<ChunkAssignment>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub removed_chunks: Vec<ChunkAssignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tombstone: Option<Tombstone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub previous_name: Option<String>,
    /// The stage whose content changed; everything after it goes stale.
    pub affected_stage: Option<Stage>,
}

/// Applies one analyst mutation to `outputs`.
///
/// On error `outputs` may be partially modified; callers work on a copy.
pub fn apply_edit(
    outputs: &mut StageOutputs,
    documents: &[SourceDocument],
    stage: Stage,
    unit_id: &str,
    mutation: &Mutation,
) -> Result<EditOutcome> {
    if !stage.has_units() {
        return Err(Error::InvalidMutation(
            "the summary stage has no editable units".into(),
        ));
    }
    if !outputs.is_committed(stage) {
        return Err(Error::StageNotCommitted { stage });
    }
    let mut outcome = match mutation {
        Mutation::Rename { name, description } => {
            rename(outputs, stage, unit_id, name, description.as_deref())?
        }
        Mutation::AddChunk { document_id, text } => add_chunk(
            outputs,
            documents,
            stage,
            unit_id,
            document_id.as_ref(),
            text,
        )?,
        Mutation::RemoveChunk { chunk_id } => remove_chunk(outputs, stage, unit_id, chunk_id)?,
        Mutation::AddUnit {
            name,
            parent_id,
            description,
        } => add_unit(
            outputs,
            stage,
            name,
            parent_id.as_deref(),
            description.as_deref(),
        )?,
        Mutation::DeleteUnit { cascade } => delete_unit(outputs, stage, unit_id, *cascade)?,
        Mutation::ReassignParent { parent_id } => {
            reassign_parent(outputs, stage, unit_id, parent_id.as_deref())?
        }
    };
    let affected = outcome.affected_stage.unwrap_or(stage);
    outcome.affected_stage = Some(affected);
    mark_nudge_stale(outputs, affected);
    outputs.mark_downstream_stale(affected);
    reconcile(outputs);
    Ok(outcome)
}

fn require_name(name: &str) -> Result<String> {
    let trimmed = name.trim();
    if trimmed.is_empty() {
        return Err(Error::EmptyText);
    }
    Ok(trimmed.to_owned())
}

fn unknown(stage: Stage, unit_id: &str) -> Error {
    Error::UnknownUnit {
        stage,
        unit_id: unit_id.to_owned(),
    }
}

fn code_mut<'a>(outputs: &'a mut StageOutputs, unit_id: &str) -> Result<&'a mut OpenCode> {
    outputs
        .codes
        .as_mut()
        .and_then(|c| c.codes.iter_mut().find(|c| c.id.0 == unit_id))
        .ok_or_else(|| unknown(Stage::Codes, unit_id))
}

fn subtheme_mut<'a>(outputs: &'a mut StageOutputs, unit_id: &str) -> Result<&'a mut SubTheme> {
    outputs
        .subthemes
        .as_mut()
        .and_then(|s| s.subthemes.iter_mut().find(|s| s.id.0 == unit_id))
        .ok_or_else(|| unknown(Stage::Subthemes, unit_id))
}

fn theme_mut<'a>(outputs: &'a mut StageOutputs, unit_id: &str) -> Result<&'a mut Theme> {
    outputs
        .themes
        .as_mut()
        .and_then(|t| t.themes.iter_mut().find(|t| t.id.0 == unit_id))
        .ok_or_else(|| unknown(Stage::Themes, unit_id))
}

fn rename(
    outputs: &mut StageOutputs,
    stage: Stage,
    unit_id: &str,
    name: &str,
    description: Option<&str>,
) -> Result<EditOutcome> {
    let name = require_name(name)?;
    let previous = match stage {
        Stage::Codes => {
            let code = code_mut(outputs, unit_id)?;
            code.provenance = Provenance::UserEdited;
            std::mem::replace(&mut code.name, name)
        }
        Stage::Subthemes => {
            let sub = subtheme_mut(outputs, unit_id)?;
            sub.provenance = Provenance::UserEdited;
            std::mem::replace(&mut sub.name, name)
        }
        Stage::Themes => {
            let theme = theme_mut(outputs, unit_id)?;
            theme.provenance = Provenance::UserEdited;
            if let Some(d) = description {
                theme.description = d.trim().to_owned();
            }
            std::mem::replace(&mut theme.name, name)
        }
        Stage::Summary => unreachable!("checked by apply_edit"),
    };
    Ok(EditOutcome {
        previous_name: Some(previous),
        ..EditOutcome::default()
    })
}

fn add_chunk(
    outputs: &mut StageOutputs,
    documents: &[SourceDocument],
    stage: Stage,
    unit_id: &str,
    document_id: Option<&DocumentId>,
    text: &str,
) -> Result<EditOutcome> {
    if stage != Stage::Codes {
        return Err(Error::InvalidMutation(
            "chunks can only be added to open codes".into(),
        ));
    }
    code_mut(outputs, unit_id)?;
    let candidates: Vec<&SourceDocument> = match document_id {
        Some(id) => vec![documents
            .iter()
            .find(|d| &d.id == id)
            .ok_or_else(|| Error::UnknownDocument(id.0.clone()))?],
        None => documents.iter().collect(),
    };
    let chunks = outputs.chunks();
    let mut overlapping = false;
    let mut located = None;
    for doc in candidates {
        let taken: Vec<(usize, usize)> = chunks
            .iter()
            .filter(|c| c.document_id == doc.id)
            .map(|c| (c.start_offset, c.end_offset))
            .collect();
        match NormalizedDocument::new(&doc.body).locate(text, &taken) {
            Ok(span) => {
                located = Some((doc, span));
                break;
            }
            Err(LocateError::Overlapping) => overlapping = true,
            Err(LocateError::NotFound) => {}
        }
    }
    let Some((doc, (start, end))) = located else {
        return Err(if overlapping {
            Error::ChunkOverlap(text.to_owned())
        } else {
            Error::ChunkNotVerbatim(text.to_owned())
        });
    };
    let exact = validation::char_slice(&doc.body, start, end)?.to_owned();
    let chunk_id = outputs.counters.next_chunk();
    let chunk = ChunkAssignment {
        chunk_id: chunk_id.clone(),
        document_id: doc.id.clone(),
        start_offset: start,
        end_offset: end,
        text: exact,
        code_id: CodeId(unit_id.to_owned()),
    };
    let codes = outputs.codes.as_mut().expect("checked above");
    codes.chunks.push(chunk.clone());
    let code = codes
        .codes
        .iter_mut()
        .find(|c| c.id.0 == unit_id)
        .expect("checked above");
    code.chunk_ids.push(chunk_id);
    code.provenance = Provenance::UserEdited;
    Ok(EditOutcome {
        created_chunk: Some(chunk),
        ..EditOutcome::default()
    })
}

fn remove_chunk(
    outputs: &mut StageOutputs,
    stage: Stage,
    unit_id: &str,
    chunk_id: &ChunkId,
) -> Result<EditOutcome> {
    if stage != Stage::Codes {
        return Err(Error::InvalidMutation(
            "chunks can only be removed from open codes".into(),
        ));
    }
    let code = code_mut(outputs, unit_id)?;
    let Some(pos) = code.chunk_ids.iter().position(|c| c == chunk_id) else {
        return Err(Error::InvalidMutation(format!(
            "chunk `{chunk_id}` does not belong to code `{unit_id}`"
        )));
    };
    code.chunk_ids.remove(pos);
    code.provenance = Provenance::UserEdited;
    let codes = outputs.codes.as_mut().expect("code exists");
    let idx = codes
        .chunks
        .iter()
        .position(|c| &c.chunk_id == chunk_id)
        .expect("code references an existing chunk");
    let removed = codes.chunks.remove(idx);
    Ok(EditOutcome {
        removed_chunks: vec![removed],
        ..EditOutcome::default()
    })
}

fn add_unit(
    outputs: &mut StageOutputs,
    stage: Stage,
    name: &str,
    parent_id: Option<&str>,
    description: Option<&str>,
) -> Result<EditOutcome> {
    let name = require_name(name)?;
    let created = match stage {
        Stage::Codes => {
            if let Some(parent) = parent_id {
                subtheme_mut(outputs, parent)?;
            }
            let id = outputs.counters.next_code();
            outputs
                .codes
                .as_mut()
                .expect("committed")
                .codes
                .push(OpenCode {
                    id: id.clone(),
                    name,
                    chunk_ids: Vec::new(),
                    provenance: Provenance::UserEdited,
                    subtheme_id: None,
                });
            if let Some(parent) = parent_id {
                let sub = subtheme_mut(outputs, parent)?;
                sub.code_ids.push(id.clone());
                sub.provenance = Provenance::UserEdited;
            }
            id.0
        }
        Stage::Subthemes => {
            if let Some(parent) = parent_id {
                theme_mut(outputs, parent)?;
            }
            let id = outputs.counters.next_subtheme();
            outputs
                .subthemes
                .as_mut()
                .expect("committed")
                .subthemes
                .push(SubTheme {
                    id: id.clone(),
                    name,
                    code_ids: Vec::new(),
                    provenance: Provenance::UserEdited,
                    theme_id: None,
                });
            if let Some(parent) = parent_id {
                let theme = theme_mut(outputs, parent)?;
                theme.subtheme_ids.push(id.clone());
                theme.provenance = Provenance::UserEdited;
            }
            id.0
        }
        Stage::Themes => {
            if parent_id.is_some() {
                return Err(Error::InvalidMutation("themes have no parent".into()));
            }
            let id = outputs.counters.next_theme();
            outputs
                .themes
                .as_mut()
                .expect("committed")
                .themes
                .push(Theme {
                    id: id.clone(),
                    name,
                    description: description.unwrap_or_default().trim().to_owned(),
                    subtheme_ids: Vec::new(),
                    provenance: Provenance::UserEdited,
                    research_question_ids: Vec::new(),
                });
            id.0
        }
        Stage::Summary => unreachable!("checked by apply_edit"),
    };
    Ok(EditOutcome {
        created_unit_id: Some(created),
        affected_stage: Some(stage),
        ..EditOutcome::default()
    })
}

fn delete_unit(
    outputs: &mut StageOutputs,
    stage: Stage,
    unit_id: &str,
    cascade: bool,
) -> Result<EditOutcome> {
    let tombstone = match stage {
        Stage::Codes => {
            let code = code_mut(outputs, unit_id)?.clone();
            if !code.chunk_ids.is_empty() && !cascade {
                return Err(Error::HasChildren {
                    unit_id: unit_id.to_owned(),
                    children: code.chunk_ids.len(),
                });
            }
            let codes = outputs.codes.as_mut().expect("committed");
            codes.codes.retain(|c| c.id != code.id);
            let (removed, kept): (Vec<_>, Vec<_>) = std::mem::take(&mut codes.chunks)
                .into_iter()
                .partition(|c| c.code_id == code.id);
            codes.chunks = kept;
            if let Some(parent) = &code.subtheme_id {
                if let Ok(sub) = subtheme_mut(outputs, &parent.0) {
                    sub.provenance = Provenance::UserEdited;
                }
            }
            return Ok(EditOutcome {
                removed_chunks: removed,
                tombstone: Some(Tombstone {
                    stage,
                    unit_id: code.id.0,
                    name: code.name,
                    provenance: code.provenance,
                    children: code.chunk_ids.into_iter().map(|c| c.0).collect(),
                }),
                ..EditOutcome::default()
            });
        }
        Stage::Subthemes => {
            let sub = subtheme_mut(outputs, unit_id)?.clone();
            if !sub.code_ids.is_empty() && !cascade {
                return Err(Error::HasChildren {
                    unit_id: unit_id.to_owned(),
                    children: sub.code_ids.len(),
                });
            }
            outputs
                .subthemes
                .as_mut()
                .expect("committed")
                .subthemes
                .retain(|s| s.id != sub.id);
            if let Some(parent) = &sub.theme_id {
                if let Ok(theme) = theme_mut(outputs, &parent.0) {
                    theme.provenance = Provenance::UserEdited;
                }
            }
            Tombstone {
                stage,
                unit_id: sub.id.0,
                name: sub.name,
                provenance: sub.provenance,
                children: sub.code_ids.into_iter().map(|c| c.0).collect(),
            }
        }
        Stage::Themes => {
            let theme = theme_mut(outputs, unit_id)?.clone();
            if !theme.subtheme_ids.is_empty() && !cascade {
                return Err(Error::HasChildren {
                    unit_id: unit_id.to_owned(),
                    children: theme.subtheme_ids.len(),
                });
            }
            outputs
                .themes
                .as_mut()
                .expect("committed")
                .themes
                .retain(|t| t.id != theme.id);
            Tombstone {
                stage,
                unit_id: theme.id.0,
                name: theme.name,
                provenance: theme.provenance,
                children: theme.subtheme_ids.into_iter().map(|c| c.0).collect(),
            }
        }
        Stage::Summary => unreachable!("checked by apply_edit"),
    };
    Ok(EditOutcome {
        tombstone: Some(tombstone),
        ..EditOutcome::default()
    })
}

fn reassign_parent(
    outputs: &mut StageOutputs,
    stage: Stage,
    unit_id: &str,
    parent_id: Option<&str>,
) -> Result<EditOutcome> {
    match stage {
        Stage::Codes => {
            if outputs.subthemes.is_none() {
                return Err(Error::StageNotCommitted {
                    stage: Stage::Subthemes,
                });
            }
            let code_id = code_mut(outputs, unit_id)?.id.clone();
            if let Some(parent) = parent_id {
                subtheme_mut(outputs, parent)?;
            }
            for sub in &mut outputs.subthemes.as_mut().expect("checked").subthemes {
                if sub.code_ids.contains(&code_id) {
                    sub.code_ids.retain(|c| c != &code_id);
                    sub.provenance = Provenance::UserEdited;
                }
            }
            if let Some(parent) = parent_id {
                let sub = subtheme_mut(outputs, parent)?;
                sub.code_ids.push(code_id);
                sub.provenance = Provenance::UserEdited;
            }
            code_mut(outputs, unit_id)?.provenance = Provenance::UserEdited;
        }
        Stage::Subthemes => {
            if outputs.themes.is_none() {
                return Err(Error::StageNotCommitted {
                    stage: Stage::Themes,
                });
            }
            let sub_id = subtheme_mut(outputs, unit_id)?.id.clone();
            if let Some(parent) = parent_id {
                theme_mut(outputs, parent)?;
            }
            for theme in &mut outputs.themes.as_mut().expect("checked").themes {
                if theme.subtheme_ids.contains(&sub_id) {
                    theme.subtheme_ids.retain(|s| s != &sub_id);
                    theme.provenance = Provenance::UserEdited;
                }
            }
            if let Some(parent) = parent_id {
                let theme = theme_mut(outputs, parent)?;
                theme.subtheme_ids.push(sub_id);
                theme.provenance = Provenance::UserEdited;
            }
            subtheme_mut(outputs, unit_id)?.provenance = Provenance::UserEdited;
        }
        _ => return Err(Error::InvalidMutation("themes have no parent".into())),
    }
    Ok(EditOutcome {
        // Regrouping changes the level above the moved unit.
        affected_stage: stage.downstream().next(),
        ..EditOutcome::default()
    })
}

fn mark_nudge_stale(outputs: &mut StageOutputs, stage: Stage) {
    match stage {
        Stage::Codes => {
            if let Some(c) = outputs.codes.as_mut() {
                c.nudge_stale = c.nudge.is_some();
            }
        }
        Stage::Subthemes => {
            if let Some(s) = outputs.subthemes.as_mut() {
                s.nudge_stale = s.nudge.is_some();
            }
        }
        Stage::Themes => {
            if let Some(t) = outputs.themes.as_mut() {
                t.nudge_stale = t.nudge.is_some();
            }
        }
        Stage::Summary => {}
    }
}

fn prune_nudge(nudge: &mut Option<Nudge>, live: &HashSet<&str>) {
    if let Some(n) = nudge {
        n.self_critique
            .retain(|e| live.contains(e.unit_id.as_str()));
    }
}

/// Restores bidirectional parent/child consistency and the ungrouped buckets.
pub fn reconcile(outputs: &mut StageOutputs) {
    let code_ids: HashSet<CodeId> = outputs.codes().iter().map(|c| c.id.clone()).collect();
    let sub_ids: HashSet<SubthemeId> = outputs.subthemes().iter().map(|s| s.id.clone()).collect();
    let theme_ids: HashSet<ThemeId> = outputs.themes().iter().map(|t| t.id.clone()).collect();

    if let Some(codes) = outputs.codes.as_mut() {
        let chunk_ids: HashSet<&ChunkId> = codes.chunks.iter().map(|c| &c.chunk_id).collect();
        for code in &mut codes.codes {
            code.chunk_ids.retain(|c| chunk_ids.contains(c));
        }
        let live: HashSet<&str> = codes.codes.iter().map(|c| c.id.as_str()).collect();
        prune_nudge(&mut codes.nudge, &live);
    }

    // Code → subtheme.
    let mut code_parent: HashMap<CodeId, SubthemeId> = HashMap::new();
    if let Some(subs) = outputs.subthemes.as_mut() {
        for sub in &mut subs.subthemes {
            sub.code_ids
                .retain(|c| code_ids.contains(c) && !code_parent.contains_key(c));
            for c in &sub.code_ids {
                code_parent.insert(c.clone(), sub.id.clone());
            }
        }
        let live: HashSet<&str> = subs.subthemes.iter().map(|s| s.id.as_str()).collect();
        prune_nudge(&mut subs.nudge, &live);
    }
    let has_subthemes = outputs.subthemes.is_some();
    let mut ungrouped_codes = Vec::new();
    if let Some(codes) = outputs.codes.as_mut() {
        for code in &mut codes.codes {
            code.subtheme_id = code_parent.get(&code.id).cloned();
            if code.subtheme_id.is_none() {
                ungrouped_codes.push(code.id.clone());
            }
        }
    }
    if let Some(subs) = outputs.subthemes.as_mut() {
        subs.ungrouped_code_ids = if has_subthemes {
            ungrouped_codes
        } else {
            Vec::new()
        };
    }

    // Subtheme → theme.
    let mut sub_parent: HashMap<SubthemeId, ThemeId> = HashMap::new();
    if let Some(themes) = outputs.themes.as_mut() {
        for theme in &mut themes.themes {
            theme
                .subtheme_ids
                .retain(|s| sub_ids.contains(s) && !sub_parent.contains_key(s));
            for s in &theme.subtheme_ids {
                sub_parent.insert(s.clone(), theme.id.clone());
            }
        }
        let live: HashSet<&str> = themes.themes.iter().map(|t| t.id.as_str()).collect();
        prune_nudge(&mut themes.nudge, &live);
    }
    let mut ungrouped_subs = Vec::new();
    if let Some(subs) = outputs.subthemes.as_mut() {
        for sub in &mut subs.subthemes {
            sub.theme_id = sub_parent.get(&sub.id).cloned();
            if sub.theme_id.is_none() {
                ungrouped_subs.push(sub.id.clone());
            }
        }
    }
    if let Some(themes) = outputs.themes.as_mut() {
        themes.ungrouped_subtheme_ids = ungrouped_subs;
    }

    if let Some(summary) = outputs.summary.as_mut() {
        for finding in &mut summary.key_findings.findings {
            finding.supporting_unit_ids.retain(|r| match r {
                UnitRef::Theme(t) => theme_ids.contains(t),
                UnitRef::Subtheme(s) => sub_ids.contains(s),
                UnitRef::Code(c) => code_ids.contains(c),
            });
        }
        summary
            .key_findings
            .themes_without_findings
            .retain(|t| theme_ids.contains(t));
    }
}

/// A broken structural invariant found by [`check_hierarchy`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HierarchyViolation(pub String);

/// Full traversal of the hierarchy checking partition, bidirectional
/// consistency, and the verbatim property of every chunk.
pub fn check_hierarchy(
    outputs: &StageOutputs,
    documents: &[SourceDocument],
) -> Result<(), HierarchyViolation> {
    let fail = |msg: String| Err(HierarchyViolation(msg));

    let mut chunk_owner: HashMap<&ChunkId, &CodeId> = HashMap::new();
    for code in outputs.codes() {
        for chunk in &code.chunk_ids {
            if chunk_owner.insert(chunk, &code.id).is_some() {
                return fail(format!("chunk {chunk} belongs to more than one code"));
            }
        }
    }
    for chunk in outputs.chunks() {
        match chunk_owner.get(&chunk.chunk_id) {
            Some(owner) if **owner == chunk.code_id => {}
            _ => return fail(format!("chunk {} is not owned by its code", chunk.chunk_id)),
        }
        let Some(doc) = documents.iter().find(|d| d.id == chunk.document_id) else {
            return fail(format!(
                "chunk {} references an unknown document",
                chunk.chunk_id
            ));
        };
        match validation::verify_verbatim(doc, chunk) {
            Ok(Ok(())) => {}
            _ => return fail(format!("chunk {} is not verbatim", chunk.chunk_id)),
        }
    }
    if chunk_owner.len() != outputs.chunks().len() {
        return fail("a code references a missing chunk".into());
    }
    let chunks = outputs.chunks();
    for (i, a) in chunks.iter().enumerate() {
        if chunks[i + 1..]
            .iter()
            .any(|b| b.overlaps(&a.document_id, a.start_offset, a.end_offset))
        {
            return fail(format!("chunk {} overlaps another chunk", a.chunk_id));
        }
    }

    let mut code_parent: HashMap<&CodeId, &SubthemeId> = HashMap::new();
    for sub in outputs.subthemes() {
        for code in &sub.code_ids {
            if code_parent.insert(code, &sub.id).is_some() {
                return fail(format!("code {code} belongs to two subthemes"));
            }
        }
    }
    for code in outputs.codes() {
        if code.subtheme_id.as_ref() != code_parent.get(&code.id).copied() {
            return fail(format!(
                "code {} parent pointer disagrees with subthemes",
                code.id
            ));
        }
    }
    if let Some(subs) = &outputs.subthemes {
        let expected: Vec<&CodeId> = outputs
            .codes()
            .iter()
            .filter(|c| c.subtheme_id.is_none())
            .map(|c| &c.id)
            .collect();
        if subs.ungrouped_code_ids.iter().collect::<Vec<_>>() != expected {
            return fail("ungrouped code bucket is inconsistent".into());
        }
    }
    if code_parent.len()
        != outputs
            .subthemes()
            .iter()
            .map(|s| s.code_ids.len())
            .sum::<usize>()
        || code_parent
            .keys()
            .any(|c| outputs.codes().iter().all(|x| &x.id != *c))
    {
        return fail("a subtheme references a missing code".into());
    }

    let mut sub_parent: HashMap<&SubthemeId, &ThemeId> = HashMap::new();
    for theme in outputs.themes() {
        for sub in &theme.subtheme_ids {
            if sub_parent.insert(sub, &theme.id).is_some() {
                return fail(format!("subtheme {sub} belongs to two themes"));
            }
        }
    }
    for sub in outputs.subthemes() {
        if sub.theme_id.as_ref() != sub_parent.get(&sub.id).copied() {
            return fail(format!(
                "subtheme {} parent pointer disagrees with themes",
                sub.id
            ));
        }
    }
    if sub_parent
        .keys()
        .any(|s| outputs.subthemes().iter().all(|x| &x.id != *s))
    {
        return fail("a theme references a missing subtheme".into());
    }
    if let Some(themes) = &outputs.themes {
        let expected: Vec<&SubthemeId> = outputs
            .subthemes()
            .iter()
            .filter(|s| s.theme_id.is_none())
            .map(|s| &s.id)
            .collect();
        if themes.ungrouped_subtheme_ids.iter().collect::<Vec<_>>() != expected {
            return fail("ungrouped subtheme bucket is inconsistent".into());
        }
    }
    Ok(())
}
