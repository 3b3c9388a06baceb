//! Random operation sequences against the engine under the echo mock.

mod common;

use std::collections::HashSet;
use std::sync::Arc;

use common::*;
use proptest::prelude::*;
use qdachain::gateway::{EchoConfig, MockScript};
use qdachain::hierarchy::{check_hierarchy, Mutation};
use qdachain::model::{AnalysisSession, Provenance};
use qdachain::store::MemoryStore;
use qdachain::validation::char_slice;
use qdachain::{Stage, StageParameters};

#[derive(Debug, Clone)]
enum Op {
    Run {
        stage: usize,
        codes: Option<u32>,
        prompt: bool,
    },
    Rename {
        stage: usize,
        unit: usize,
    },
    AddChunk {
        code: usize,
        doc: usize,
        start: usize,
        len: usize,
    },
    RemoveChunk {
        code: usize,
        chunk: usize,
    },
    AddUnit {
        stage: usize,
        parent: Option<usize>,
    },
    Delete {
        stage: usize,
        unit: usize,
        cascade: bool,
    },
    Reassign {
        stage: usize,
        unit: usize,
        parent: Option<usize>,
    },
    Memo,
    Prompt,
    Save,
    Nudge {
        stage: usize,
    },
    Coverage,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0usize..4, prop::option::of(1u32..6), any::<bool>()).prop_map(|(stage, codes, prompt)| Op::Run { stage, codes, prompt }),
        2 => (0usize..3, 0usize..8).prop_map(|(stage, unit)| Op::Rename { stage, unit }),
        2 => (0usize..8, 0usize..2, 0usize..400, 1usize..40).prop_map(|(code, doc, start, len)| Op::AddChunk { code, doc, start, len }),
        1 => (0usize..8, 0usize..4).prop_map(|(code, chunk)| Op::RemoveChunk { code, chunk }),
        1 => (0usize..3, prop::option::of(0usize..4)).prop_map(|(stage, parent)| Op::AddUnit { stage, parent }),
        1 => (0usize..3, 0usize..8, any::<bool>()).prop_map(|(stage, unit, cascade)| Op::Delete { stage, unit, cascade }),
        1 => (0usize..2, 0usize..8, prop::option::of(0usize..4)).prop_map(|(s, unit, parent)| Op::Reassign { stage: s, unit, parent }),
        1 => Just(Op::Memo),
        1 => Just(Op::Prompt),
        1 => Just(Op::Save),
        1 => (0usize..3).prop_map(|stage| Op::Nudge { stage }),
        1 => Just(Op::Coverage),
    ]
}

fn nth_id(s: &AnalysisSession, stage: Stage, i: usize) -> Option<String> {
    let ids = s.stage_outputs.unit_ids(stage);
    (!ids.is_empty()).then(|| ids[i % ids.len()].clone())
}

/// Applies one operation; errors are expected and ignored.
fn apply(engine: &qdachain::Engine, id: &qdachain::ids::SessionId, op: &Op, step: usize) {
    let s = engine.session(id).unwrap();
    let _ = match op {
        Op::Run {
            stage,
            codes,
            prompt,
        } => {
            let stage = Stage::ALL[*stage];
            let params = StageParameters {
                number_of_codes: codes.filter(|_| stage == Stage::Codes),
                user_prompt: prompt.then(|| format!("prompt {step}")),
            };
            engine.run_stage(id, stage, params).map(drop)
        }
        Op::Rename { stage, unit } => match nth_id(&s, Stage::ALL[*stage], *unit) {
            Some(u) => engine
                .edit_unit(
                    id,
                    Stage::ALL[*stage],
                    &u,
                    Mutation::Rename {
                        name: format!("renamed {step}"),
                        description: None,
                    },
                )
                .map(drop),
            None => Ok(()),
        },
        Op::AddChunk {
            code,
            doc,
            start,
            len,
        } => match nth_id(&s, Stage::Codes, *code) {
            Some(u) => {
                let body = &s.documents[*doc % s.documents.len()].body;
                let n = body.chars().count();
                let st = start % n;
                let text = char_slice(body, st, (st + len).min(n)).unwrap().to_owned();
                engine
                    .edit_unit(
                        id,
                        Stage::Codes,
                        &u,
                        Mutation::AddChunk {
                            document_id: None,
                            text,
                        },
                    )
                    .map(drop)
            }
            None => Ok(()),
        },
        Op::RemoveChunk { code, chunk } => match nth_id(&s, Stage::Codes, *code) {
            Some(u) => {
                let c = s
                    .stage_outputs
                    .codes()
                    .iter()
                    .find(|c| c.id.0 == u)
                    .unwrap();
                match c.chunk_ids.get(*chunk % c.chunk_ids.len().max(1)) {
                    Some(chunk_id) => engine
                        .edit_unit(
                            id,
                            Stage::Codes,
                            &u,
                            Mutation::RemoveChunk {
                                chunk_id: chunk_id.clone(),
                            },
                        )
                        .map(drop),
                    None => Ok(()),
                }
            }
            None => Ok(()),
        },
        Op::AddUnit { stage, parent } => {
            let stage = Stage::ALL[*stage];
            let parent_id = match (stage, parent) {
                (Stage::Codes, Some(p)) => nth_id(&s, Stage::Subthemes, *p),
                (Stage::Subthemes, Some(p)) => nth_id(&s, Stage::Themes, *p),
                _ => None,
            };
            engine
                .edit_unit(
                    id,
                    stage,
                    "",
                    Mutation::AddUnit {
                        name: format!("added {step}"),
                        parent_id,
                        description: None,
                    },
                )
                .map(drop)
        }
        Op::Delete {
            stage,
            unit,
            cascade,
        } => match nth_id(&s, Stage::ALL[*stage], *unit) {
            Some(u) => engine
                .edit_unit(
                    id,
                    Stage::ALL[*stage],
                    &u,
                    Mutation::DeleteUnit { cascade: *cascade },
                )
                .map(drop),
            None => Ok(()),
        },
        Op::Reassign {
            stage,
            unit,
            parent,
        } => {
            let stage = Stage::ALL[*stage];
            match nth_id(&s, stage, *unit) {
                Some(u) => {
                    let parent_stage = if stage == Stage::Codes {
                        Stage::Subthemes
                    } else {
                        Stage::Themes
                    };
                    let parent_id = parent.and_then(|p| nth_id(&s, parent_stage, p));
                    engine
                        .edit_unit(id, stage, &u, Mutation::ReassignParent { parent_id })
                        .map(drop)
                }
                None => Ok(()),
            }
        }
        Op::Memo => engine
            .add_memo(id, Stage::ALL[step % 4], &format!("memo {step}"))
            .map(drop),
        Op::Prompt => engine
            .issue_prompt(id, Stage::Codes, &format!("stored prompt {step}"), None)
            .map(drop),
        Op::Save => engine.save_version(id, None).map(drop),
        Op::Nudge { stage } => engine.generate_nudge(id, Stage::ALL[*stage]).map(drop),
        Op::Coverage => engine.compute_coverage(id).map(drop),
    };
}

fn user_edited(s: &AnalysisSession) -> HashSet<String> {
    let o = &s.stage_outputs;
    o.codes()
        .iter()
        .filter(|c| c.provenance == Provenance::UserEdited)
        .map(|c| c.id.0.clone())
        .chain(
            o.subthemes()
                .iter()
                .filter(|u| u.provenance == Provenance::UserEdited)
                .map(|u| u.id.0.clone()),
        )
        .chain(
            o.themes()
                .iter()
                .filter(|u| u.provenance == Provenance::UserEdited)
                .map(|u| u.id.0.clone()),
        )
        .collect()
}

fn all_units(s: &AnalysisSession) -> HashSet<String> {
    Stage::ALL
        .iter()
        .flat_map(|st| s.stage_outputs.unit_ids(*st))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariants_hold_and_replay_matches(ops in prop::collection::vec(op(), 1..30)) {
        let engine = engine_with(
            MockScript::echo_with(EchoConfig { keep_fraction: 0.8, delay_ms: 0 }),
            Arc::new(MemoryStore::default()),
        );
        let id = engine.create_session(interviews(), vec![question("Q1", "What shapes daily life?")]).unwrap().id;
        let mut snapshots = vec![engine.session(&id).unwrap()];
        let mut ever_edited: HashSet<String> = HashSet::new();
        for (step, op) in ops.iter().enumerate() {
            let before = engine.session(&id).unwrap();
            apply(&engine, &id, op, step);
            let after = engine.session(&id).unwrap();
            check_hierarchy(&after.stage_outputs, &after.documents).map_err(|e| TestCaseError::fail(format!("{op:?}: {e:?}")))?;

            // Provenance never flips back while the unit exists.
            let live = all_units(&after);
            let edited_now = user_edited(&after);
            for u in ever_edited.iter().filter(|u| live.contains(*u)) {
                prop_assert!(edited_now.contains(u), "{} lost its user_edited label after {:?}", u, op);
            }
            ever_edited.extend(edited_now);

            // An accepted edit at stage k leaves every committed later stage stale.
            if after.last_seq > before.last_seq {
                let trail = engine.trail(&id, after.last_seq).unwrap();
                let last = &trail[0];
                if last.kind == qdachain::audit::EventKind::Edit {
                    let edit: qdachain::audit::EditApplied = last.payload_as().unwrap();
                    if let Some(k) = edit.outcome.affected_stage {
                        for later in k.downstream() {
                            if after.stage_outputs.is_committed(later) {
                                prop_assert!(after.stage_outputs.is_stale(later), "{} not stale after {:?}", later, op);
                            }
                        }
                    }
                }
            } else {
                prop_assert_eq!(&after, &before);
            }
            snapshots.push(after);
        }
        let live = engine.session(&id).unwrap();
        prop_assert_eq!(engine.replay(&id, None).unwrap(), live);
        for snap in &snapshots {
            prop_assert_eq!(&engine.replay(&id, Some(snap.last_seq)).unwrap(), snap);
        }
    }
}
