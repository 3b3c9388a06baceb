mod common;

use common::*;
use qdachain::hierarchy::{check_hierarchy, Mutation};
use qdachain::model::{Confidence, UnitRef};
use qdachain::{Error, Stage, StageParameters};
use serde_json::json;

fn codes_reply(groups: &[(&str, &[&str])]) -> serde_json::Value {
    let codes: Vec<_> = groups
        .iter()
        .map(|(name, chunks)| json!({"name": name, "chunks": chunks.iter().map(|t| json!({"text": t})).collect::<Vec<_>>()}))
        .collect();
    json!({ "codes": codes })
}

#[test]
fn three_verbatim_chunks_become_three_codes_with_full_coverage() {
    let engine = scripted(vec![
        codes_reply(&[("x", &["X."]), ("y", &["Y."]), ("z", &["Z."])]),
        nudge_reply('C', 3),
    ]);
    let id = engine
        .create_session(vec![doc("d1", "X. Y. Z.")], vec![])
        .unwrap()
        .id;
    let run = engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    assert!(run.warnings.is_empty());
    let s = run.session;
    assert_eq!(s.stage_outputs.codes().len(), 3);
    let offsets: Vec<(usize, usize)> = s
        .stage_outputs
        .chunks()
        .iter()
        .map(|c| (c.start_offset, c.end_offset))
        .collect();
    assert_eq!(offsets, [(0, 2), (3, 5), (6, 8)]);
    assert_eq!(s.coverage_report.unwrap().overall_jaccard, 1.0);
}

#[test]
fn paraphrased_chunk_is_rejected_and_nothing_commits() {
    let engine = scripted(vec![codes_reply(&[("x", &["X!"]), ("y", &["Y."])])]);
    let id = engine
        .create_session(vec![doc("d1", "X. Y. Z.")], vec![])
        .unwrap()
        .id;
    let before = engine.session(&id).unwrap();
    match engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap_err()
    {
        Error::VerbatimViolation(chunks) => {
            assert_eq!(chunks.len(), 1);
            assert_eq!(chunks[0].text, "X!");
        }
        other => panic!("unexpected {other:?}"),
    }
    let after = engine.session(&id).unwrap();
    assert_eq!(after.stage_outputs, before.stage_outputs);
    assert_eq!(after.coverage_report, before.coverage_report);
}

#[test]
fn requested_code_count_is_honoured_or_flagged() {
    let body = "One. Two. Three. Four. Five.";
    let five = codes_reply(&[
        ("a", &["One."]),
        ("b", &["Two."]),
        ("c", &["Three."]),
        ("d", &["Four."]),
        ("e", &["Five."]),
    ]);
    let engine = scripted(vec![five, nudge_reply('C', 5)]);
    let id = engine
        .create_session(vec![doc("d1", body)], vec![])
        .unwrap()
        .id;
    let params = StageParameters {
        number_of_codes: Some(5),
        user_prompt: None,
    };
    let run = engine.run_codes_stage(&id, params.clone()).unwrap();
    assert_eq!(run.session.stage_outputs.codes().len(), 5);
    assert!(run.warnings.is_empty());

    let engine = scripted(vec![
        codes_reply(&[("a", &["One. Two."]), ("b", &["Three."])]),
        nudge_reply('C', 2),
    ]);
    let id = engine
        .create_session(vec![doc("d1", body)], vec![])
        .unwrap()
        .id;
    let run = engine.run_codes_stage(&id, params).unwrap();
    assert_eq!(run.session.stage_outputs.codes().len(), 2);
    assert_eq!(run.warnings.len(), 1);
}

const FOUR: &str = "Alpha one. Beta two. Gamma three. Delta four.";

fn four_codes() -> serde_json::Value {
    codes_reply(&[
        ("a", &["Alpha one."]),
        ("b", &["Beta two."]),
        ("g", &["Gamma three."]),
        ("d", &["Delta four."]),
    ])
}

#[test]
fn four_codes_group_into_two_subthemes() {
    let engine = scripted(vec![
        four_codes(),
        nudge_reply('C', 4),
        json!({"subthemes": [{"name": "first", "codes": ["C1", "C2"]}, {"name": "second", "codes": ["C3", "C4"]}]}),
        nudge_reply('S', 2),
    ]);
    let id = engine
        .create_session(vec![doc("d1", FOUR)], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    let s = engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap()
        .session;
    let subs = s.stage_outputs.subthemes.as_ref().unwrap();
    assert_eq!(subs.subthemes.len(), 2);
    assert!(subs.subthemes.iter().all(|st| st.code_ids.len() == 2));
    assert!(subs.ungrouped_code_ids.is_empty());
    check_hierarchy(&s.stage_outputs, &s.documents).unwrap();
}

#[test]
fn hallucinated_code_reference_is_rejected() {
    let engine = scripted(vec![
        four_codes(),
        nudge_reply('C', 4),
        json!({"subthemes": [{"name": "first", "codes": ["C1", "C99"]}]}),
    ]);
    let id = engine
        .create_session(vec![doc("d1", FOUR)], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    match engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap_err()
    {
        Error::HallucinatedReference(r) => assert_eq!(r, "C99"),
        other => panic!("unexpected {other:?}"),
    }
    assert!(engine
        .session(&id)
        .unwrap()
        .stage_outputs
        .subthemes
        .is_none());
}

#[test]
fn leftover_code_lands_in_the_ungrouped_bucket() {
    let engine = scripted(vec![
        codes_reply(&[
            ("a", &["Alpha one."]),
            ("b", &["Beta two."]),
            ("g", &["Gamma three."]),
        ]),
        nudge_reply('C', 3),
        json!({"subthemes": [{"name": "pair", "codes": ["C1", "C2"]}]}),
        nudge_reply('S', 1),
    ]);
    let id = engine
        .create_session(vec![doc("d1", "Alpha one. Beta two. Gamma three.")], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    let s = engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap()
        .session;
    let subs = s.stage_outputs.subthemes.as_ref().unwrap();
    assert_eq!(subs.ungrouped_code_ids.len(), 1);
    assert_eq!(subs.ungrouped_code_ids[0], s.stage_outputs.codes()[2].id);
}

fn through_subthemes(
    questions: Vec<qdachain::ResearchQuestion>,
    themes: serde_json::Value,
) -> (qdachain::Engine, qdachain::ids::SessionId) {
    let engine = scripted(vec![
        four_codes(),
        nudge_reply('C', 4),
        json!({"subthemes": [{"name": "first", "codes": ["C1", "C2"]}, {"name": "second", "codes": ["C3", "C4"]}]}),
        nudge_reply('S', 2),
        themes,
        nudge_reply('T', 1),
    ]);
    let id = engine
        .create_session(vec![doc("d1", FOUR)], questions)
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap();
    (engine, id)
}

#[test]
fn theme_carries_its_research_question() {
    let (engine, id) = through_subthemes(
        vec![question("q1", "What matters?")],
        json!({"themes": [{"name": "all", "description": "both", "subthemes": ["S1", "S2"], "research_questions": ["Q1"]}]}),
    );
    let s = engine
        .run_themes_stage(&id, StageParameters::default())
        .unwrap()
        .session;
    let theme = &s.stage_outputs.themes()[0];
    assert_eq!(
        theme.research_question_ids,
        [qdachain::ids::QuestionId::from("q1")]
    );
    assert_eq!(theme.subtheme_ids.len(), 2);
}

#[test]
fn question_reference_without_questions_is_invalid() {
    let (engine, id) = through_subthemes(
        vec![],
        json!({"themes": [{"name": "all", "description": "", "subthemes": ["S1", "S2"], "research_questions": ["Q1"]}]}),
    );
    assert!(matches!(
        engine.run_themes_stage(&id, StageParameters::default()),
        Err(Error::InvalidQuestionReference(_))
    ));
}

#[test]
fn themes_refuse_to_run_without_subthemes() {
    let engine = echo_engine();
    let id = engine
        .create_session(vec![doc("d1", FOUR)], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap();
    let s = engine.session(&id).unwrap();
    for sub in s.stage_outputs.subthemes() {
        engine
            .edit_unit(
                &id,
                Stage::Subthemes,
                sub.id.as_str(),
                Mutation::DeleteUnit { cascade: true },
            )
            .unwrap();
    }
    assert!(engine
        .session(&id)
        .unwrap()
        .stage_outputs
        .subthemes()
        .is_empty());
    match engine.run_themes_stage(&id, StageParameters::default()) {
        Err(Error::Precondition(_)) => {}
        other => panic!("unexpected {other:?}"),
    }
}

fn through_themes(
    questions: Vec<qdachain::ResearchQuestion>,
    summary: serde_json::Value,
) -> (qdachain::Engine, qdachain::ids::SessionId) {
    let (engine, id) = {
        let engine = scripted(vec![
            four_codes(),
            nudge_reply('C', 4),
            json!({"subthemes": [{"name": "first", "codes": ["C1", "C2"]}, {"name": "second", "codes": ["C3", "C4"]}]}),
            nudge_reply('S', 2),
            json!({"themes": [
                {"name": "one", "description": "", "subthemes": ["S1"]},
                {"name": "two", "description": "", "subthemes": ["S2"]}
            ]}),
            nudge_reply('T', 2),
            summary,
        ]);
        let id = engine
            .create_session(vec![doc("d1", FOUR)], questions)
            .unwrap()
            .id;
        (engine, id)
    };
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap();
    engine
        .run_themes_stage(&id, StageParameters::default())
        .unwrap();
    (engine, id)
}

#[test]
fn findings_cite_their_themes() {
    let (engine, id) = through_themes(
        vec![],
        json!({"findings": [
            {"summary": "first finding", "supporting": ["T1"]},
            {"summary": "second finding", "supporting": ["T2", "S2"]}
        ]}),
    );
    let s = engine.run_summary_stage(&id).unwrap().session;
    let kf = &s.stage_outputs.summary.as_ref().unwrap().key_findings;
    assert_eq!(kf.findings.len(), 2);
    let themes = s.stage_outputs.themes();
    assert_eq!(
        kf.findings[0].supporting_unit_ids,
        [UnitRef::Theme(themes[0].id.clone())]
    );
    assert!(kf.findings.iter().all(|f| f.research_question_id.is_none()));
    assert!(kf.themes_without_findings.is_empty());
}

#[test]
fn finding_citing_a_missing_theme_is_unresolvable() {
    let (engine, id) = through_themes(
        vec![],
        json!({"findings": [{"summary": "ghost", "supporting": ["T3"]}]}),
    );
    match engine.run_summary_stage(&id).unwrap_err() {
        Error::UnresolvableReference(r) => assert_eq!(r, "T3"),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn uncited_themes_are_listed_explicitly() {
    let (engine, id) = through_themes(
        vec![],
        json!({"findings": [{"summary": "only one", "supporting": ["C1"]}]}),
    );
    let s = engine.run_summary_stage(&id).unwrap().session;
    let kf = &s.stage_outputs.summary.as_ref().unwrap().key_findings;
    assert_eq!(
        kf.themes_without_findings,
        [s.stage_outputs.themes()[1].id.clone()]
    );
}

fn three_codes_then(nudge: serde_json::Value) -> Result<qdachain::StageRun, Error> {
    let engine = scripted(vec![
        codes_reply(&[
            ("a", &["Alpha one."]),
            ("b", &["Beta two."]),
            ("g", &["Gamma three."]),
        ]),
        nudge,
    ]);
    let id = engine
        .create_session(vec![doc("d1", "Alpha one. Beta two. Gamma three.")], vec![])
        .unwrap()
        .id;
    engine.run_codes_stage(&id, StageParameters::default())
}

#[test]
fn nudge_labels_each_code_once() {
    let run = three_codes_then(nudge_reply('C', 3)).unwrap();
    let nudge = run.session.stage_outputs.nudge(Stage::Codes).unwrap();
    let tiers: Vec<Confidence> = nudge.self_critique.iter().map(|e| e.confidence).collect();
    assert_eq!(
        tiers,
        [
            Confidence::MostConfident,
            Confidence::LessConfident,
            Confidence::Ambiguous
        ]
    );
    assert!(!nudge.what_llm_did.is_empty());
}

#[test]
fn nudge_missing_a_code_is_incomplete() {
    match three_codes_then(nudge_reply('C', 2)).unwrap_err() {
        Error::IncompleteCoverage { missing, .. } => assert_eq!(missing, ["C3"]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn nudge_labelling_a_code_twice_is_incomplete() {
    let reply = json!({"what_llm_did": "x", "self_critique": [
        {"unit": "C1", "confidence": "ambiguous", "rationale": ""},
        {"unit": "C1", "confidence": "most_confident", "rationale": ""},
        {"unit": "C2", "confidence": "ambiguous", "rationale": ""},
        {"unit": "C3", "confidence": "ambiguous", "rationale": ""}
    ]});
    match three_codes_then(reply).unwrap_err() {
        Error::IncompleteCoverage { duplicated, .. } => assert_eq!(duplicated, ["C1"]),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn stale_upstream_blocks_the_next_stage() {
    let engine = echo_engine();
    let id = engine
        .create_session(vec![doc("d1", FOUR)], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    engine
        .run_subthemes_stage(&id, StageParameters::default())
        .unwrap();
    let code = engine.session(&id).unwrap().stage_outputs.codes()[0]
        .id
        .clone();
    engine
        .edit_unit(
            &id,
            Stage::Codes,
            code.as_str(),
            Mutation::Rename {
                name: "renamed".into(),
                description: None,
            },
        )
        .unwrap();
    assert!(matches!(
        engine.run_themes_stage(&id, StageParameters::default()),
        Err(Error::StaleUpstream {
            stage: Stage::Themes,
            upstream: Stage::Subthemes
        })
    ));
    assert!(matches!(
        engine.run_summary_stage(&id),
        Err(Error::StageNotCommitted { .. }) | Err(Error::StaleUpstream { .. })
    ));
}

#[test]
fn regeneration_keeps_user_edited_codes() {
    let engine = echo_engine();
    let id = engine
        .create_session(vec![doc("d1", FOUR)], vec![])
        .unwrap()
        .id;
    engine
        .run_codes_stage(&id, StageParameters::default())
        .unwrap();
    let code = engine.session(&id).unwrap().stage_outputs.codes()[0].clone();
    engine
        .edit_unit(
            &id,
            Stage::Codes,
            code.id.as_str(),
            Mutation::Rename {
                name: "kept by analyst".into(),
                description: None,
            },
        )
        .unwrap();
    let s = engine
        .run_stage(
            &id,
            Stage::Codes,
            StageParameters {
                number_of_codes: None,
                user_prompt: Some("fewer codes".into()),
            },
        )
        .unwrap()
        .session;
    let kept = s
        .stage_outputs
        .codes()
        .iter()
        .find(|c| c.id == code.id)
        .unwrap();
    assert_eq!(kept.name, "kept by analyst");
    assert_eq!(kept.chunk_ids, code.chunk_ids);
    check_hierarchy(&s.stage_outputs, &s.documents).unwrap();
    assert_eq!(s.coverage_report.unwrap().overall_jaccard, 1.0);
}
