mod common;

use std::collections::BTreeMap;

use common::*;
use qdachain::codebook::{self, quote_line, RenderFormat, MAX_QUOTES_PER_CODE};
use qdachain::hierarchy::Mutation;
use qdachain::ids::SessionId;
use qdachain::model::Provenance;
use qdachain::theme_map::{build_graph, emit_dot};
use qdachain::validation::char_slice;
use qdachain::{Engine, Stage, StageParameters};

fn run_all(engine: &Engine, id: &SessionId) {
    for stage in Stage::ALL {
        engine
            .run_stage(id, stage, StageParameters::default())
            .unwrap();
    }
}

#[test]
fn every_quote_resolves_to_its_source_span() {
    let engine = echo_engine();
    let id = engine
        .create_session(
            interviews(),
            vec![question("Q1", "How do people settle in?")],
        )
        .unwrap()
        .id;
    run_all(&engine, &id);
    let v = engine.save_version(&id, None).unwrap();
    let cb = engine.export(&id, &v.version_id).unwrap();
    let session = engine.session(&id).unwrap();
    let bodies: BTreeMap<_, _> = session
        .documents
        .iter()
        .map(|d| (d.id.clone(), d.body.as_str()))
        .collect();

    let mut quotes = 0;
    for q in cb.primary_codebook.quotes() {
        assert_eq!(
            char_slice(bodies[&q.document_id], q.start, q.end).unwrap(),
            q.text
        );
        quotes += 1;
    }
    assert!(quotes > 0);

    // Each code exactly once, with its chunk count and a bounded quote list.
    let pc = &cb.primary_codebook;
    let codes: Vec<_> = pc
        .themes
        .iter()
        .flat_map(|t| &t.subthemes)
        .chain(&pc.ungrouped_subthemes)
        .flat_map(|s| &s.codes)
        .chain(&pc.ungrouped_codes)
        .collect();
    assert_eq!(codes.len(), session.stage_outputs.codes().len());
    for code in codes {
        let live = session
            .stage_outputs
            .codes()
            .iter()
            .find(|c| c.id == code.id)
            .unwrap();
        assert_eq!(code.chunk_count, live.chunk_ids.len());
        assert!(code.quotes.len() <= MAX_QUOTES_PER_CODE.min(code.chunk_count));
    }

    assert_eq!(
        cb.theme_map_dot,
        emit_dot(&build_graph(&session.stage_outputs).unwrap())
    );
    let printable = codebook::render(&cb, RenderFormat::Printable);
    for q in cb.primary_codebook.quotes() {
        assert!(
            printable.contains(&quote_line(q)),
            "missing {}",
            quote_line(q)
        );
    }
}

#[test]
fn empty_trajectory_sections_are_marked() {
    let engine = echo_engine();
    let id = engine.create_session(interviews(), vec![]).unwrap().id;
    run_all(&engine, &id);
    let v = engine.save_version(&id, None).unwrap();
    let cb = engine.export(&id, &v.version_id).unwrap();
    assert_eq!(cb.memos().count(), 0);
    assert_eq!(cb.prompts().count(), 0);
    let printable = codebook::render(&cb, RenderFormat::Printable);
    let memos = printable.find("Reflection memos").unwrap();
    assert!(printable[memos..].contains("_Empty:"));
    let prompts = printable.find("Prompting history").unwrap();
    assert!(printable[prompts..memos].contains("_Empty:"));
}

#[test]
fn user_edits_are_labelled_in_the_export() {
    let engine = echo_engine();
    let id = engine.create_session(interviews(), vec![]).unwrap().id;
    run_all(&engine, &id);
    let theme = engine.session(&id).unwrap().stage_outputs.themes()[0]
        .id
        .0
        .clone();
    engine
        .edit_unit(
            &id,
            Stage::Themes,
            &theme,
            Mutation::Rename {
                name: "Belonging".into(),
                description: None,
            },
        )
        .unwrap();
    let stale = engine.save_version(&id, None).unwrap();
    assert!(matches!(
        engine.export(&id, &stale.version_id),
        Err(qdachain::Error::MissingSummary(_))
    ));

    engine.run_summary_stage(&id).unwrap();
    let v = engine.save_version(&id, None).unwrap();
    let cb = engine.export(&id, &v.version_id).unwrap();
    let t = cb
        .primary_codebook
        .themes
        .iter()
        .find(|t| t.id.0 == theme)
        .unwrap();
    assert_eq!(t.name, "Belonging");
    assert_eq!(t.provenance, Provenance::UserEdited);
    assert!(cb.trajectory.iter().any(
        |e| matches!(e, codebook::TrajectoryEntry::Edit { unit_id, .. } if *unit_id == theme)
    ));
    let printable = codebook::render(&cb, RenderFormat::Printable);
    assert!(printable.contains("Belonging"));
}
