//! Theme map structure and DOT output, checked by parsing the DOT back
//! with an independent parser.

use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use qdachain::ids::{CodeId, SubthemeId, ThemeId};
use qdachain::model::{
    CodesOutput, OpenCode, Provenance, StageOutputs, SubTheme, SubthemesOutput, Theme, ThemesOutput,
};
use qdachain::theme_map::{
    build_graph, emit_dot, unquote, Level, UNGROUPED_CODES, UNGROUPED_SUBTHEMES,
};

/// `parent[i]` is the index of the parent unit, if any.
#[derive(Debug, Clone)]
struct Forest {
    themes: Vec<String>,
    subthemes: Vec<(String, Option<usize>)>,
    codes: Vec<(String, Option<usize>)>,
}

fn outputs(f: &Forest) -> StageOutputs {
    let code_id = |i: usize| CodeId(format!("code-{}", i + 1));
    let sub_id = |i: usize| SubthemeId(format!("subtheme-{}", i + 1));
    let theme_id = |i: usize| ThemeId(format!("theme-{}", i + 1));
    let codes = f
        .codes
        .iter()
        .enumerate()
        .map(|(i, (name, p))| OpenCode {
            id: code_id(i),
            name: name.clone(),
            chunk_ids: vec![],
            provenance: Provenance::MachineGenerated,
            subtheme_id: p.map(sub_id),
        })
        .collect();
    let subthemes = f
        .subthemes
        .iter()
        .enumerate()
        .map(|(i, (name, p))| SubTheme {
            id: sub_id(i),
            name: name.clone(),
            code_ids: f
                .codes
                .iter()
                .enumerate()
                .filter(|(_, c)| c.1 == Some(i))
                .map(|(j, _)| code_id(j))
                .collect(),
            provenance: Provenance::MachineGenerated,
            theme_id: p.map(theme_id),
        })
        .collect();
    let themes = f
        .themes
        .iter()
        .enumerate()
        .map(|(i, name)| Theme {
            id: theme_id(i),
            name: name.clone(),
            description: String::new(),
            subtheme_ids: f
                .subthemes
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1 == Some(i))
                .map(|(j, _)| sub_id(j))
                .collect(),
            provenance: Provenance::MachineGenerated,
            research_question_ids: vec![],
        })
        .collect();
    StageOutputs {
        codes: Some(CodesOutput {
            chunks: vec![],
            codes,
            nudge: None,
            nudge_stale: false,
            requested_codes: None,
            warnings: vec![],
            template_version: "v1".into(),
        }),
        subthemes: Some(SubthemesOutput {
            subthemes,
            ungrouped_code_ids: f
                .codes
                .iter()
                .enumerate()
                .filter(|(_, c)| c.1.is_none())
                .map(|(j, _)| code_id(j))
                .collect(),
            nudge: None,
            nudge_stale: false,
            stale: false,
            template_version: "v1".into(),
        }),
        themes: Some(ThemesOutput {
            themes,
            ungrouped_subtheme_ids: f
                .subthemes
                .iter()
                .enumerate()
                .filter(|(_, s)| s.1.is_none())
                .map(|(j, _)| sub_id(j))
                .collect(),
            nudge: None,
            nudge_stale: false,
            stale: false,
            template_version: "v1".into(),
        }),
        ..Default::default()
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct ParsedNode {
    label: String,
    level: String,
    dashed: bool,
}

type Parsed = (BTreeMap<String, ParsedNode>, BTreeSet<(String, String)>);

/// The parser keeps the quotes of quoted node ids but drops them from
/// attribute values; escapes are left in place in both.
fn strip(id: &str) -> String {
    unquote(
        id.strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(id),
    )
}

fn parse(dot: &str) -> Parsed {
    let ast = dot_parser::ast::Graph::try_from(dot)
        .unwrap_or_else(|e| panic!("unparseable DOT: {e:?}\n{dot}"));
    let graph = dot_parser::canonical::Graph::from(ast);
    assert!(graph.is_digraph);
    let nodes = graph
        .nodes
        .set
        .values()
        .map(|n| {
            let attr: BTreeMap<String, String> = n
                .attr
                .elems
                .iter()
                .cloned()
                .map(|(k, v)| {
                    (
                        strip(&Into::<String>::into(k)),
                        strip(&Into::<String>::into(v)),
                    )
                })
                .collect();
            let node = ParsedNode {
                label: attr["label"].clone(),
                level: attr["level"].clone(),
                dashed: attr.get("style").map(String::as_str) == Some("dashed"),
            };
            (strip(&n.id), node)
        })
        .collect();
    let edges = graph
        .edges
        .set
        .iter()
        .map(|e| (strip(&e.from), strip(&e.to)))
        .collect();
    (nodes, edges)
}

/// Expected nodes and edges straight from the forest's child lists.
fn expected(f: &Forest) -> Parsed {
    let o = outputs(f);
    let mut nodes = BTreeMap::new();
    let mut edges = BTreeSet::new();
    let node = |label: &str, level: &str, dashed| ParsedNode {
        label: label.into(),
        level: level.into(),
        dashed,
    };
    for t in o.themes() {
        nodes.insert(t.id.0.clone(), node(&t.name, "theme", false));
        edges.extend(t.subtheme_ids.iter().map(|s| (t.id.0.clone(), s.0.clone())));
    }
    for s in o.subthemes() {
        nodes.insert(s.id.0.clone(), node(&s.name, "subtheme", false));
        edges.extend(s.code_ids.iter().map(|c| (s.id.0.clone(), c.0.clone())));
    }
    for c in o.codes() {
        nodes.insert(c.id.0.clone(), node(&c.name, "code", false));
    }
    let themes = o.themes.as_ref().unwrap();
    if !themes.ungrouped_subtheme_ids.is_empty() {
        nodes.insert(
            UNGROUPED_SUBTHEMES.into(),
            node("Ungrouped subthemes", "theme", true),
        );
        edges.extend(
            themes
                .ungrouped_subtheme_ids
                .iter()
                .map(|s| (UNGROUPED_SUBTHEMES.into(), s.0.clone())),
        );
    }
    let subs = o.subthemes.as_ref().unwrap();
    if !subs.ungrouped_code_ids.is_empty() {
        nodes.insert(
            UNGROUPED_CODES.into(),
            node("Ungrouped codes", "subtheme", true),
        );
        edges.extend(
            subs.ungrouped_code_ids
                .iter()
                .map(|c| (UNGROUPED_CODES.into(), c.0.clone())),
        );
    }
    (nodes, edges)
}

fn fixture() -> Forest {
    Forest {
        themes: vec!["Work".into(), "Home".into()],
        subthemes: vec![("Pressure".into(), Some(0)), ("Routine".into(), Some(1))],
        codes: vec![
            ("Deadlines".into(), Some(0)),
            ("Overtime".into(), Some(0)),
            ("Meals".into(), Some(1)),
        ],
    }
}

#[test]
fn seven_node_fixture() {
    let graph = build_graph(&outputs(&fixture())).unwrap();
    assert_eq!(graph.nodes.len(), 7);
    assert_eq!(graph.edges.len(), 5);
    assert!(graph.nodes.iter().all(|n| !n.pseudo));
    let levels: Vec<Level> = graph.nodes.iter().map(|n| n.level).collect();
    assert_eq!(levels.iter().filter(|l| **l == Level::Theme).count(), 2);
    assert_eq!(levels.iter().filter(|l| **l == Level::Code).count(), 3);
    assert_eq!(parse(&emit_dot(&graph)), expected(&fixture()));
}

#[test]
fn ungrouped_units_hang_under_pseudo_parents() {
    let mut f = fixture();
    f.subthemes.push(("Loose".into(), None));
    f.codes.push(("Stray".into(), None));
    let graph = build_graph(&outputs(&f)).unwrap();
    let pseudo: Vec<&str> = graph
        .nodes
        .iter()
        .filter(|n| n.pseudo)
        .map(|n| n.id.as_str())
        .collect();
    assert_eq!(pseudo, [UNGROUPED_SUBTHEMES, UNGROUPED_CODES]);
    assert!(graph
        .edges
        .contains(&(UNGROUPED_SUBTHEMES.into(), "subtheme-3".into())));
    assert!(graph
        .edges
        .contains(&(UNGROUPED_CODES.into(), "code-4".into())));
    let dot = emit_dot(&graph);
    assert!(dot.contains("style=dashed"));
    assert_eq!(parse(&dot), expected(&f));
}

#[test]
fn empty_hierarchy_gives_empty_graph() {
    let f = Forest {
        themes: vec![],
        subthemes: vec![],
        codes: vec![],
    };
    let graph = build_graph(&outputs(&f)).unwrap();
    assert!(graph.nodes.is_empty() && graph.edges.is_empty());
    let (nodes, edges) = parse(&emit_dot(&graph));
    assert!(nodes.is_empty() && edges.is_empty());
}

#[test]
fn missing_or_stale_themes_are_refused() {
    let mut o = outputs(&fixture());
    o.themes.as_mut().unwrap().stale = true;
    assert!(matches!(
        build_graph(&o),
        Err(qdachain::Error::StaleStage { .. })
    ));
    o.themes = None;
    assert!(matches!(
        build_graph(&o),
        Err(qdachain::Error::StageNotCommitted { .. })
    ));
}

#[test]
fn awkward_labels_survive() {
    let mut f = fixture();
    f.themes[0] = "He said \"no\"".into();
    f.subthemes[0].0 = "ends with \\".into();
    f.codes[0].0 = "two\nlines".into();
    f.codes[1].0 = "brace { ; -> }".into();
    assert_eq!(
        parse(&emit_dot(&build_graph(&outputs(&f)).unwrap())),
        expected(&f)
    );
}

fn label() -> impl Strategy<Value = String> {
    prop::collection::vec(
        prop_oneof![
            6 => prop::char::range('a', 'z'),
            1 => prop::sample::select(vec![' ', '"', '\\', '\n', '{', '}', ';', '-', '>', '=', '[', ']', 'é', '中']),
        ],
        1..24,
    )
    .prop_map(|cs| cs.into_iter().collect())
}

fn forest() -> impl Strategy<Value = Forest> {
    (0usize..4, 0usize..7, 0usize..10).prop_flat_map(|(nt, ns, nc)| {
        let parent =
            |n: usize| prop::option::of(0..n.max(1)).prop_map(move |p| p.filter(|_| n > 0));
        (
            prop::collection::vec(label(), nt),
            prop::collection::vec((label(), parent(nt)), ns),
            prop::collection::vec((label(), parent(ns)), nc),
        )
            .prop_map(|(themes, subthemes, codes)| Forest {
                themes,
                subthemes,
                codes,
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn dot_round_trips_through_an_independent_parser(f in forest()) {
        let graph = build_graph(&outputs(&f)).unwrap();
        let dot = emit_dot(&graph);
        prop_assert_eq!(parse(&dot), expected(&f));
        // Deterministic output.
        prop_assert_eq!(emit_dot(&build_graph(&outputs(&f)).unwrap()), dot);
    }
}
