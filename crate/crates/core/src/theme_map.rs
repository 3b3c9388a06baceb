//! Theme map: the coding hierarchy as a graph, and its DOT rendering.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Stage, StageOutputs};

/// Pseudo-parent holding subthemes that belong to no theme.
pub const UNGROUPED_SUBTHEMES: &str = "ungrouped-subthemes";
/// Pseudo-parent holding codes that belong to no subtheme.
pub const UNGROUPED_CODES: &str = "ungrouped-codes";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Theme,
    Subtheme,
    Code,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::Theme => "theme",
            Level::Subtheme => "subtheme",
            Level::Code => "code",
        }
    }

    pub fn parse(s: &str) -> Option<Level> {
        match s {
            "theme" => Some(Level::Theme),
            "subtheme" => Some(Level::Subtheme),
            "code" => Some(Level::Code),
            _ => None,
        }
    }

    fn child(self) -> Option<Level> {
        match self {
            Level::Theme => Some(Level::Subtheme),
            Level::Subtheme => Some(Level::Code),
            Level::Code => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub label: String,
    pub level: Level,
    /// Ungrouped bucket rather than a unit of the hierarchy.
    #[serde(default)]
    pub pseudo: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThemeGraph {
    pub nodes: Vec<GraphNode>,
    /// `(parent_id, child_id)` pairs.
    pub edges: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid theme graph: {0}")]
pub struct GraphError(pub String);

impl ThemeGraph {
    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    /// Unique ids, edges between known nodes of adjacent levels, at most
    /// one parent per node.
    pub fn check(&self) -> Result<(), GraphError> {
        let mut ids = BTreeSet::new();
        for node in &self.nodes {
            if !ids.insert(node.id.as_str()) {
                return Err(GraphError(format!("duplicate node `{}`", node.id)));
            }
        }
        let mut children = BTreeSet::new();
        for (parent, child) in &self.edges {
            let p = self
                .node(parent)
                .ok_or_else(|| GraphError(format!("unknown node `{parent}`")))?;
            let c = self
                .node(child)
                .ok_or_else(|| GraphError(format!("unknown node `{child}`")))?;
            if p.level.child() != Some(c.level) {
                return Err(GraphError(format!(
                    "edge `{parent}` -> `{child}` skips a level"
                )));
            }
            if !children.insert(child.as_str()) {
                return Err(GraphError(format!("`{child}` has more than one parent")));
            }
        }
        Ok(())
    }

    fn sort(&mut self) {
        self.nodes
            .sort_by(|a, b| (a.level, &a.id).cmp(&(b.level, &b.id)));
        self.edges.sort();
    }
}

/// Builds the theme map from committed outputs.
///
/// Codes without a subtheme hang under [`UNGROUPED_CODES`] and subthemes
/// without a theme under [`UNGROUPED_SUBTHEMES`]; each pseudo node exists
/// only when its bucket is non-empty.
pub fn build_graph(outputs: &StageOutputs) -> Result<ThemeGraph> {
    let themes = outputs.themes.as_ref().ok_or(Error::StageNotCommitted {
        stage: Stage::Themes,
    })?;
    let (subthemes, codes) = (outputs.subthemes(), outputs.codes());
    if themes.themes.is_empty() && subthemes.is_empty() && codes.is_empty() {
        return Ok(ThemeGraph::default());
    }
    if themes.stale {
        return Err(Error::StaleStage {
            stage: Stage::Themes,
        });
    }

    let mut graph = ThemeGraph::default();
    for theme in &themes.themes {
        graph.nodes.push(GraphNode {
            id: theme.id.0.clone(),
            label: theme.name.clone(),
            level: Level::Theme,
            pseudo: false,
        });
    }
    let mut ungrouped_subthemes = false;
    for sub in subthemes {
        graph.nodes.push(GraphNode {
            id: sub.id.0.clone(),
            label: sub.name.clone(),
            level: Level::Subtheme,
            pseudo: false,
        });
        let parent = match &sub.theme_id {
            Some(t) => t.0.clone(),
            None => {
                ungrouped_subthemes = true;
                UNGROUPED_SUBTHEMES.to_owned()
            }
        };
        graph.edges.push((parent, sub.id.0.clone()));
    }
    let mut ungrouped_codes = false;
    for code in codes {
        graph.nodes.push(GraphNode {
            id: code.id.0.clone(),
            label: code.name.clone(),
            level: Level::Code,
            pseudo: false,
        });
        let parent = match &code.subtheme_id {
            Some(s) => s.0.clone(),
            None => {
                ungrouped_codes = true;
                UNGROUPED_CODES.to_owned()
            }
        };
        graph.edges.push((parent, code.id.0.clone()));
    }
    if ungrouped_subthemes {
        graph.nodes.push(GraphNode {
            id: UNGROUPED_SUBTHEMES.into(),
            label: "Ungrouped subthemes".into(),
            level: Level::Theme,
            pseudo: true,
        });
    }
    if ungrouped_codes {
        graph.nodes.push(GraphNode {
            id: UNGROUPED_CODES.into(),
            label: "Ungrouped codes".into(),
            level: Level::Subtheme,
            pseudo: true,
        });
    }
    graph.sort();
    graph
        .check()
        .map_err(|e| Error::Precondition(e.to_string()))?;
    Ok(graph)
}

/// Quotes a string as a DOT double-quoted id.
///
/// A trailing backslash is followed by a line continuation so the closing
/// quote cannot be read as escaped.
pub fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    if s.ends_with('\\') {
        out.push_str("\\\n");
    }
    out.push('"');
    out
}

/// Inverse of [`quote`] for the body of a quoted id (without the quotes).
pub fn unquote(body: &str) -> String {
    let mut out = String::with_capacity(body.len());
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\n') => {}
            Some('n') => out.push('\n'),
            Some(other) => out.push(other),
            None => out.push('\\'),
        }
    }
    out
}

/// Deterministic DOT text for a graph; node and edge order follow the graph.
pub fn emit_dot(graph: &ThemeGraph) -> String {
    let mut out = String::from("digraph theme_map {\n  graph [rankdir=LR];\n  node [shape=box];\n");
    for node in &graph.nodes {
        let _ = write!(
            out,
            "  {} [label={}, level={}",
            quote(&node.id),
            quote(&node.label),
            node.level.as_str()
        );
        if node.pseudo {
            out.push_str(", style=dashed");
        }
        out.push_str("];\n");
    }
    for (parent, child) in &graph.edges {
        let _ = writeln!(out, "  {} -> {};", quote(parent), quote(child));
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quote_roundtrips_awkward_labels() {
        for s in [
            "plain",
            "say \"hi\"",
            "back\\slash",
            "ends\\",
            "two\nlines",
            "\\\"",
            "\\n literal",
        ] {
            let q = quote(s);
            assert_eq!(unquote(&q[1..q.len() - 1]), s);
        }
    }

    #[test]
    fn single_node_dot() {
        let graph = ThemeGraph {
            nodes: vec![GraphNode {
                id: "theme-1".into(),
                label: "Trust".into(),
                level: Level::Theme,
                pseudo: false,
            }],
            edges: vec![],
        };
        assert_eq!(
            emit_dot(&graph),
            "digraph theme_map {\n  graph [rankdir=LR];\n  node [shape=box];\n  \"theme-1\" [label=\"Trust\", level=theme];\n}\n"
        );
    }

    #[test]
    fn check_rejects_level_skips() {
        let graph = ThemeGraph {
            nodes: vec![
                GraphNode {
                    id: "t".into(),
                    label: "t".into(),
                    level: Level::Theme,
                    pseudo: false,
                },
                GraphNode {
                    id: "c".into(),
                    label: "c".into(),
                    level: Level::Code,
                    pseudo: false,
                },
            ],
            edges: vec![("t".into(), "c".into())],
        };
        assert!(graph.check().is_err());
    }
}
