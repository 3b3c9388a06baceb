//! Versioned stage templates shipped with the engine.

use crate::model::Stage;

pub const TEMPLATE_VERSION: &str = "v1";

pub const PLACEHOLDERS: [&str; 5] = [
    "data",
    "number_of_codes",
    "user_prompt",
    "research_questions",
    "upstream_output",
];

/// Template for a stage, or for nudge generation when `stage` is `None`.
pub fn template(stage: Option<Stage>) -> &'static str {
    match stage {
        Some(Stage::Codes) => include_str!("../../templates/v1/codes.txt"),
        Some(Stage::Subthemes) => include_str!("../../templates/v1/subthemes.txt"),
        Some(Stage::Themes) => include_str!("../../templates/v1/themes.txt"),
        Some(Stage::Summary) => include_str!("../../templates/v1/summary.txt"),
        None => include_str!("../../templates/v1/nudge.txt"),
    }
}

/// Substitutes `{name}` placeholders in one pass; braces that do not form a
/// known placeholder are copied through, as are braces in substituted values.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let name = &after[..close];
            values
                .iter()
                .find(|(k, _)| *k == name)
                .map(|(_, v)| (*v, close))
        });
        match hit {
            Some((value, close)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}
