//! Synthetic model replies for the built-in stage schemas.
//!
//! Open codes echo each document sentence by sentence, verbatim; higher
//! stages group their inputs pairwise. Output depends only on the request,
//! so repeated runs are bit-identical.

use serde_json::{json, Map, Value};

use super::mock::EchoConfig;
use super::ChainRequest;

pub fn respond(request: &ChainRequest, config: &EchoConfig) -> Value {
    let payload = &request.payload;
    match request.schema_id.split('.').next().unwrap_or_default() {
        "codes" => codes(payload, config.keep_fraction),
        "subthemes" => subthemes(payload),
        "themes" => themes(payload),
        "summary" => summary(payload),
        "nudge" => nudge(payload),
        _ => json!({}),
    }
}

fn str_field<'a>(v: &'a Value, key: &str) -> &'a str {
    v.get(key).and_then(Value::as_str).unwrap_or_default()
}

fn list<'a>(v: &'a Value, key: &str) -> &'a [Value] {
    v.get(key)
        .and_then(Value::as_array)
        .map_or(&[], Vec::as_slice)
}

/// Sentence segments of `chars[start..end]`, as (start, end) char spans with
/// surrounding whitespace trimmed.
fn sentences(chars: &[char], start: usize, end: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut seg_start = start;
    let push = |s: usize, e: usize, out: &mut Vec<(usize, usize)>| {
        let mut s = s;
        let mut e = e;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push((s, e));
        }
    };
    for i in start..end {
        let c = chars[i];
        let boundary = c == '\n'
            || (matches!(c, '.' | '!' | '?') && (i + 1 == end || chars[i + 1].is_whitespace()));
        if boundary {
            push(seg_start, i + 1, &mut out);
            seg_start = i + 1;
        }
    }
    push(seg_start, end, &mut out);
    out
}

/// Char index just past the last kept token.
fn cut_point(chars: &[char], keep_fraction: f64) -> usize {
    if keep_fraction >= 1.0 {
        return chars.len();
    }
    let mut token_ends = Vec::new();
    for i in 0..chars.len() {
        if !chars[i].is_whitespace() && (i + 1 == chars.len() || chars[i + 1].is_whitespace()) {
            token_ends.push(i + 1);
        }
    }
    let keep = (keep_fraction.max(0.0) * token_ends.len() as f64).floor() as usize;
    if keep == 0 {
        0
    } else {
        token_ends[keep - 1]
    }
}

fn first_words(text: &str, n: usize) -> String {
    text.split_whitespace()
        .take(n)
        .collect::<Vec<_>>()
        .join(" ")
}

fn codes(payload: &Value, keep_fraction: f64) -> Value {
    let mut segments: Vec<(String, String)> = Vec::new();
    for doc in list(payload, "documents") {
        let doc_ref = str_field(doc, "ref");
        let chars: Vec<char> = str_field(doc, "text").chars().collect();
        let cut = cut_point(&chars, keep_fraction);
        let mut fixed: Vec<(usize, usize)> = list(payload, "fixed_chunks")
            .iter()
            .filter(|f| str_field(f, "document") == doc_ref)
            .filter_map(|f| {
                Some((
                    f.get("start")?.as_u64()? as usize,
                    f.get("end")?.as_u64()? as usize,
                ))
            })
            .collect();
        fixed.sort_unstable();
        let mut cursor = 0;
        let mut regions = Vec::new();
        for (s, e) in fixed {
            if s > cursor {
                regions.push((cursor, s));
            }
            cursor = cursor.max(e);
        }
        regions.push((cursor, chars.len()));
        for (s, e) in regions {
            let e = e.min(cut);
            if s >= e {
                continue;
            }
            for (a, b) in sentences(&chars, s, e) {
                segments.push((doc_ref.to_owned(), chars[a..b].iter().collect()));
            }
        }
    }
    if segments.is_empty() {
        return json!({ "codes": [] });
    }
    let total = segments.len();
    let requested = payload
        .get("number_of_codes")
        .and_then(Value::as_u64)
        .map(|n| n as usize)
        .unwrap_or_else(|| (total as f64).sqrt().ceil() as usize)
        .clamp(1, total);
    let mut groups: Vec<Vec<Value>> = vec![Vec::new(); requested];
    for (i, (doc_ref, text)) in segments.into_iter().enumerate() {
        groups[i * requested / total].push(json!({ "document": doc_ref, "text": text }));
    }
    let codes: Vec<Value> = groups
        .into_iter()
        .enumerate()
        .map(|(i, chunks)| {
            let lead = first_words(str_field(&chunks[0], "text"), 3);
            json!({ "name": format!("Code {}: {}", i + 1, lead), "chunks": chunks })
        })
        .collect();
    json!({ "codes": codes })
}

fn pairwise(refs: &[(String, String)], leftover_joins_last: bool) -> (Vec<Vec<usize>>, Vec<usize>) {
    let mut groups: Vec<Vec<usize>> = (0..refs.len() / 2)
        .map(|i| vec![2 * i, 2 * i + 1])
        .collect();
    let mut ungrouped = Vec::new();
    if refs.len() % 2 == 1 {
        let last = refs.len() - 1;
        match groups.last_mut() {
            Some(g) if leftover_joins_last => g.push(last),
            None => groups.push(vec![last]),
            Some(_) => ungrouped.push(last),
        }
    }
    (groups, ungrouped)
}

fn refs(payload: &Value, key: &str) -> Vec<(String, String)> {
    list(payload, key)
        .iter()
        .map(|u| {
            (
                str_field(u, "ref").to_owned(),
                str_field(u, "name").to_owned(),
            )
        })
        .collect()
}

fn subthemes(payload: &Value) -> Value {
    let codes = refs(payload, "codes");
    let (groups, ungrouped) = pairwise(&codes, false);
    let subthemes: Vec<Value> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            json!({
                "name": format!("Subtheme {}: {}", i + 1, codes[g[0]].1),
                "codes": g.iter().map(|&c| codes[c].0.clone()).collect::<Vec<_>>(),
            })
        })
        .collect();
    json!({
        "subthemes": subthemes,
        "ungrouped": ungrouped.iter().map(|&c| codes[c].0.clone()).collect::<Vec<_>>(),
    })
}

fn themes(payload: &Value) -> Value {
    let subs = refs(payload, "subthemes");
    let questions: Vec<&str> = list(payload, "research_questions")
        .iter()
        .map(|q| str_field(q, "ref"))
        .collect();
    let (groups, _) = pairwise(&subs, true);
    let themes: Vec<Value> = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let mut theme = Map::new();
            theme.insert(
                "name".into(),
                json!(format!("Theme {}: {}", i + 1, subs[g[0]].1)),
            );
            theme.insert(
                "description".into(),
                json!(format!(
                    "Groups {} subtheme(s) starting with {}.",
                    g.len(),
                    subs[g[0]].1
                )),
            );
            theme.insert(
                "subthemes".into(),
                json!(g.iter().map(|&s| subs[s].0.clone()).collect::<Vec<_>>()),
            );
            if !questions.is_empty() {
                theme.insert(
                    "research_questions".into(),
                    json!([questions[i % questions.len()]]),
                );
            }
            Value::Object(theme)
        })
        .collect();
    json!({ "themes": themes, "ungrouped": [] })
}

fn summary(payload: &Value) -> Value {
    let findings: Vec<Value> = list(payload, "themes")
        .iter()
        .map(|theme| {
            let mut supporting = vec![json!(str_field(theme, "ref"))];
            if let Some(first) = list(theme, "subthemes").first() {
                supporting.push(first.clone());
            }
            let question = list(theme, "research_questions").first().cloned().unwrap_or(Value::Null);
            json!({
                "summary": format!("{} is supported by {} subtheme(s).", str_field(theme, "name"), list(theme, "subthemes").len()),
                "supporting": supporting,
                "research_question": question,
            })
        })
        .collect();
    json!({ "findings": findings })
}

fn nudge(payload: &Value) -> Value {
    const TIERS: [&str; 3] = ["most_confident", "less_confident", "ambiguous"];
    let target = str_field(payload, "target_stage");
    let units = list(payload, "units");
    let critique: Vec<Value> = units
        .iter()
        .enumerate()
        .map(|(i, u)| {
            json!({
                "unit": str_field(u, "ref"),
                "confidence": TIERS[i % TIERS.len()],
                "rationale": format!("{} has {} member(s).", str_field(u, "name"), list(u, "members").len()),
            })
        })
        .collect();
    json!({
        "what_llm_did": format!("Produced {} {} unit(s) by grouping the input by similarity.", units.len(), target),
        "self_critique": critique,
    })
}
