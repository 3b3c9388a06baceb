use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use qdachain::{AnalysisSession, ProviderConfig, Stage};
use qdachain_server::{serve, EngineOptions, ServiceConfig};
use serde_json::{json, Value};

const INTERVIEW_A: &str =
    "I moved to the city for work. The rent is far too high for what you get.\n\
Most of my friends share flats with strangers. We talk every evening.\n";
const INTERVIEW_B: &str =
    "Working from home changed my routine. I miss the small talk at the office.\n\
The quiet helps me focus. Sometimes I walk to a cafe just to hear other people.\n";

fn qdachain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdachain"))
        .args(args)
        .env_remove("QDACHAIN_PROVIDER")
        .output()
        .unwrap()
}

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

fn write_inputs(dir: &Path) -> (PathBuf, PathBuf) {
    let a = dir.join("interview-a.txt");
    let b = dir.join("interview-b.txt");
    std::fs::write(&a, INTERVIEW_A).unwrap();
    std::fs::write(&b, INTERVIEW_B).unwrap();
    (a, b)
}

fn session_dirs(root: &Path) -> Vec<PathBuf> {
    match std::fs::read_dir(root.join("sessions")) {
        Ok(entries) => entries
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_dir())
            .collect(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn run_commits_all_four_stages() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_inputs(dir.path());
    let store = dir.path().join("store");
    let q = dir.path().join("questions.txt");
    std::fs::write(&q, "How do people settle in?\n\nWhat do they miss?\n").unwrap();
    let out = qdachain(&[
        "run",
        "--input",
        a.to_str().unwrap(),
        "--input",
        b.to_str().unwrap(),
        "--questions-file",
        q.to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let id = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    let text =
        std::fs::read_to_string(store.join("sessions").join(&id).join("session.json")).unwrap();
    let session = AnalysisSession::from_document(&text).unwrap();
    for stage in Stage::ALL {
        assert!(
            session.stage_outputs.is_committed(stage) && !session.stage_outputs.is_stale(stage),
            "{stage}"
        );
    }
    assert_eq!(session.research_questions.len(), 2);
    assert_eq!(session.coverage_report.unwrap().overall_jaccard, 1.0);
}

#[test]
fn unreadable_input_creates_no_session() {
    let dir = tempfile::tempdir().unwrap();
    let (a, _) = write_inputs(dir.path());
    let store = dir.path().join("store");
    let missing = dir.path().join("missing.txt");
    let out = qdachain(&[
        "run",
        "--input",
        a.to_str().unwrap(),
        "--input",
        missing.to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("cannot read input") && stderr.contains("missing.txt"),
        "{stderr}"
    );
    assert!(session_dirs(&store).is_empty());
}

/// Drives the service through the same steps `run` takes.
fn run_via_service(store: &Path, inputs: &[&Path]) -> String {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let config = ServiceConfig {
        listen: "127.0.0.1:0".parse().unwrap(),
        engine: EngineOptions {
            storage_root: store.to_owned(),
            provider: ProviderConfig::mock(),
            mock_script: None,
            deterministic_clock: true,
        },
    };
    let handle = rt.block_on(serve(config)).unwrap();
    let base = handle.base_url();
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .build()
        .into();
    let documents: Vec<Value> = inputs
        .iter()
        .map(|p| {
            json!({
                "id": p.file_stem().unwrap().to_str().unwrap(),
                "title": p.file_name().unwrap().to_str().unwrap(),
                "body": std::fs::read_to_string(p).unwrap(),
            })
        })
        .collect();
    let created: Value = agent
        .post(format!("{base}/sessions"))
        .send_json(json!({ "documents": documents }))
        .unwrap()
        .body_mut()
        .read_json()
        .unwrap();
    let id = created["id"].as_str().unwrap().to_owned();
    for stage in ["codes", "subthemes", "themes", "summary"] {
        let started: Value = agent
            .post(format!("{base}/sessions/{id}/stages/{stage}:run"))
            .send_empty()
            .unwrap()
            .body_mut()
            .read_json()
            .unwrap();
        let op = started["op_id"].as_str().unwrap();
        let deadline = Instant::now() + Duration::from_secs(30);
        loop {
            let status: Value = agent
                .get(format!("{base}/ops/{op}"))
                .call()
                .unwrap()
                .body_mut()
                .read_json()
                .unwrap();
            if status["status"] != "pending" {
                assert_eq!(status["status"], "done", "{status}");
                break;
            }
            assert!(Instant::now() < deadline);
            std::thread::sleep(Duration::from_millis(20));
        }
    }
    rt.block_on(handle.shutdown()).unwrap();
    id
}

#[test]
fn cli_and_service_write_identical_session_documents() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_inputs(dir.path());
    let cli_store = dir.path().join("cli");
    let out = qdachain(&[
        "run",
        "--input",
        a.to_str().unwrap(),
        "--input",
        b.to_str().unwrap(),
        "--out",
        cli_store.to_str().unwrap(),
        "--deterministic-clock",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cli_id = String::from_utf8(out.stdout).unwrap().trim().to_owned();

    let svc_store = dir.path().join("svc");
    let svc_id = run_via_service(&svc_store, &[&a, &b]);
    assert_eq!(cli_id, svc_id);
    for file in ["session.json", "trail.ndjson"] {
        let cli = std::fs::read(cli_store.join("sessions").join(&cli_id).join(file)).unwrap();
        let svc = std::fs::read(svc_store.join("sessions").join(&svc_id).join(file)).unwrap();
        assert!(
            cli == svc,
            "{file} differs between the CLI and service paths"
        );
    }
}

fn parse_tsv(text: &str) -> Vec<BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split('\t').collect();
    lines
        .map(|l| {
            header
                .iter()
                .map(|h| h.to_string())
                .zip(l.split('\t').map(str::to_owned))
                .collect()
        })
        .collect()
}

fn file_digests(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for genre in std::fs::read_dir(root).unwrap() {
        for f in std::fs::read_dir(genre.unwrap().path()).unwrap() {
            let p = f.unwrap().path();
            out.insert(p.clone(), std::fs::read(p).unwrap());
        }
    }
    out
}

#[test]
fn eval_tables_have_the_genre_shape_and_correct_means() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_dir();
    let before = file_digests(&corpus);
    let out_a = dir.path().join("a");
    let out = qdachain(&[
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--runs",
        "3",
        "--parallelism",
        "4",
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(file_digests(&corpus), before, "eval modified its inputs");

    let genres = parse_tsv(&std::fs::read_to_string(out_a.join("genres.tsv")).unwrap());
    let names: Vec<&str> = genres.iter().map(|r| r["genre"].as_str()).collect();
    assert_eq!(
        names,
        [
            "blogs",
            "emails",
            "quora",
            "stackoverflow",
            "transcripts",
            "wikipedia",
            "average"
        ]
    );
    for row in &genres {
        assert_eq!(
            row["mean_jaccard"], "1.000000",
            "perfect echo must cover everything"
        );
    }

    // Independent summation from the per-run rows.
    let runs = parse_tsv(&std::fs::read_to_string(out_a.join("documents.tsv")).unwrap());
    assert_eq!(runs.len(), 12 * 3);
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_a.join("eval.json")).unwrap()).unwrap();
    let mut per_doc: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for r in &runs {
        per_doc
            .entry((r["genre"].clone(), r["document"].clone()))
            .or_default()
            .push(r["jaccard"].parse().unwrap());
    }
    for g in report["genres"].as_array().unwrap() {
        let docs: Vec<f64> = per_doc
            .iter()
            .filter(|((genre, _), _)| genre == g["genre"].as_str().unwrap())
            .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let expected = docs.iter().sum::<f64>() / docs.len() as f64;
        assert!((g["mean_jaccard"].as_f64().unwrap() - expected).abs() < 1e-12);
    }

    // Repeated runs produce identical tables.
    let out_b = dir.path().join("b");
    let out = qdachain(&[
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--runs",
        "3",
        "--parallelism",
        "2",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    for f in ["genres.tsv", "documents.tsv", "eval.txt", "eval.json"] {
        assert_eq!(
            std::fs::read(out_a.join(f)).unwrap(),
            std::fs::read(out_b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn eval_with_word_dropping_script_matches_hand_computed_values() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    // Echo keeps the first half of each document's whitespace tokens.
    let fixtures = [
        ("g1", "greek", "alpha beta gamma delta", 2.0 / 4.0),
        ("g1", "pairs", "a b a b c d", 2.0 / 4.0),
        ("g2", "repeats", "one one one two", 1.0 / 2.0),
        ("g2", "colours", "red red blue green", 1.0 / 3.0),
    ];
    for (genre, name, body, _) in fixtures {
        std::fs::create_dir_all(corpus.join(genre)).unwrap();
        std::fs::write(corpus.join(genre).join(format!("{name}.txt")), body).unwrap();
    }
    let script = dir.path().join("half.json");
    std::fs::write(&script, r#"{"fallback": {"keep_fraction": 0.5}}"#).unwrap();
    let out_dir = dir.path().join("out");
    let out = qdachain(&[
        "eval",
        "--corpus",
        corpus.to_str().unwrap(),
        "--runs",
        "2",
        "--mock-script",
        script.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let report: Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("eval.json")).unwrap()).unwrap();
    let mut got = BTreeMap::new();
    for g in report["genres"].as_array().unwrap() {
        for d in g["documents"].as_array().unwrap() {
            got.insert(
                d["document"].as_str().unwrap().to_owned(),
                d["mean_jaccard"].as_f64().unwrap(),
            );
        }
    }
    for (_, name, _, expected) in fixtures {
        assert_eq!(got[name], expected, "{name}");
    }
    assert_eq!(report["genres"][0]["mean_jaccard"].as_f64().unwrap(), 0.5);
    assert_eq!(
        report["genres"][1]["mean_jaccard"].as_f64().unwrap(),
        (0.5 + 1.0 / 3.0) / 2.0
    );
}

#[test]
fn eval_over_an_empty_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty-genre")).unwrap();
    let out = qdachain(&["eval", "--corpus", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("holds no documents"));
}

#[test]
fn export_renders_a_saved_version() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_inputs(dir.path());
    let store = dir.path().join("store");
    let out = qdachain(&[
        "run",
        "--input",
        a.to_str().unwrap(),
        "--input",
        b.to_str().unwrap(),
        "--out",
        store.to_str().unwrap(),
        "--save-version",
    ]);
    assert!(out.status.success());
    let id = String::from_utf8(out.stdout).unwrap().trim().to_owned();
    let file = dir.path().join("codebook.md");
    let out = qdachain(&[
        "export",
        "--storage",
        store.to_str().unwrap(),
        "--session",
        &id,
        "--version",
        "v1",
        "--out",
        file.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let printable = std::fs::read_to_string(&file).unwrap();
    let headings: BTreeSet<&str> = printable.lines().filter(|l| l.starts_with("## ")).collect();
    assert_eq!(headings.len(), 4);
    let out = qdachain(&[
        "export",
        "--storage",
        store.to_str().unwrap(),
        "--session",
        &id,
        "--version",
        "v7",
    ]);
    assert!(!out.status.success());
}
