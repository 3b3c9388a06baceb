//! Coverage evaluation: run the codes stage several times per document and
//! tabulate per-document and per-genre mean Jaccard.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qdachain::store::MemoryStore;
use qdachain::{Engine, Gateway, ResearchQuestion, SourceDocument, StageParameters};
use qdachain_server::setup::{self, EngineOptions, SetupError};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("corpus {0} holds no documents")]
    EmptyCorpus(PathBuf),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Setup(#[from] SetupError),
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

#[derive(Debug, Clone)]
pub struct CorpusDocument {
    pub genre: String,
    pub path: PathBuf,
    pub document: SourceDocument,
}

/// Loads `corpus/<genre>/<doc>.txt`, sorted by genre then file name.
pub fn load_corpus(root: &Path) -> Result<Vec<CorpusDocument>, EvalError> {
    let io = |path: &Path| {
        let path = path.to_owned();
        move |source| EvalError::Io { path, source }
    };
    let mut genres: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    genres.sort();
    let mut docs = Vec::new();
    for dir in genres {
        let genre = dir
            .file_name()
            .unwrap_or_default()
            .to_string_lossy()
            .into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for path in files {
            let document = setup::document_from_file(&path).map_err(io(&path))?;
            docs.push(CorpusDocument {
                genre: genre.clone(),
                path,
                document,
            });
        }
    }
    if docs.is_empty() {
        return Err(EvalError::EmptyCorpus(root.to_owned()));
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jaccard: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentResult {
    pub document: String,
    pub runs: Vec<RunResult>,
    /// Mean over successful runs.
    pub mean_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenreResult {
    pub genre: String,
    pub documents: Vec<DocumentResult>,
    /// Mean of the document means.
    pub mean_jaccard: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub provider: String,
    pub runs_per_document: u32,
    pub genres: Vec<GenreResult>,
    /// Mean of the genre means.
    pub overall_mean_jaccard: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub runs: u32,
    pub parallelism: usize,
    pub number_of_codes: Option<u32>,
    pub questions: Vec<ResearchQuestion>,
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One codes-stage run on a fresh in-memory engine. Each run gets its own
/// provider, so ordinal mock scripts restart at their first reply.
fn run_once(
    options: &EngineOptions,
    doc: &SourceDocument,
    settings: &EvalSettings,
) -> Result<f64, String> {
    let provider = setup::provider(options).map_err(|e| e.to_string())?;
    let gateway = Gateway::new(options.provider.clone(), provider);
    let engine = Engine::new(
        Arc::new(MemoryStore::default()),
        Arc::new(gateway),
        setup::clock(options.deterministic_clock),
    )
    .map_err(|e| e.to_string())?;
    let session = engine
        .create_session(vec![doc.clone()], settings.questions.clone())
        .map_err(|e| e.to_string())?;
    let params = StageParameters {
        number_of_codes: settings.number_of_codes,
        user_prompt: None,
    };
    engine
        .run_codes_stage(&session.id, params)
        .map_err(|e| format!("{} ({})", e, e.code()))?;
    let report = engine.coverage(&session.id).map_err(|e| e.to_string())?;
    Ok(report.overall_jaccard)
}

pub fn run_eval(
    corpus: &[CorpusDocument],
    options: &EngineOptions,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    // Validate the provider setup once up front rather than per job.
    setup::provider(options)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(settings.parallelism.max(1))
        .build()?;
    let jobs: Vec<(usize, u32)> = (0..corpus.len())
        .flat_map(|d| (1..=settings.runs).map(move |r| (d, r)))
        .collect();
    let mut results: Vec<(usize, RunResult)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(d, run)| {
                let outcome = run_once(options, &corpus[d].document, settings);
                if let Err(e) = &outcome {
                    tracing::warn!(document = %corpus[d].path.display(), run, error = %e, "run failed");
                }
                let (jaccard, error) = match outcome {
                    Ok(j) => (Some(j), None),
                    Err(e) => (None, Some(e)),
                };
                (d, RunResult { run, jaccard, error })
            })
            .collect()
    });
    results.sort_by_key(|(d, r)| (*d, r.run));

    let mut genres: Vec<GenreResult> = Vec::new();
    for (d, doc) in corpus.iter().enumerate() {
        let runs: Vec<RunResult> = results
            .iter()
            .filter(|(i, _)| *i == d)
            .map(|(_, r)| r.clone())
            .collect();
        let result = DocumentResult {
            document: doc.document.id.0.clone(),
            mean_jaccard: mean(runs.iter().filter_map(|r| r.jaccard)),
            runs,
        };
        match genres.last_mut() {
            Some(g) if g.genre == doc.genre => g.documents.push(result),
            _ => genres.push(GenreResult {
                genre: doc.genre.clone(),
                documents: vec![result],
                mean_jaccard: None,
            }),
        }
    }
    for g in &mut genres {
        g.mean_jaccard = mean(g.documents.iter().filter_map(|d| d.mean_jaccard));
    }
    Ok(EvalReport {
        provider: format!(
            "{} ({})",
            options.provider.provider_kind.as_str(),
            options.provider.model_name
        ),
        runs_per_document: settings.runs,
        overall_mean_jaccard: mean(genres.iter().filter_map(|g| g.mean_jaccard)),
        genres,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{v:.6}"))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| format!("{:.1}%", v * 100.0))
}

/// Per-run rows: `genre  document  run  jaccard  error`.
pub fn documents_tsv(report: &EvalReport) -> String {
    let mut out = String::from("genre\tdocument\trun\tjaccard\terror\n");
    for g in &report.genres {
        for d in &g.documents {
            for r in &d.runs {
                let error = r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ");
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}",
                    g.genre,
                    d.document,
                    r.run,
                    fmt_opt(r.jaccard),
                    error
                );
            }
        }
    }
    out
}

/// Per-genre rows plus a final `average` row.
pub fn genres_tsv(report: &EvalReport) -> String {
    let mut out = String::from("genre\tdocuments\tfailed_runs\tmean_jaccard\n");
    for g in &report.genres {
        let failed = g
            .documents
            .iter()
            .flat_map(|d| &d.runs)
            .filter(|r| r.error.is_some())
            .count();
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}",
            g.genre,
            g.documents.len(),
            failed,
            fmt_opt(g.mean_jaccard)
        );
    }
    let docs: usize = report.genres.iter().map(|g| g.documents.len()).sum();
    let failed: usize = report
        .genres
        .iter()
        .flat_map(|g| &g.documents)
        .flat_map(|d| &d.runs)
        .filter(|r| r.error.is_some())
        .count();
    let _ = writeln!(
        out,
        "average\t{docs}\t{failed}\t{}",
        fmt_opt(report.overall_mean_jaccard)
    );
    out
}

/// Aligned text: the per-genre table, then per-document means.
pub fn render_text(report: &EvalReport) -> String {
    let mut rows: Vec<[String; 4]> = vec![[
        "genre".into(),
        "documents".into(),
        "mean jaccard".into(),
        "percent".into(),
    ]];
    for g in &report.genres {
        rows.push([
            g.genre.clone(),
            g.documents.len().to_string(),
            fmt_opt(g.mean_jaccard),
            pct(g.mean_jaccard),
        ]);
    }
    let docs: usize = report.genres.iter().map(|g| g.documents.len()).sum();
    rows.push([
        "average".into(),
        docs.to_string(),
        fmt_opt(report.overall_mean_jaccard),
        pct(report.overall_mean_jaccard),
    ]);
    let mut out = format!(
        "provider: {}, runs per document: {}\n\n",
        report.provider, report.runs_per_document
    );
    out.push_str(&align(&rows));
    out.push('\n');
    let mut rows: Vec<[String; 4]> = vec![[
        "genre".into(),
        "document".into(),
        "mean jaccard".into(),
        "runs ok".into(),
    ]];
    for g in &report.genres {
        for d in &g.documents {
            let ok = d.runs.iter().filter(|r| r.jaccard.is_some()).count();
            rows.push([
                g.genre.clone(),
                d.document.clone(),
                fmt_opt(d.mean_jaccard),
                format!("{ok}/{}", d.runs.len()),
            ]);
        }
    }
    out.push_str(&align(&rows));
    out
}

fn align(rows: &[[String; 4]]) -> String {
    let widths: Vec<usize> = (0..4)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in rows {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, w)| format!("{cell:<w$}"))
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Writes `eval.json`, `genres.tsv`, `documents.tsv` and `eval.txt`.
pub fn write_outputs(report: &EvalReport, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    fs::write(dir.join("genres.tsv"), genres_tsv(report))?;
    fs::write(dir.join("documents.tsv"), documents_tsv(report))?;
    fs::write(dir.join("eval.txt"), render_text(report))?;
    Ok(())
}
