//! Command implementations behind the `qdachain` binary.

pub mod args;
pub mod eval;

use std::fs;
use std::io::Write as _;

use anyhow::{bail, Context, Result};
use qdachain::codebook::RenderFormat;
use qdachain::ids::{SessionId, VersionId};
use qdachain::{Stage, StageParameters};
use qdachain_server::{setup, ServiceConfig};

use crate::args::{EvalArgs, ExportArgs, RunArgs, ServeArgs};

/// Runs all four stages over the inputs and returns the session id.
///
/// Inputs are read before the store is opened, so a bad path leaves no
/// session behind.
pub fn run(args: &RunArgs) -> Result<SessionId> {
    let documents = args
        .inputs
        .iter()
        .map(|p| {
            setup::document_from_file(p)
                .with_context(|| format!("cannot read input {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let questions = match &args.questions_file {
        Some(p) => setup::parse_questions(
            &fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
        ),
        None => Vec::new(),
    };
    let engine = setup::open_engine(&args.provider.engine_options(args.out.clone()))?;
    let session = engine.create_session(documents, questions)?;
    for stage in Stage::ALL {
        let params = StageParameters {
            number_of_codes: args.number_of_codes.filter(|_| stage == Stage::Codes),
            user_prompt: None,
        };
        let run = engine
            .run_stage(&session.id, stage, params)
            .with_context(|| format!("{stage} stage failed for session {}", session.id))?;
        for w in &run.warnings {
            tracing::warn!(%stage, "{w}");
        }
    }
    if args.save_version {
        engine.save_version(&session.id, None)?;
    }
    Ok(session.id)
}

pub fn eval(args: &EvalArgs) -> Result<eval::EvalReport> {
    let corpus = eval::load_corpus(&args.corpus)?;
    let questions = match &args.questions_file {
        Some(p) => setup::parse_questions(
            &fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?,
        ),
        None => Vec::new(),
    };
    let settings = eval::EvalSettings {
        runs: args.runs,
        parallelism: args.parallelism as usize,
        number_of_codes: args.number_of_codes,
        questions,
    };
    // Eval sessions live in memory; the storage root is never touched.
    let options = args.provider.engine_options(std::env::temp_dir());
    let report = eval::run_eval(&corpus, &options, &settings)?;
    if let Some(dir) = &args.out {
        eval::write_outputs(&report, dir)
            .with_context(|| format!("cannot write results to {}", dir.display()))?;
    }
    Ok(report)
}

pub fn export(args: &ExportArgs) -> Result<String> {
    let Some(format) = RenderFormat::parse(&args.format) else {
        bail!(
            "unknown format `{}` (expected printable or structured)",
            args.format
        );
    };
    let engine = setup::open_engine(&args.provider.engine_options(args.storage.clone()))?;
    let (_, rendered) = engine.record_export(
        &SessionId(args.session.clone()),
        &VersionId(args.version.clone()),
        format,
    )?;
    match &args.out {
        Some(path) => fs::write(path, &rendered)
            .with_context(|| format!("cannot write {}", path.display()))?,
        None => std::io::stdout().write_all(rendered.as_bytes())?,
    }
    Ok(rendered)
}

pub async fn serve(args: &ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        listen: args.listen,
        engine: args.provider.engine_options(args.storage.clone()),
    };
    let handle = qdachain_server::serve(config).await?;
    // Announced on stdout so scripts can wait for readiness.
    println!("listening on {}", handle.base_url());
    shutdown_signal().await;
    handle.shutdown().await?;
    Ok(())
}

async fn shutdown_signal() {
    #[cfg(unix)]
    {
        let mut term = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate())
            .expect("signal handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    let _ = tokio::signal::ctrl_c().await;
}
