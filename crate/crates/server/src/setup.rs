//! Engine construction shared by the service and the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use qdachain::gateway::live::LiveProvider;
use qdachain::gateway::mock::{MockProvider, MockScript, MockScriptError};
use qdachain::gateway::{Provider, ProviderKind};
use qdachain::ids::QuestionId;
use qdachain::store::{FsStore, StoreError};
use qdachain::{
    Clock, Engine, Gateway, ProviderConfig, ResearchQuestion, SourceDocument, SteppingClock,
    SystemClock,
};

#[derive(Debug, Clone)]
pub struct EngineOptions {
    pub storage_root: PathBuf,
    pub provider: ProviderConfig,
    /// Script for the mock provider; plain echo when absent.
    pub mock_script: Option<PathBuf>,
    /// Use a clock that starts at a fixed instant and ticks once per reading.
    pub deterministic_clock: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum SetupError {
    #[error("storage directory is not writable: {0}")]
    StorageUnwritable(#[source] StoreError),
    #[error(transparent)]
    MockScript(#[from] MockScriptError),
    #[error(transparent)]
    Engine(#[from] qdachain::Error),
}

pub fn open_store(root: &Path) -> Result<FsStore, SetupError> {
    FsStore::open(root).map_err(SetupError::StorageUnwritable)
}

pub fn provider(options: &EngineOptions) -> Result<Arc<dyn Provider>, SetupError> {
    Ok(match options.provider.provider_kind {
        ProviderKind::Mock => {
            let script = match &options.mock_script {
                Some(path) => MockScript::load(path)?,
                None => MockScript::echo(),
            };
            Arc::new(MockProvider::new(script))
        }
        ProviderKind::Live => Arc::new(LiveProvider::new(&options.provider)),
    })
}

pub fn clock(deterministic: bool) -> Arc<dyn Clock> {
    if deterministic {
        Arc::new(SteppingClock::default())
    } else {
        Arc::new(SystemClock)
    }
}

pub fn open_engine(options: &EngineOptions) -> Result<Engine, SetupError> {
    let store = open_store(&options.storage_root)?;
    let gateway = Gateway::new(options.provider.clone(), provider(options)?);
    Ok(Engine::new(
        Arc::new(store),
        Arc::new(gateway),
        clock(options.deterministic_clock),
    )?)
}

/// A plain-text input file as a source document: the id is the file stem
/// and the title the file name.
pub fn document_from_file(path: &Path) -> std::io::Result<SourceDocument> {
    let body = fs::read_to_string(path)?;
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    Ok(SourceDocument::new(stem.as_ref(), name.as_ref(), body))
}

/// One research question per non-blank line, numbered Q1, Q2, ...
pub fn parse_questions(text: &str) -> Vec<ResearchQuestion> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .enumerate()
        .map(|(i, line)| ResearchQuestion {
            id: QuestionId(format!("Q{}", i + 1)),
            text: line.to_owned(),
        })
        .collect()
}
