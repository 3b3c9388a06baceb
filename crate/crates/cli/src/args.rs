use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qdachain::gateway::{ProviderKind, ReasoningEffort};
use qdachain::ProviderConfig;
use qdachain_server::EngineOptions;

#[derive(Debug, Parser)]
#[command(
    name = "qdachain",
    version,
    about = "LLM-assisted thematic analysis with verbatim checks and an audit trail"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the full chain headlessly over plain-text inputs.
    Run(RunArgs),
    /// Coverage evaluation over a genre-tagged corpus.
    Eval(EvalArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
    /// Render a saved version's codebook.
    Export(ExportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderChoice {
    Live,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EffortChoice {
    Minimal,
    Standard,
}

#[derive(Debug, Clone, Args)]
pub struct ProviderArgs {
    #[arg(long, value_enum, default_value = "mock", env = "QDACHAIN_PROVIDER")]
    pub provider: ProviderChoice,
    /// Mock script (JSON); plain verbatim echo when omitted.
    #[arg(long, env = "QDACHAIN_MOCK_SCRIPT")]
    pub mock_script: Option<PathBuf>,
    /// Chat-completions URL of the live provider.
    #[arg(
        long,
        env = "QDACHAIN_ENDPOINT",
        default_value = "https://api.openai.com/v1/chat/completions"
    )]
    pub endpoint: String,
    #[arg(long, env = "QDACHAIN_MODEL", default_value = "gpt-5")]
    pub model: String,
    #[arg(long, value_enum, default_value = "minimal")]
    pub reasoning_effort: EffortChoice,
    /// Environment variable holding the API key.
    #[arg(long, default_value = "OPENAI_API_KEY")]
    pub api_key_env: String,
    #[arg(long, default_value_t = 600)]
    pub request_timeout_secs: u64,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub max_repair_attempts: u32,
    /// Timestamps from a fixed start, one second per reading.
    #[arg(long, env = "QDACHAIN_DETERMINISTIC_CLOCK")]
    pub deterministic_clock: bool,
}

impl ProviderArgs {
    pub fn config(&self) -> ProviderConfig {
        let mut config = match self.provider {
            ProviderChoice::Mock => ProviderConfig::mock(),
            ProviderChoice::Live => ProviderConfig::live(&self.endpoint, &self.model),
        };
        config.reasoning_effort = match self.reasoning_effort {
            EffortChoice::Minimal => ReasoningEffort::Minimal,
            EffortChoice::Standard => ReasoningEffort::Standard,
        };
        config.api_key_env = self.api_key_env.clone();
        config.request_timeout = Duration::from_secs(self.request_timeout_secs);
        config.max_repair_attempts = self.max_repair_attempts;
        debug_assert_eq!(
            config.provider_kind == ProviderKind::Mock,
            self.provider == ProviderChoice::Mock
        );
        config
    }

    pub fn engine_options(&self, storage_root: PathBuf) -> EngineOptions {
        EngineOptions {
            storage_root,
            provider: self.config(),
            mock_script: self.mock_script.clone(),
            deterministic_clock: self.deterministic_clock,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Plain-text input document; repeat for several.
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    /// Research questions, one per line.
    #[arg(long)]
    pub questions_file: Option<PathBuf>,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub number_of_codes: Option<u32>,
    /// Storage root the session is written under.
    #[arg(long, env = "QDACHAIN_STORAGE")]
    pub out: PathBuf,
    /// Save a version once the chain completes.
    #[arg(long)]
    pub save_version: bool,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of genre subdirectories holding `.txt` documents.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u32).range(1..))]
    pub runs: u32,
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub parallelism: u32,
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    pub number_of_codes: Option<u32>,
    #[arg(long)]
    pub questions_file: Option<PathBuf>,
    /// Directory for the result tables; printed only when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "QDACHAIN_LISTEN", default_value = "127.0.0.1:8080")]
    pub listen: SocketAddr,
    #[arg(long, env = "QDACHAIN_STORAGE")]
    pub storage: PathBuf,
    #[command(flatten)]
    pub provider: ProviderArgs,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long, env = "QDACHAIN_STORAGE")]
    pub storage: PathBuf,
    #[arg(long)]
    pub session: String,
    #[arg(long)]
    pub version: String,
    #[arg(long, default_value = "printable")]
    pub format: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub provider: ProviderArgs,
}
