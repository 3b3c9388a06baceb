use std::process::ExitCode;

use clap::Parser;
use qdachain_cli::args::{Cli, Command};
use tracing_subscriber::EnvFilter;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => qdachain_cli::run(args).map(|id| println!("{id}")),
        Command::Eval(args) => qdachain_cli::eval(args)
            .map(|report| print!("{}", qdachain_cli::eval::render_text(&report))),
        Command::Export(args) => qdachain_cli::export(args).map(drop),
        Command::Serve(args) => tokio::runtime::Runtime::new()
            .map_err(anyhow::Error::from)
            .and_then(|rt| rt.block_on(qdachain_cli::serve(args))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
