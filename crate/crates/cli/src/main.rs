use std::net::SocketAddr;
use std::process::ExitCode;

use clap::Parser;
use texlang_cli::{run, serve, serve_api, Cli, Command};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Serve { port, host, store, phrases, model, precision, config } => {
            serve_api(&store, phrases.as_deref(), model.as_deref(), precision.into(), config.as_deref()).and_then(|api| {
                let addr: SocketAddr = format!("{host}:{port}")
                    .parse()
                    .map_err(|e| texlang::Error::Config(format!("bad address {host}:{port}: {e}")))?;
                let rt = tokio::runtime::Runtime::new().map_err(|e| texlang::Error::io("runtime", e))?;
                rt.block_on(serve(api, addr)).map_err(|e| texlang::Error::io(addr.to_string(), e))
            })
        }
        other => run(other),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
