mod account;
mod args;
mod audit;
mod config;
mod doc;
mod error;
mod files;
mod http;
mod output;
mod serve;

use std::process::ExitCode;

use clap::Parser;

use args::{CaCmd, Cli, Command, NodeCmd};
use config::Settings;
use error::CliResult;
use http::Http;
use output::Out;

fn run(cli: Cli) -> CliResult {
    let settings = Settings::resolve(&cli)?;
    let out = Out::new(settings.format);
    let s = &settings;
    match cli.command {
        Command::Ca(CaCmd::Init(a)) => serve::ca_init(s, a, &out),
        Command::Ca(CaCmd::Serve(a)) => serve::ca_serve(s, a, &out),
        Command::Node(NodeCmd::Serve(a)) => serve::node_serve(s, a, &out),
        Command::Node(NodeCmd::Status) => audit::node_status(s, &Http::new()?, &out),
        Command::Register(a) => account::register(s, a, &Http::new()?, &out),
        Command::Login(a) => account::login(s, a, &Http::new()?, &out),
        Command::Users => account::users(s, &Http::new()?, &out),
        Command::Role(c) => account::role(s, c, &Http::new()?, &out),
        Command::Identity(c) => account::identity(s, c, &Http::new()?, &out),
        Command::Doc(c) => doc::run(s, c, &Http::new()?, &out),
        Command::Chain(c) => audit::chain(s, c, &Http::new()?, &out),
        Command::Guard(c) => audit::guard(c, &out),
        Command::Cert(c) => audit::cert(s, c, &Http::new()?, &out),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("ARCHAIN_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            e.report();
            e.exit_code()
        }
    }
}
