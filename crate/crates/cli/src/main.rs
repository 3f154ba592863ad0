use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = prunekit_cli::Cli::parse();
    match prunekit_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(prunekit_cli::exit_code(&err))
        }
    }
}
