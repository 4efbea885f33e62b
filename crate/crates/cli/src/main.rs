use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = dcn_cli::Cli::parse();
    match dcn_cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(2)
        }
    }
}
