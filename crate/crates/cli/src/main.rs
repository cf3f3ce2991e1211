use std::process::ExitCode;

use clap::Parser;
use neuropath_cli::args::Cli;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match neuropath_cli::execute(cli.command.into_invocation()) {
        Ok(manifest) => {
            println!("{} finished: {} files in {}", manifest.run.command.name(), manifest.outputs.len(), manifest.run.out.display());
            for (k, v) in &manifest.metrics {
                println!("  {k} = {v}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
