//! Command-line surface: flag parsing, run manifests and the commands that
//! tie datasets, models, generators and metrics together.

pub mod args;
pub mod commands;
pub mod config;

use neuropath::Result;

pub use commands::{rerun, run};
pub use config::{Manifest, RunConfig};

/// Executes a parsed invocation.
pub fn execute(invocation: args::Invocation) -> Result<Manifest> {
    match invocation {
        args::Invocation::Run(config) => run(&config),
        args::Invocation::Rerun { manifest, out } => rerun(&manifest, out),
    }
}
