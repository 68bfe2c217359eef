//! `mctformer` command-line runner.
//!
//! ```text
//! mctformer generate --seed 0 --count 200 --out train.mctdata
//! mctformer train    --data train.mctdata --out-dir run --variant v2
//! mctformer infer    --checkpoint run/checkpoint.mctckpt --data test.mctdata --out-dir maps --stage full
//! mctformer eval     --maps maps/maps.csv --data test.mctdata --out-dir report
//! mctformer ablate   --data train.mctdata --test test.mctdata --out-dir ablation
//! mctformer replay   --manifest run/manifest.json
//! ```

use std::process::ExitCode;

use clap::Parser;

mod args;
mod commands;
mod manifest;

fn main() -> ExitCode {
    let cli = args::Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
