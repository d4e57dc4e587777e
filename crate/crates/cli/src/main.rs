use std::process::ExitCode;

use clap::Parser;
use stoch_turnpike_cli::{describe, resolve, run, write_json, Cli, SEED_ENV};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let settings = match resolve(cli.command, &cli.overrides, std::env::var(SEED_ENV).ok()) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}", e.to_json());
            return ExitCode::from(e.exit_code());
        }
    };
    match run(cli.command, &settings) {
        Ok(out) => {
            println!("{}", describe(&settings, &out));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let _ = write_json(&settings.out_dir, "error.json", &e.to_json());
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
