mod args;
mod commands;
mod resolve;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command};

/// Input errors exit with 2, everything else with 1.
fn is_validation(err: &anyhow::Error) -> bool {
    for cause in err.chain() {
        if cause.is::<resolve::Usage>() {
            return true;
        }
        if let Some(e) = cause.downcast_ref::<diffsim_eval::Error>() {
            return e.is_validation();
        }
        if let Some(e) = cause.downcast_ref::<diffsim_backends::Error>() {
            return e.is_validation();
        }
        if let Some(e) = cause.downcast_ref::<diffsim_core::Error>() {
            return matches!(e, diffsim_core::Error::Invalid(_));
        }
    }
    false
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.jobs {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let common = &cli.common;
    match &cli.command {
        Command::Compare { a, b } => commands::compare(common, a, b),
        Command::Eval(args) => commands::eval(common, args),
        Command::Gridsearch(args) => commands::gridsearch(common, args),
        Command::Triplets(cmd) => commands::triplets(common, cmd),
        Command::Retrieve(args) => commands::retrieve(common, args),
        Command::VideoVar(args) => commands::video_var(common, args),
        Command::Cache(cmd) => commands::cache(common, cmd),
        Command::Weights(cmd) => commands::weights(common, cmd),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 2 } else { 1 })
        }
    }
}
