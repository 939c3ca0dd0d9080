mod args;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use cooc_core::{config, Error};

/// 1 for usage and configuration errors, 2 for data and checkpoint
/// problems, 3 for numerical failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidArgument(_) | Error::UnreachableReceptiveField { .. } => 1,
        Error::NonFinite(_) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = match args::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            if e.kind() == ErrorKind::UnknownArgument {
                if let Some(ContextValue::String(arg)) = e.get(ContextKind::InvalidArg) {
                    let key = config::nearest_key(arg);
                    eprintln!("nearest config key: `{key}` (--{})", key.replace(['.', '_'], "-"));
                }
            }
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let (name, sub) = matches.subcommand().expect("a subcommand is required");
    let result = if name == "rf" {
        run::rf_report(
            sub.get_one::<String>("base").expect("has default"),
            sub.get_one::<usize>("target").copied(),
            *sub.get_one::<usize>("image").expect("has default"),
            sub.get_flag("small-image-stem"),
        )
        .map(|table| print!("{table}"))
    } else {
        let path = |id: &str| sub.get_one::<PathBuf>(id).cloned();
        let inv = run::Invocation {
            command: name.to_string(),
            config_file: path("config"),
            manifest: path("manifest"),
            overrides: args::overrides(sub),
            out_dir: path("out-dir"),
            checkpoint: path("checkpoint"),
            resume: if name == "train" { path("resume") } else { None },
            env_seed: std::env::var("COOC_SEED").ok(),
        };
        run::dispatch(&inv).map(|dir| log::info!("wrote {}", dir.display()))
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
