//! `lada` command-line entry point.
//!
//! Usage:
//!
//! ```text
//! lada <gen-data|sample-ci|train|sweep> [--config <path>] [--out <dir>]
//!      [--seed <u64>] [--jobs <n>]
//! ```
//!
//! `--config` accepts either a key-value config file or a previously written
//! `manifest.json` (rerunning from a manifest reproduces all outputs except
//! the manifest timestamp byte-for-byte). Exit codes: 0 success, 1 config
//! error, 2 data error, 3 runtime/numeric error.

use std::path::PathBuf;
use std::process::ExitCode;

use lada::cli::{cmd_gen_data, cmd_sample_ci, cmd_sweep, cmd_train, Config, TOOL_VERSION};
use lada::error::Error;

struct Args {
    command: String,
    config: Option<PathBuf>,
    out: PathBuf,
    seed: Option<u64>,
    jobs: usize,
}

fn usage() -> &'static str {
    "usage: lada <gen-data|sample-ci|train|sweep> [--config <path>] [--out <dir>] \
     [--seed <u64>] [--jobs <n>]"
}

fn parse_args(mut argv: std::env::Args) -> Result<Args, String> {
    let _bin = argv.next();
    let command = argv.next().ok_or_else(|| usage().to_string())?;
    if command == "--help" || command == "-h" || command == "help" {
        return Err(usage().to_string());
    }
    if command == "--version" {
        return Err(format!("lada {TOOL_VERSION}"));
    }
    let mut args = Args {
        command,
        config: None,
        out: PathBuf::from("out"),
        seed: None,
        jobs: 0,
    };
    while let Some(flag) = argv.next() {
        let mut value = || {
            argv.next()
                .ok_or_else(|| format!("flag {flag} needs a value\n{}", usage()))
        };
        match flag.as_str() {
            "--config" => args.config = Some(PathBuf::from(value()?)),
            "--out" => args.out = PathBuf::from(value()?),
            "--seed" => {
                args.seed = Some(
                    value()?
                        .parse()
                        .map_err(|e| format!("bad --seed: {e}"))?,
                )
            }
            "--jobs" => {
                args.jobs = value()?
                    .parse()
                    .map_err(|e| format!("bad --jobs: {e}"))?
            }
            other => return Err(format!("unknown flag `{other}`\n{}", usage())),
        }
    }
    Ok(args)
}

fn run(args: &Args) -> lada::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::defaults(),
    };
    if let Some(seed) = args.seed {
        cfg.set("seed", seed.to_string())?;
    }
    match args.command.as_str() {
        "gen-data" => cmd_gen_data(&cfg, &args.out),
        "sample-ci" => cmd_sample_ci(&cfg, &args.out),
        "train" => cmd_train(&cfg, &args.out),
        "sweep" => cmd_sweep(&cfg, &args.out, args.jobs),
        other => Err(Error::config(
            "command",
            format!("unknown command `{other}`\n{}", usage()),
        )),
    }
}

fn main() -> ExitCode {
    let args = match parse_args(std::env::args()) {
        Ok(a) => a,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(1);
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
