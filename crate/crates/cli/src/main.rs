mod commands;
mod config;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{value_parser, Arg, ArgMatches, Command};
use dcp::{Error, ErrorClass, Result};

use config::{Config, Kind, KEYS};

fn cli() -> Command {
    let mut cmd = Command::new("dcp")
        .about("Discrimination-aware channel pruning")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("flat `section.key = value` config file"),
        )
        .arg(
            Arg::new("report")
                .long("report")
                .global(true)
                .value_name("FILE")
                .value_parser(value_parser!(PathBuf))
                .help("also append report lines to this file"),
        );
    for key in KEYS {
        let value_name = match key.kind {
            Kind::Uint => "N",
            Kind::Float => "X",
            Kind::Bool => "BOOL",
            Kind::Choice(_) | Kind::Text => "VALUE",
        };
        cmd = cmd.arg(
            Arg::new(key.name)
                .long(key.name)
                .global(true)
                .value_name(value_name)
                .help(format!("{} [default: {}]", key.help, key.default))
                .help_heading("Config keys"),
        );
    }
    let ckpt = |name: &'static str, help: &'static str| {
        Arg::new(name)
            .long(name)
            .value_name("FILE")
            .value_parser(value_parser!(PathBuf))
            .help(help)
    };
    cmd.subcommand(
        Command::new("train")
            .about("Train a baseline network")
            .arg(ckpt("out", "checkpoint to write").required(true))
            .arg(ckpt("resume", "continue from this checkpoint")),
    )
    .subcommand(
        Command::new("prune")
            .about("Prune a trained network")
            .arg(ckpt("checkpoint", "trained checkpoint").required(true))
            .arg(ckpt("out", "pruned checkpoint to write").required(true)),
    )
    .subcommand(
        Command::new("eval")
            .about("Test error of a checkpoint")
            .arg(ckpt("checkpoint", "checkpoint to evaluate").required(true))
            .arg(ckpt("baseline", "reference checkpoint for the error gap")),
    )
    .subcommand(
        Command::new("complexity")
            .about("Parameter and multiply-accumulate counts")
            .arg(ckpt(
                "checkpoint",
                "checkpoint; without it model.arch is built",
            )),
    )
}

/// Defaults, then the config file, then the data-directory variable, then flags.
fn resolve_config(m: &ArgMatches) -> Result<Config> {
    let mut cfg = match m.get_one::<PathBuf>("config") {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(dir) = std::env::var(commands::DATA_DIR_ENV) {
        cfg.set("data.dir", &dir)?;
    }
    for key in KEYS {
        if let Some(v) = m.get_one::<String>(key.name) {
            cfg.set(key.name, v)?;
        }
    }
    Ok(cfg)
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = resolve_config(sub)?;
    let path = |id: &str| sub.get_one::<PathBuf>(id).map(PathBuf::as_path);
    let outcome = match name {
        "train" => commands::train(&cfg, path("out").expect("required"), path("resume"))?,
        "prune" => commands::prune(
            &cfg,
            path("checkpoint").expect("required"),
            path("out").expect("required"),
        )?,
        "eval" => commands::eval(
            &cfg,
            path("checkpoint").expect("required"),
            path("baseline"),
        )?,
        "complexity" => commands::complexity_of(&cfg, sub.get_one::<PathBuf>("checkpoint"))?,
        other => return Err(Error::Config(format!("unknown command `{other}`"))),
    };
    commands::finish(outcome, path("report"))
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numerical => 4,
        ErrorClass::Internal => 1,
    }
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
