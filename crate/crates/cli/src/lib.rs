//! Command-line front end for the crack-instance pipeline.
//!
//! Every command reads the same flat configuration. Values come from the
//! defaults, then each `--config` file in order, then `--set key=value`
//! pairs, then the per-key `--<key>` flags.

pub mod commands;
pub mod config;

use std::ffi::OsString;

use anyhow::Result;
use clap::{Arg, ArgAction, ArgMatches, Command};
use crackscan_core::Error as CoreError;

pub use config::{ConfigError, PipelineConfig, KEYS, RUN_DIR_ENV};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;

const SUBCOMMANDS: [(&str, &str); 6] = [
    ("synth", "Generate a labeled synthetic dataset"),
    ("prepare", "Split clouds by crack and cut the voxel windows"),
    ("train", "Train the point scorer"),
    ("detect", "Score clouds and extract crack instances"),
    ("evaluate", "Compute point-wise and crack-wise metrics"),
    ("export-viz", "Write clouds colored by classification outcome"),
];

pub fn cli() -> Command {
    let mut cmd = Command::new("crackscan")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Crack instance detection in colored LIDAR point clouds")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .short('c')
                .value_name("FILE")
                .action(ArgAction::Append)
                .global(true)
                .help("Config file; repeatable, later files win"),
        )
        .arg(
            Arg::new("set")
                .long("set")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .global(true)
                .help("Override one config key"),
        )
        .arg(
            Arg::new("print-config")
                .long("print-config")
                .action(ArgAction::SetTrue)
                .global(true)
                .help("Print the resolved config and exit"),
        );
    for (key, doc) in KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(*key)
                .value_name("VALUE")
                .global(true)
                .hide_short_help(true)
                .help(doc.trim()),
        );
    }
    for (name, about) in SUBCOMMANDS {
        cmd = cmd.subcommand(Command::new(name).about(about));
    }
    cmd
}

/// Resolves the configuration from parsed arguments.
pub fn resolve(matches: &ArgMatches) -> Result<PipelineConfig> {
    let files: Vec<&String> = matches.get_many("config").map(|v| v.collect()).unwrap_or_default();
    let mut config = PipelineConfig::load(&files)?;
    for pair in matches.get_many::<String>("set").into_iter().flatten() {
        config.set_pair(pair)?;
    }
    for (key, _) in KEYS {
        if let Some(v) = matches.get_one::<String>(key) {
            config.set(key, v)?;
        }
    }
    Ok(config)
}

/// Parses `args` (program name first) and runs the chosen command.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let config = resolve(sub)?;
    if sub.get_flag("print-config") {
        print!("{}", config.to_text());
        return Ok(());
    }
    log::info!("crackscan {name}, seed {}, resolved config:\n{}", config.seed, config.to_text());
    match name {
        "synth" => commands::synth(&config),
        "prepare" => commands::prepare(&config),
        "train" => commands::train_cmd(&config),
        "detect" => commands::detect(&config),
        "evaluate" => commands::evaluate(&config),
        "export-viz" => commands::export_viz(&config),
        _ => unreachable!("clap rejects unknown subcommands"),
    }
}

/// Process exit status for an error returned by [`run`].
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if let Some(e) = err.downcast_ref::<clap::Error>() {
        return if e.use_stderr() { EXIT_USAGE } else { 0 };
    }
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Diverged { .. } => EXIT_DIVERGED,
                CoreError::Config(_) => EXIT_USAGE,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}
