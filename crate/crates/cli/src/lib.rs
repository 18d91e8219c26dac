//! Command-line front end for the question-subject pipeline.

pub mod commands;
pub mod config;
pub mod error;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;

use clap::{Arg, ArgAction, ArgMatches, Command};
use mqseq_core::Split;

pub use config::{BackendKind, Layers, RunConfig, Strategy};
pub use error::CliError;

use config::{parse_config_file, KeyKind, CONFIG_ENV, KEYS};

fn split_arg(default: &'static str) -> Arg {
    Arg::new("split")
        .long("split")
        .value_name("SPLIT")
        .default_value(default)
        .help("train | dev | test")
}

pub fn command() -> Command {
    let mut cmd = Command::new("mqseq")
        .about("Subject classification of exam questions from frozen sentence embeddings")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_name("FILE")
                .help("flat key=value config file (also MQSEQ_CONFIG)"),
        );
    for k in KEYS {
        let arg = Arg::new(k.name).long(k.flag).global(true).help(k.help);
        cmd = cmd.arg(match k.kind {
            KeyKind::Switch => arg.action(ArgAction::SetTrue),
            KeyKind::Value => arg.value_name("VALUE"),
        });
    }
    cmd.subcommand(Command::new("ingest").about("Parse the split files into the record store"))
        .subcommand(
            Command::new("embed").about("Embed every split into the cache").arg(
                Arg::new("force")
                    .long("force")
                    .action(ArgAction::SetTrue)
                    .help("re-embed even when the cache is up to date"),
            ),
        )
        .subcommand(Command::new("train").about("Train the classifier head"))
        .subcommand(
            Command::new("eval")
                .about("Score a checkpoint on a split")
                .arg(split_arg("dev"))
                .arg(
                    Arg::new("compare")
                        .long("compare")
                        .action(ArgAction::SetTrue)
                        .help("evaluate both training strategies side by side"),
                ),
        )
        .subcommand(
            Command::new("predict")
                .about("Predict subjects for a split")
                .arg(split_arg("test")),
        )
        .subcommand(
            Command::new("project")
                .about("2-D t-SNE of a split's embeddings")
                .arg(split_arg("dev")),
        )
        .subcommand(Command::new("config").about("Print the resolved configuration and where each value came from"))
}

fn layers_from(matches: &ArgMatches, env: &BTreeMap<String, String>) -> Result<Layers, CliError> {
    let mut layers = Layers::default().with_env(env);
    for k in KEYS {
        match k.kind {
            KeyKind::Switch => {
                if matches.get_flag(k.name) {
                    layers.flags.insert(k.name.to_string(), "true".into());
                }
            }
            KeyKind::Value => {
                if let Some(v) = matches.get_one::<String>(k.name) {
                    layers.flags.insert(k.name.to_string(), v.clone());
                }
            }
        }
    }
    let file = matches
        .get_one::<String>("config")
        .cloned()
        .or_else(|| env.get(CONFIG_ENV).cloned());
    if let Some(path) = file {
        let text = fs::read_to_string(&path).map_err(|e| CliError::Config(format!("config file {path}: {e}")))?;
        layers.file = parse_config_file(&text)?;
    }
    Ok(layers)
}

fn split_of(matches: &ArgMatches) -> Result<Split, CliError> {
    let raw = matches.get_one::<String>("split").expect("has default");
    raw.parse().map_err(|e| CliError::Config(format!("--split: {e}")))
}

fn dispatch(matches: &ArgMatches, env: &BTreeMap<String, String>) -> Result<String, CliError> {
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cfg = RunConfig::resolve(&layers_from(sub, env)?)?;
    match name {
        "ingest" => commands::cmd_ingest(&cfg),
        "embed" => commands::cmd_embed(&cfg, sub.get_flag("force")),
        "train" => commands::cmd_train(&cfg),
        "eval" => commands::cmd_eval(&cfg, split_of(sub)?, sub.get_flag("compare")),
        "predict" => commands::cmd_predict(&cfg, split_of(sub)?),
        "project" => commands::cmd_project(&cfg, split_of(sub)?),
        "config" => Ok(cfg.describe()),
        other => unreachable!("unknown subcommand {other}"),
    }
}

/// Runs one invocation; returns the process exit code.
pub fn run<I, T>(args: I, env: &BTreeMap<String, String>, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 1;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match dispatch(&matches, env) {
        Ok(text) => {
            let _ = out.write_all(text.as_bytes());
            0
        }
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
