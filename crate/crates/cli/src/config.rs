//! Config-file defaults. The file is a JSON object whose keys are long flag
//! names; global flags sit at the top level and subcommand flags may also sit
//! in a section named after the subcommand. A value is used only when the
//! flag is absent from the command line and its ABLTX_* variable is unset,
//! which gives the precedence flags > environment > file.

use std::ffi::OsString;
use std::path::Path;

use clap::{Arg, ArgAction, Command};
use serde_json::Value;

use abltx_core::{Error, Result};

fn flag_present(argv: &[String], long: &str) -> bool {
    let flag = format!("--{long}");
    argv.iter()
        .take_while(|a| a.as_str() != "--")
        .any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
}

fn config_path(argv: &[String]) -> Option<String> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    std::env::var("ABLTX_CONFIG").ok()
}

fn subcommand_of<'a>(cmd: &'a Command, argv: &[String]) -> Option<&'a Command> {
    argv.iter()
        .skip(1)
        .find_map(|a| cmd.get_subcommands().find(|s| s.get_name() == a))
}

fn scalar_text(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        _ => Err(Error::InvalidArgument(format!(
            "config key {key:?}: expected a string, number or boolean"
        ))),
    }
}

fn inject(
    arg: &Arg,
    key: &str,
    value: &Value,
    argv: &[String],
    extra: &mut Vec<String>,
) -> Result<()> {
    let long = arg.get_long().expect("config keys map to long flags");
    if flag_present(argv, long) {
        return Ok(());
    }
    if let Some(env) = arg.get_env() {
        if std::env::var_os(env).is_some() {
            return Ok(());
        }
    }
    match arg.get_action() {
        ArgAction::SetTrue => match value {
            Value::Bool(true) => extra.push(format!("--{long}")),
            Value::Bool(false) => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "config key {key:?}: expected a boolean"
                )))
            }
        },
        ArgAction::Append => {
            let items = match value {
                Value::Array(items) => items.clone(),
                other => vec![other.clone()],
            };
            for item in &items {
                extra.push(format!("--{long}"));
                extra.push(scalar_text(key, item)?);
            }
        }
        _ => {
            extra.push(format!("--{long}"));
            extra.push(match value {
                Value::Array(items) => items
                    .iter()
                    .map(|i| scalar_text(key, i))
                    .collect::<Result<Vec<_>>>()?
                    .join(","),
                other => scalar_text(key, other)?,
            });
        }
    }
    Ok(())
}

/// Keys may use `-` or `_` between words.
fn find_arg<'a>(cmd: &'a Command, key: &str) -> Option<&'a Arg> {
    let key = key.replace('_', "-");
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(key.as_str()))
}

/// `argv` with config-file values appended for unset flags.
pub fn apply_config(cmd: &Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let text_args: Vec<String> = argv
        .iter()
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let Some(path) = config_path(&text_args) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(Path::new(&path))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidArgument(format!("config {path}: {e}")))?;
    let Value::Object(root) = root else {
        return Err(Error::InvalidArgument(format!(
            "config {path}: expected a JSON object"
        )));
    };

    let sub = subcommand_of(cmd, &text_args);
    let mut extra = Vec::new();
    for (key, value) in &root {
        if let Value::Object(section) = value {
            let Some(sc) = cmd.get_subcommands().find(|s| s.get_name() == key) else {
                return Err(Error::InvalidArgument(format!(
                    "config: unknown section {key:?}"
                )));
            };
            if sub.is_some_and(|s| s.get_name() == sc.get_name()) {
                for (k, v) in section {
                    let arg = find_arg(sc, k)
                        .or_else(|| find_arg(cmd, k))
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!("config: unknown key {key}.{k}"))
                        })?;
                    inject(arg, k, v, &text_args, &mut extra)?;
                }
            }
            continue;
        }
        if key == "config" {
            continue;
        }
        if let Some(arg) = find_arg(cmd, key) {
            inject(arg, key, value, &text_args, &mut extra)?;
        } else if let Some(arg) = sub.and_then(|s| find_arg(s, key)) {
            inject(arg, key, value, &text_args, &mut extra)?;
        } else if !cmd.get_subcommands().any(|s| find_arg(s, key).is_some()) {
            return Err(Error::InvalidArgument(format!(
                "config: unknown key {key:?}"
            )));
        }
    }
    let mut out = argv;
    out.extend(extra.into_iter().map(OsString::from));
    Ok(out)
}
