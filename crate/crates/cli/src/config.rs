//! Merges a key=value config file into the argument list. Values are
//! appended as long options of the selected subcommand unless the command
//! line already sets them.

use std::collections::HashSet;

use anyhow::{bail, Context};
use clap::{ArgAction, Command};

pub fn parse(text: &str) -> anyhow::Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("config line {}: expected key=value", n + 1);
        };
        let key = k.trim().replace('_', "-");
        if key.is_empty() {
            bail!("config line {}: empty key", n + 1);
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn config_path(args: &[String]) -> Option<String> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().cloned();
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(p.to_string());
        }
    }
    None
}

/// Follows subcommand names in `args` down to the innermost command.
fn leaf<'a>(root: &'a Command, args: &[String]) -> &'a Command {
    let mut cmd = root;
    for a in args.iter().skip(1) {
        if a.starts_with('-') {
            continue;
        }
        match cmd.find_subcommand(a) {
            Some(sub) => cmd = sub,
            None if cmd.has_subcommands() => continue,
            None => break,
        }
    }
    cmd
}

pub fn apply(root: &Command, mut args: Vec<String>) -> anyhow::Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {path}"))?;
    let entries = parse(&text)?;
    let cmd = leaf(root, &args);
    let given: HashSet<String> = args
        .iter()
        .filter_map(|a| a.strip_prefix("--"))
        .map(|a| a.split('=').next().unwrap_or(a).to_string())
        .collect();
    let mut extra = Vec::new();
    for (key, value) in entries {
        if key == "config" {
            bail!("config file cannot name another config file");
        }
        let Some(arg) = cmd
            .get_arguments()
            .chain(root.get_arguments())
            .find(|a| a.get_long() == Some(key.as_str()))
        else {
            bail!("config key {key:?} is not an option of `{}`", cmd.get_name());
        };
        if given.contains(&key) {
            continue;
        }
        match arg.get_action() {
            ArgAction::SetTrue => match value.as_str() {
                "true" | "1" | "yes" => extra.push(format!("--{key}")),
                "false" | "0" | "no" => {}
                _ => bail!("config key {key:?} expects true or false"),
            },
            _ => extra.push(format!("--{key}={value}")),
        }
    }
    let at = args.iter().position(|a| a == "--").unwrap_or(args.len());
    args.splice(at..at, extra);
    Ok(args)
}
