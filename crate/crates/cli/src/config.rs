// SPDX-License-Identifier: MIT OR Apache-2.0

//! Configuration files.
//!
//! A configuration file is UTF-8 text with one `key = value` per line. Keys
//! are flag names without the leading dashes (`target-size` or
//! `target_size`). Blank lines and lines starting with `#` are ignored.
//! Entries before the first `[subcommand]` header apply to every subcommand
//! that accepts the flag, so one file can drive a whole experiment; entries
//! under a header apply to that subcommand only and must name one of its
//! flags. Boolean flags take `true` or `false`.
//!
//! The file is expanded into ordinary flags placed ahead of the ones typed
//! on the command line, and repeated flags keep their last value, so the
//! command line always wins.

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::{Context, Result};
use olakit::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub section: Option<String>,
    pub key: String,
    pub value: String,
    pub line: usize,
}

pub fn parse(text: &str) -> Result<Vec<Entry>, Error> {
    let mut section = None;
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            section = Some(name.trim().to_owned());
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("config line {}: expected key = value", n + 1)))?;
        let key = key.trim().replace('_', "-");
        if key.is_empty() {
            return Err(Error::Config(format!("config line {}: empty key", n + 1)));
        }
        entries.push(Entry {
            section: section.clone(),
            key,
            value: value.trim().to_owned(),
            line: n + 1,
        });
    }
    Ok(entries)
}

/// Splices the entries of a `--config` file into `argv`.
pub fn expand(cmd: &clap::Command, argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let text = std::fs::read_to_string(&path)
        .map_err(Error::Io)
        .with_context(|| format!("reading config {}", path.display()))?;
    let entries = parse(&text)?;
    let Some(pos) = argv
        .iter()
        .skip(1)
        .position(|a| a.to_str().is_some_and(|s| cmd.find_subcommand(s).is_some()))
        .map(|p| p + 1)
    else {
        // Without a subcommand clap reports the usage error.
        return Ok(argv);
    };
    let sub = cmd
        .find_subcommand(argv[pos].to_str().expect("matched above"))
        .expect("matched above");

    let mut global = Vec::new();
    let mut local = Vec::new();
    // Shared entries first so a section can refine them.
    let ordered = entries
        .iter()
        .filter(|e| e.section.is_none())
        .chain(entries.iter().filter(|e| e.section.is_some()));
    for e in ordered {
        if e.key == "config" {
            return Err(Error::Config(format!("config line {}: nested config files are not supported", e.line)).into());
        }
        if let Some(section) = &e.section {
            if cmd.find_subcommand(section).is_none() {
                return Err(Error::Config(format!("config line {}: unknown subcommand [{section}]", e.line)).into());
            }
            if section != sub.get_name() {
                continue;
            }
        }
        if let Some(arg) = find_arg(cmd, &e.key) {
            push_flag(&mut global, arg, e)?;
        } else if let Some(arg) = find_arg(sub, &e.key) {
            push_flag(&mut local, arg, e)?;
        } else if e.section.is_some() || !cmd.get_subcommands().any(|s| find_arg(s, &e.key).is_some()) {
            return Err(Error::Config(format!("config line {}: unknown key {:?}", e.line, e.key)).into());
        }
    }

    let mut out = Vec::with_capacity(argv.len() + global.len() + local.len());
    out.push(argv[0].clone());
    out.extend(global);
    out.extend(argv[1..=pos].iter().cloned());
    out.extend(local);
    out.extend(argv[pos + 1..].iter().cloned());
    Ok(out)
}

fn find_arg<'a>(cmd: &'a clap::Command, key: &str) -> Option<&'a clap::Arg> {
    cmd.get_arguments()
        .find(|a| a.get_long() == Some(key) || a.get_all_aliases().is_some_and(|al| al.contains(&key)))
}

fn push_flag(out: &mut Vec<OsString>, arg: &clap::Arg, e: &Entry) -> Result<()> {
    let long = arg.get_long().expect("config keys match long flags");
    if arg.get_action().takes_values() {
        out.push(format!("--{long}={}", e.value).into());
    } else {
        match e.value.as_str() {
            "true" => out.push(format!("--{long}").into()),
            "false" => {}
            other => {
                return Err(Error::Config(format!(
                    "config line {}: {long} expects true or false, got {other:?}",
                    e.line
                ))
                .into())
            }
        }
    }
    Ok(())
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let s = a.to_str()?;
        if s == "--" {
            return None;
        }
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}
