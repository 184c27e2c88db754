//! Merging a JSON config file into the command line.
//!
//! Config keys name long flags (`batch_size` and `batch-size` both map to
//! `--batch-size`). The derived flags are spliced in directly after the
//! subcommand, so anything given explicitly later on the command line wins.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde_json::Value;

/// Finds the value of `--config` without a full parse.
pub fn config_path(args: &[String]) -> Option<String> {
    let mut iter = args.iter().skip(1);
    while let Some(a) = iter.next() {
        if a == "--" {
            break;
        }
        if a == "--config" {
            return iter.next().cloned();
        }
        if let Some(v) = a.strip_prefix("--config=") {
            return Some(v.to_string());
        }
    }
    None
}

/// Converts a flat JSON object into flag tokens.
pub fn config_to_flags(config: &Value) -> Result<Vec<String>> {
    let Value::Object(map) = config else {
        bail!("config file must contain a JSON object");
    };
    let mut out = Vec::new();
    for (key, value) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if flag == "--config" {
            bail!("config files cannot nest another config");
        }
        let mut push = |v: &Value| -> Result<()> {
            match v {
                Value::Null | Value::Bool(false) => {}
                Value::Bool(true) => out.push(flag.clone()),
                Value::String(s) => {
                    out.push(flag.clone());
                    out.push(s.clone());
                }
                Value::Number(n) => {
                    out.push(flag.clone());
                    out.push(n.to_string());
                }
                _ => bail!("config key '{key}' must be a scalar or a list of scalars"),
            }
            Ok(())
        };
        match value {
            Value::Array(items) => items.iter().try_for_each(&mut push)?,
            v => push(v)?,
        }
    }
    Ok(out)
}

/// Returns `args` with the config file's flags spliced in after the
/// subcommand token.
pub fn expand_args(args: Vec<String>, subcommands: &[&str]) -> Result<Vec<String>> {
    let Some(path) = config_path(&args) else {
        return Ok(args);
    };
    let text = std::fs::read_to_string(Path::new(&path))
        .with_context(|| format!("reading config file {path}"))?;
    let value: Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config file {path}"))?;
    let flags = config_to_flags(&value)?;
    let Some(pos) = args
        .iter()
        .skip(1)
        .position(|a| subcommands.contains(&a.as_str()))
    else {
        return Ok(args);
    };
    let pos = pos + 2;
    let mut out = args[..pos].to_vec();
    out.extend(flags);
    out.extend_from_slice(&args[pos..]);
    Ok(out)
}
