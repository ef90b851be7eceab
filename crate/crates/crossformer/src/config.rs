//! TOML configuration with `--set key=value` overrides.
//!
//! Layering is: built-in base, then the file, then each override in order.
//! Keys are dotted paths into the config tree (`model.spatial_dim=8`).
//! Values parse as TOML literals; anything that does not parse is taken as
//! a bare string, so `--set train_path=data/a.jsonl` works without quotes.

use std::path::Path;

use crossformer_core::train::TrainConfig;
use toml::{Table, Value};

use crate::error::{CliError, Result};

pub fn load(base: &TrainConfig, file: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut table = Table::try_from(base).map_err(|e| CliError::Format(format!("config base: {e}")))?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let parsed: Table = toml::from_str(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        merge(&mut table, parsed);
    }
    for item in overrides {
        apply_override(&mut table, item)?;
    }
    let cfg: TrainConfig = Value::Table(table).try_into().map_err(|e: toml::de::Error| config_error(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_error(msg: String) -> CliError {
    CliError::Core(crossformer_core::Error::Config(msg))
}

fn merge(into: &mut Table, from: Table) {
    for (key, value) in from {
        match (into.get_mut(&key), value) {
            (Some(Value::Table(dst)), Value::Table(src)) => merge(dst, src),
            (_, value) => {
                into.insert(key, value);
            }
        }
    }
}

pub fn apply_override(table: &mut Table, item: &str) -> Result<()> {
    let (key, raw) = item.split_once('=').ok_or_else(|| config_error(format!("override `{item}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_error(format!("override `{item}` has an empty key segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = path.split_last().expect("split yields at least one segment");
    let mut node = table;
    for p in parents {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry.as_table_mut().ok_or_else(|| config_error(format!("override `{item}`: `{p}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
