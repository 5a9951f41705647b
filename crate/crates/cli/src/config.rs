//! Configuration files: TOML with a `[run]` and a `[data]` section, merged over
//! the built-in defaults, then overridden by `--set key=value` flags.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use phaseda::synthdata::SceneConfig;
use phaseda::trainer::RunConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub run: RunConfig,
    pub data: SceneConfig,
}

impl FileConfig {
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Resolve defaults ← file ← overrides. Unknown keys at any level are errors
/// that list the keys valid at that level.
pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<FileConfig> {
    let mut merged = Table::try_from(FileConfig::default()).expect("defaults serialize");
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let user: Table = text.parse().with_context(|| format!("{} is not valid TOML", path.display()))?;
        merge(&mut merged, user, "")?;
    }
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| anyhow!("override `{o}` is not of the form key=value"))?;
        let value = parse_scalar(raw.trim());
        let mut patch = Table::new();
        let parts: Vec<&str> = key.trim().split('.').collect();
        insert_path(&mut patch, &parts, value);
        merge(&mut merged, patch, "")?;
    }
    let cfg: FileConfig = Value::Table(merged).try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
    cfg.run.validate()?;
    cfg.data.validate()?;
    Ok(cfg)
}

fn parse_scalar(raw: &str) -> Value {
    // reuse the TOML grammar for numbers, booleans, strings and arrays
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn insert_path(table: &mut Table, parts: &[&str], value: Value) {
    match parts {
        [last] => {
            table.insert(last.to_string(), value);
        }
        [head, rest @ ..] => {
            let child = table.entry(head.to_string()).or_insert_with(|| Value::Table(Table::new()));
            if let Value::Table(t) = child {
                insert_path(t, rest, value);
            }
        }
        [] => {}
    }
}

fn merge(base: &mut Table, patch: Table, prefix: &str) -> Result<()> {
    for (key, value) in patch {
        let path = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        let Some(slot) = base.get_mut(&key) else {
            // optional keys are absent from the serialized defaults
            if OPTIONAL_KEYS.contains(&path.as_str()) {
                base.insert(key, value);
                continue;
            }
            let mut valid: Vec<&str> = base.keys().map(String::as_str).collect();
            valid.extend(OPTIONAL_KEYS.iter().filter_map(|k| {
                let rest = if prefix.is_empty() { Some(*k) } else { k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) };
                rest.filter(|r| !r.contains('.'))
            }));
            valid.sort_unstable();
            valid.dedup();
            bail!("unknown config key `{path}`; valid keys here: {}", valid.join(", "));
        };
        match (slot, value) {
            (Value::Table(b), Value::Table(p)) => merge(b, p, &path)?,
            (slot, value) => *slot = value,
        }
    }
    Ok(())
}

const OPTIONAL_KEYS: &[&str] = &["run.out_dir"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = resolve(None, &[]).unwrap();
        assert_eq!(cfg, FileConfig::default());
        let back: FileConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_apply() {
        let cfg = resolve(None, &["run.weights.lambda_ph=0".into(), "data.classes=3".into(), "run.seed=9".into()]).unwrap();
        assert_eq!(cfg.run.weights.lambda_ph, 0.0);
        assert_eq!(cfg.data.classes, 3);
        assert_eq!(cfg.run.seed, 9);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = resolve(None, &["run.weights.lambda_xx=1".into()]).unwrap_err().to_string();
        assert!(err.contains("run.weights.lambda_xx"), "{err}");
        assert!(err.contains("lambda_cpn") && err.contains("lambda_ph"), "{err}");
    }
}
