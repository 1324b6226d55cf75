//! Defaults, then a TOML config file, then flag overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

/// A dotted key and its new value.
pub type Override = (String, Value);

/// Parses `key=value`; the value is read as a TOML literal, else as a bare string.
pub fn parse_set(s: &str) -> Result<Override, CliError> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Usage(format!("--set has an empty key in `{s}`")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.trim().to_string()));
    Ok((key.to_string(), value))
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        cur = match cur.entry(p).or_insert_with(|| Value::Table(Table::new())) {
            Value::Table(t) => t,
            _ => return Err(CliError::Usage(format!("`{p}` in `{key}` is not a table"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Layers `config` and `overrides` over `defaults`; unknown keys are errors.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    config: Option<&Path>,
    overrides: Vec<Override>,
) -> Result<T, CliError> {
    let mut table = Table::try_from(defaults).expect("defaults serialize to a table");
    if let Some(path) = config {
        let text = std::fs::read_to_string(path).map_err(|e| crate::io_err(path, e))?;
        let file: Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        merge(&mut table, file);
    }
    for (k, v) in overrides {
        set_path(&mut table, &k, v)?;
    }
    table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use maskvad::training::TrainConfig;

    #[test]
    fn set_values_are_typed() {
        assert_eq!(parse_set("lr=0.5").unwrap().1, Value::Float(0.5));
        assert_eq!(parse_set("epochs=3").unwrap().1, Value::Integer(3));
        assert_eq!(parse_set("mode=pasrm").unwrap().1, Value::String("pasrm".into()));
        assert!(parse_set("novalue").is_err());
    }

    #[test]
    fn flags_beat_the_file_and_the_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "lr = 0.01\nepochs = 7\n[weights]\nlambda_cst = 0.5\n").unwrap();
        let cfg: TrainConfig = resolve(
            &TrainConfig::default(),
            Some(&path),
            vec![("epochs".into(), Value::Integer(2))],
        )
        .unwrap();
        assert_eq!(cfg.lr, 0.01);
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.weights.lambda_cst, 0.5);
        assert_eq!(cfg.weights.lambda_n, 1.0);
    }

    #[test]
    fn unknown_keys_name_themselves() {
        let err = resolve(
            &TrainConfig::default(),
            None,
            vec![("learning_rate".into(), Value::Float(1.0))],
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }
}
