//! Loading JSON configs and applying command-line overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use dcl_core::experiments::{CifarAnalogConfig, CrossModalConfig};
use dcl_core::mixture::MixtureSpec;

use crate::error::{CliError, Result};

/// Where a run's mixture comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecSource {
    Preset(Preset),
    Inline(MixtureSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Balanced ten-class Gaussian mixture of the image-classification analog.
    CifarAnalog,
    /// Long-tailed paired text/image toy.
    CrossModal,
}

impl SpecSource {
    pub fn build(&self) -> Result<MixtureSpec> {
        Ok(match self {
            SpecSource::Preset(Preset::CifarAnalog) => CifarAnalogConfig::default().base_spec()?,
            SpecSource::Preset(Preset::CrossModal) => CrossModalConfig::default().spec()?,
            SpecSource::Inline(spec) => spec.clone(),
        })
    }
}

/// Reads a JSON file; a missing file is an input error naming the path.
pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Sets `path` (dot separated, numeric segments index arrays) to `value`,
/// creating intermediate objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| CliError::Config(format!("override `{path}`: `{part}` is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::Config(format!("override `{path}`: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(CliError::Config(format!("override `{path}`: `{part}` is not inside an object"))),
        };
    }
    Ok(())
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

/// Loads the config (or `default` when no file is given), applies the
/// overrides in order and deserializes the result.
pub fn load<T: Serialize + DeserializeOwned>(
    path: Option<&Path>,
    default: Option<T>,
    overrides: &[(String, Value)],
) -> Result<T> {
    let mut value = match (path, default) {
        (Some(p), _) => read_json(p)?,
        (None, Some(d)) => serde_json::to_value(d).map_err(|e| CliError::Config(e.to_string()))?,
        (None, None) => return Err(CliError::Config("this command needs --config <file>".into())),
    };
    for (k, v) in overrides {
        set_path(&mut value, k, v.clone())?;
    }
    let origin = path.map_or("built-in defaults".to_string(), |p| p.display().to_string());
    serde_json::from_value(value).map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_path_nested_and_indexed() {
        let mut v = json!({"train": {"lr": 0.1}, "seeds": [1, 2]});
        set_path(&mut v, "train.lr", json!(0.5)).unwrap();
        set_path(&mut v, "seeds.1", json!(9)).unwrap();
        set_path(&mut v, "new.leaf", json!(true)).unwrap();
        assert_eq!(v, json!({"train": {"lr": 0.5}, "seeds": [1, 9], "new": {"leaf": true}}));
        assert!(set_path(&mut v, "seeds.7", json!(0)).is_err());
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        assert_eq!(parse_override("a=3").unwrap().1, json!(3));
        assert_eq!(parse_override("a=[1,2]").unwrap().1, json!([1, 2]));
        assert_eq!(parse_override("a=adam").unwrap().1, json!("adam"));
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn presets_build() {
        assert_eq!(SpecSource::Preset(Preset::CifarAnalog).build().unwrap().n_classes(), 10);
        assert_eq!(SpecSource::Preset(Preset::CrossModal).build().unwrap().n_classes(), 10);
        let v: SpecSource = serde_json::from_value(json!({"preset": "cross_modal"})).unwrap();
        assert_eq!(v, SpecSource::Preset(Preset::CrossModal));
    }
}
