//! Training-config resolution: defaults < preset < config file < flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use flare_core::train::{load_preset, TrainConfig};

use crate::CliError;

/// Parses a snake_case enum value through its serde representation;
/// hyphens are accepted in place of underscores.
pub fn serde_enum<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

/// Recursively overlays `patch` onto `base`. Objects merge key by key;
/// anything else (including arrays and null) replaces.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Dotted paths of keys in `patch` that `base` does not have. Keys below a
/// null in `base` (an unset optional section) are not checked.
pub fn unknown_keys(base: &Value, patch: &Value, prefix: &str) -> Vec<String> {
    let (Value::Object(b), Value::Object(p)) = (base, patch) else {
        return Vec::new();
    };
    p.iter()
        .flat_map(|(k, v)| {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                None => vec![path],
                Some(bv) => unknown_keys(bv, v, &path),
            }
        })
        .collect()
}

/// Preset named on the command line, else by the file's `preset` field.
pub fn resolve(
    preset_flag: Option<&str>,
    file: Option<&Path>,
) -> Result<TrainConfig, CliError> {
    let file_value = file
        .map(|p| -> Result<Value, CliError> {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            let v: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            if !v.is_object() {
                return Err(CliError::Usage(format!("{}: expected a JSON object", p.display())));
            }
            Ok(v)
        })
        .transpose()?;
    let preset = preset_flag.map(str::to_owned).or_else(|| {
        file_value
            .as_ref()
            .and_then(|v| v.get("preset"))
            .and_then(Value::as_str)
            .map(str::to_owned)
    });
    let base = match &preset {
        Some(name) => load_preset(name).map_err(|e| CliError::Usage(e.to_string()))?,
        None => TrainConfig::default(),
    };
    let mut value = serde_json::to_value(&base)?;
    if let Some(v) = file_value {
        let unknown = unknown_keys(&value, &v, "");
        if !unknown.is_empty() {
            return Err(CliError::Usage(format!("unknown config keys: {}", unknown.join(", "))));
        }
        merge(&mut value, v);
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| CliError::Usage(format!("invalid config: {e}")))?;
    cfg.preset = preset;
    Ok(cfg)
}
