//! JSON config files layered over defaults. Flags are applied afterwards by
//! each subcommand.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use crate::CliError;

/// Loads `T` from `path`, starting from `T::default()`. Objects merge key by
/// key; every other value replaces the default. Unknown keys are rejected.
pub fn load<T: Serialize + DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, CliError> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
    merge_value::<T>(file).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

pub fn merge_value<T: Serialize + DeserializeOwned + Default>(file: Value) -> Result<T, String> {
    let mut base = serde_json::to_value(T::default()).map_err(|e| e.to_string())?;
    merge(&mut base, file, "")?;
    serde_json::from_value(base).map_err(|e| e.to_string())
}

fn merge(base: &mut Value, over: Value, at: &str) -> Result<(), String> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let path = if at.is_empty() {
                    k.clone()
                } else {
                    format!("{at}.{k}")
                };
                let slot = b
                    .get_mut(&k)
                    .ok_or_else(|| format!("unknown key '{path}'"))?;
                merge(slot, v, &path)?;
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}
