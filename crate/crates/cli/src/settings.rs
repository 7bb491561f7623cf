//! Resolved settings. clap already folds `CARRYON_*` variables into the flag
//! values, so what is left here is laying flags over the `--config` file over
//! the defaults. Keys match the long flag names with `_` for `-`.

use std::fmt;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

/// Bad invocation or configuration; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn object(v: Value, what: &str) -> anyhow::Result<Map<String, Value>> {
    match v {
        Value::Object(m) => Ok(m),
        _ => Err(usage(format!("{what} must be a JSON object"))),
    }
}

/// `defaults <- file <- flags`. Flags left unset serialize as null and do
/// not override anything.
pub fn resolve<S, F>(flags: &F, file: Option<&Path>) -> anyhow::Result<S>
where
    S: Serialize + DeserializeOwned + Default,
    F: Serialize,
{
    let mut merged = object(serde_json::to_value(S::default())?, "defaults")?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p)
            .map_err(|e| usage(format!("cannot read config file {}: {e}", p.display())))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config file {}: {e}", p.display())))?;
        merged.extend(object(v, "config file")?);
    }
    for (k, v) in object(serde_json::to_value(flags)?, "flags")? {
        if !v.is_null() {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("invalid configuration: {e}")))
}
