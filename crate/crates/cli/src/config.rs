use std::fmt;
use std::path::Path;

use headfed_core::ExperimentConfig;
use serde_json::Value;

/// Failure classes that map onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, unreadable or invalid config. Exit 2.
    Usage(String),
    /// Anything that goes wrong after the config was accepted. Exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<headfed_core::Error> for CliError {
    fn from(e: headfed_core::Error) -> Self {
        match e {
            headfed_core::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// One `key=value` override. Keys are dotted paths into the config.
#[derive(Debug, Clone, PartialEq)]
pub struct Override {
    pub key: String,
    pub value: Value,
}

impl Override {
    pub fn parse(raw: &str) -> CliResult<Self> {
        let (key, value) = raw
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{raw}' is not key=value")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Usage(format!("override '{raw}' has an empty key")));
        }
        Ok(Self {
            key: key.to_string(),
            value: parse_scalar(value.trim()),
        })
    }

    pub fn new(key: &str, value: Value) -> Self {
        Self {
            key: key.to_string(),
            value,
        }
    }
}

impl fmt::Display for Override {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.key, self.value)
    }
}

/// TOML literal if it parses as one, bare string otherwise.
fn parse_scalar(s: &str) -> Value {
    let doc = format!("v = {s}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t
            .remove("v")
            .and_then(|v| serde_json::to_value(v).ok())
            .unwrap_or_else(|| Value::String(s.to_string())),
        Err(_) => Value::String(s.to_string()),
    }
}

pub fn load(path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let Some(path) = path else {
        return Ok(ExperimentConfig::default());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
}

/// Applies overrides in order, then validates the result.
pub fn resolve(path: Option<&Path>, overrides: &[Override]) -> CliResult<ExperimentConfig> {
    let base = load(path)?;
    let mut tree = serde_json::to_value(&base).map_err(|e| CliError::Runtime(e.to_string()))?;
    for o in overrides {
        set_path(&mut tree, &o.key, o.value.clone())?;
    }
    let cfg: ExperimentConfig =
        serde_json::from_value(tree).map_err(|e| CliError::Usage(format!("override: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn set_path(tree: &mut Value, key: &str, value: Value) -> CliResult<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::Usage(format!("override {key}: '{part}' is not a table")))?;
        if !obj.contains_key(*part) {
            return Err(CliError::Usage(format!("override {key}: unknown field '{part}'")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    Ok(())
}

/// Config file to pass back into `run`; all defaults written out.
pub fn to_toml(cfg: &ExperimentConfig) -> CliResult<String> {
    toml::to_string_pretty(cfg).map_err(|e| CliError::Usage(format!("config cannot be written as TOML: {e}")))
}
