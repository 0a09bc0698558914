use std::fmt;
use std::path::Path;

use serde_json::Value;
use vcfq::pipeline::PipelineConfig;

use crate::ConfigArgs;

#[derive(Debug)]
pub struct CliError {
    invalid_input: bool,
    message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            invalid_input: true,
            message: message.into(),
        }
    }

    /// Prefixes the message, keeping the classification.
    pub fn context(self, what: &str) -> Self {
        Self {
            message: format!("{what}: {}", self.message),
            ..self
        }
    }

    pub fn code(&self) -> u8 {
        if self.invalid_input {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<vcfq::Error> for CliError {
    fn from(e: vcfq::Error) -> Self {
        use vcfq::Error as E;
        let invalid_input = match e.root() {
            E::Invalid(_) | E::PhantomSpec(_) | E::Overlap(..) | E::Format { .. } | E::Json { .. } | E::Geometry(_) => true,
            E::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => false,
        };
        Self {
            invalid_input,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

/// Sets `a.b.c` in a JSON object, creating intermediate objects.
fn set_path(root: &mut Value, key: &str, value: Value) -> CliResult {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(CliError::invalid(format!("malformed override key {key:?}")));
        }
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::invalid(format!("override {key:?} descends into a non-object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

/// Effective pipeline config: defaults, then the config file, then
/// `--set` overrides. Unknown keys are rejected.
pub fn load(args: &ConfigArgs) -> CliResult<PipelineConfig> {
    let mut value = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    if let Some(path) = &args.config {
        let file: Value = vcfq::io::read_json(path)?;
        merge(&mut value, file);
    }
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::invalid(format!("override {o:?} is not KEY=VALUE")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k.trim(), v)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(value).map_err(|e| CliError::invalid(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// File name up to its first dot.
pub fn stem(path: &Path) -> Option<String> {
    let name = path.file_name()?.to_str()?;
    let s = name.split('.').next()?;
    (!s.is_empty()).then(|| s.to_string())
}
