//! Resolved command configuration: defaults, then a JSON config file, then flags.

use std::path::{Path, PathBuf};

use cwlab_core::error::{Error, Result};
use cwlab_core::trainer::config_hash;
use serde::Serialize;
use serde_json::Value;

/// Everything a command will do, printed by `--dry-run` and persisted next to
/// its outputs.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedConfig {
    pub command: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Sections such as `env`, `train`, `bench`, `eval`.
    pub sections: serde_json::Map<String, Value>,
    /// Hash of the primary payload; matches the hash stored in artifacts.
    pub config_hash: String,
}

impl ResolvedConfig {
    pub fn new(command: &str, seed: u64, out_dir: PathBuf) -> Self {
        Self {
            command: command.to_string(),
            seed,
            out_dir,
            sections: serde_json::Map::new(),
            config_hash: String::new(),
        }
    }

    pub fn section<T: Serialize>(mut self, name: &str, value: &T) -> Self {
        self.sections
            .insert(name.to_string(), serde_json::to_value(value).expect("section serialises"));
        self
    }

    /// Hash over all sections unless a primary hash was set.
    pub fn finish(mut self, primary: Option<String>) -> Self {
        self.config_hash = primary.unwrap_or_else(|| config_hash(&Value::Object(self.sections.clone())));
        self
    }

    pub fn to_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(p) = path.parent() {
            std::fs::create_dir_all(p)?;
        }
        std::fs::write(path, self.to_pretty())?;
        Ok(())
    }
}

/// Recursive object merge; `overlay` wins on leaves.
pub fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
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

/// Applies the `section` of a JSON config file on top of `defaults`.
pub fn with_file<T>(defaults: &T, file: Option<&Path>, section: &str) -> Result<T>
where
    T: Serialize + serde::de::DeserializeOwned,
{
    let mut v = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read config {}: {e}", path.display())))?;
        let file: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("config {} is not valid JSON: {e}", path.display())))?;
        if let Some(part) = file.get(section) {
            merge(&mut v, part.clone());
        }
    }
    serde_json::from_value(v).map_err(|e| Error::config(format!("config section '{section}': {e}")))
}

/// `path` under `$CWLAB_OUT` when relative and the variable is set.
pub fn output_path(path: Option<&Path>, default: &str) -> PathBuf {
    let root = std::env::var_os("CWLAB_OUT").map(PathBuf::from);
    match (path, root) {
        (Some(p), _) if p.is_absolute() => p.to_path_buf(),
        (Some(p), Some(r)) => r.join(p),
        (Some(p), None) => p.to_path_buf(),
        (None, Some(r)) => r.join(default),
        (None, None) => PathBuf::from(default),
    }
}

/// Parses `1,5,10`.
pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|x| x.trim().parse().map_err(|_| Error::config(format!("bad list entry '{x}' in '{text}'"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_prefers_overlay_leaves() {
        let mut a = json!({"x": 1, "y": {"z": 2, "w": 3}});
        merge(&mut a, json!({"y": {"z": 5}, "v": 7}));
        assert_eq!(a, json!({"x": 1, "y": {"z": 5, "w": 3}, "v": 7}));
    }

    #[test]
    fn lists_parse() {
        assert_eq!(parse_list::<usize>("1,5,10").unwrap(), vec![1, 5, 10]);
        assert!(parse_list::<usize>("1,x").is_err());
    }
}
