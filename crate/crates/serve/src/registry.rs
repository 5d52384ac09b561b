//! Loaded models keyed by id, each with its own response index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use echoless::checkpoint::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::index::{fingerprint, parse_response_pool, Candidate, ResponseIndex};
use crate::ServeError;

pub const DEFAULT_PORT: u16 = 8080;

/// Service configuration, usually read from TOML:
///
/// ```toml
/// port = 8080
/// responses = "pool.txt"
/// static_dir = "web/dist"
///
/// [models]
/// rn = "rn.ckpt"
/// hn_rc = "hn_rc.ckpt"
/// ```
///
/// Relative paths resolve against the config file's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeConfig {
    #[serde(default = "default_port")]
    pub port: u16,
    pub responses: PathBuf,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    pub models: BTreeMap<String, PathBuf>,
}

fn default_port() -> u16 {
    DEFAULT_PORT
}

impl ServeConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ServeError> {
        let mut config: ServeConfig = toml::from_str(text).map_err(|e| ServeError::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.responses);
        if let Some(dir) = config.static_dir.as_mut() {
            resolve(dir);
        }
        config.models.values_mut().for_each(resolve);
        if config.models.is_empty() {
            return Err(ServeError::Config("no models configured".into()));
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ServeError> {
        let text = fs::read_to_string(path).map_err(|source| ServeError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

#[derive(Debug)]
pub struct ModelEntry {
    pub checkpoint: Checkpoint,
    pub index: ResponseIndex,
}

impl ModelEntry {
    pub fn fingerprint(&self) -> &str {
        self.index.fingerprint()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub id: String,
    pub fingerprint: String,
    pub strategy: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub model: String,
    pub candidates: Vec<Candidate>,
}

/// Immutable after construction; safe to share across request handlers.
#[derive(Debug, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, ModelEntry>,
}

impl ModelRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Indexes `responses` with a checkpoint given as raw bytes; the
    /// fingerprint is the hash of those bytes.
    pub fn insert_bytes(&mut self, id: &str, bytes: &[u8], responses: &[String]) -> Result<(), ServeError> {
        if self.models.contains_key(id) {
            return Err(ServeError::Config(format!("duplicate model id {id:?}")));
        }
        let checkpoint = Checkpoint::from_bytes(bytes)?;
        let index = ResponseIndex::build(&checkpoint, fingerprint(bytes), responses)?;
        self.models.insert(id.to_string(), ModelEntry { checkpoint, index });
        Ok(())
    }

    pub fn insert(&mut self, id: &str, checkpoint: &Checkpoint, responses: &[String]) -> Result<(), ServeError> {
        self.insert_bytes(id, &checkpoint.to_bytes()?, responses)
    }

    pub fn from_config(config: &ServeConfig) -> Result<Self, ServeError> {
        let read = |path: &Path| {
            fs::read(path).map_err(|source| ServeError::Io {
                path: path.to_path_buf(),
                source,
            })
        };
        let pool_text = String::from_utf8_lossy(&read(&config.responses)?).into_owned();
        let responses = parse_response_pool(&pool_text);
        let mut registry = Self::new();
        for (id, path) in &config.models {
            registry.insert_bytes(id, &read(path)?, &responses)?;
            log::info!("event=model_loaded id={id} path={}", path.display());
        }
        Ok(registry)
    }

    pub fn get(&self, id: &str) -> Option<&ModelEntry> {
        self.models.get(id)
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn models(&self) -> Vec<ModelInfo> {
        self.models
            .iter()
            .map(|(id, m)| ModelInfo {
                id: id.clone(),
                fingerprint: m.fingerprint().to_string(),
                strategy: m.checkpoint.train.strategy.to_string(),
            })
            .collect()
    }

    /// Ranks one context with every requested model, in request order.
    pub fn rank(&self, ids: &[String], context: &str, k: usize) -> Result<Vec<ModelResult>, ServeError> {
        if ids.is_empty() {
            return Err(ServeError::InvalidRequest("no models requested".into()));
        }
        let entries = ids
            .iter()
            .map(|id| self.get(id).ok_or_else(|| ServeError::UnknownModel(id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        ids.iter()
            .zip(entries)
            .map(|(id, m)| {
                Ok(ModelResult {
                    model: id.clone(),
                    candidates: m.index.query(&m.checkpoint, context, k)?,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_resolves_relative_paths() {
        let text = r#"
            responses = "pool.txt"
            [models]
            rn = "rn.ckpt"
            hn_rc = "/abs/hn.ckpt"
        "#;
        let c = ServeConfig::from_toml(text, Path::new("/srv")).unwrap();
        assert_eq!(c.port, DEFAULT_PORT);
        assert_eq!(c.responses, Path::new("/srv/pool.txt"));
        assert_eq!(c.models["rn"], Path::new("/srv/rn.ckpt"));
        assert_eq!(c.models["hn_rc"], Path::new("/abs/hn.ckpt"));
    }

    #[test]
    fn config_errors() {
        assert!(ServeConfig::from_toml("responses = \"p\"\n[models]\n", Path::new(".")).is_err());
        assert!(ServeConfig::from_toml("nonsense = 1", Path::new(".")).is_err());
    }
}
