use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::store::StoreConfig;

/// Service settings, normally read from a TOML file:
///
/// ```toml
/// listen = "127.0.0.1:8080"
/// data_dir = "annotation-data"
/// clips = "clips.jsonl"
///
/// [raters]
/// "3f9c0d7a" = "rater-a"
/// ```
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    #[serde(default = "default_listen")]
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    /// JSONL of clip seeds registered at startup.
    #[serde(default)]
    pub clips: Option<PathBuf>,
    /// Relative media paths resolve against this directory.
    #[serde(default)]
    pub media_root: Option<PathBuf>,
    #[serde(default = "default_ttl")]
    pub lease_ttl_secs: f64,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default)]
    pub split_seed: u64,
    /// Bearer token to rater id.
    pub raters: HashMap<String, String>,
}

fn default_listen() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], 8080))
}

fn default_ttl() -> f64 {
    30.0 * 60.0
}

fn default_train_fraction() -> f64 {
    0.8
}

impl ServiceConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let mut config: ServiceConfig = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        // relative paths are relative to the config file
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [Some(&mut config.data_dir), config.clips.as_mut(), config.media_root.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if config.raters.is_empty() {
            return Err(format!("{}: no rater tokens configured", path.display()));
        }
        Ok(config)
    }

    pub fn store_config(&self) -> StoreConfig {
        StoreConfig {
            lease_ttl_secs: self.lease_ttl_secs,
            train_fraction: self.train_fraction,
            split_seed: self.split_seed,
            ..StoreConfig::default()
        }
    }
}
