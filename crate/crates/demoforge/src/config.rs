//! Service configuration: command-line flag, then environment, then config
//! file, then built-in default.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::catalog::DocError;

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = "demoforge-data";
pub const DEFAULT_MAX_SESSIONS: usize = 32;
pub const DEFAULT_MEDIA_CAP_BYTES: u64 = 256 * 1024 * 1024;

/// Contents of a config file; every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub data_dir: Option<PathBuf>,
    pub bind: Option<String>,
    pub max_sessions: Option<usize>,
    pub media_cap_bytes: Option<u64>,
    pub catalog_dir: Option<PathBuf>,
}

impl FileConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, DocError> {
        toml::from_str(text).map_err(|source| DocError::Parse { origin: origin.into(), source })
    }

    pub fn load(path: &Path) -> Result<Self, DocError> {
        let text = fs::read_to_string(path).map_err(|source| DocError::Io { path: path.into(), source })?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Values given by flag or environment (clap merges the two).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub bind: Option<String>,
    pub max_sessions: Option<usize>,
    pub media_cap_bytes: Option<u64>,
    pub catalog_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeConfig {
    pub data_dir: PathBuf,
    pub bind: SocketAddr,
    pub max_sessions: usize,
    pub media_cap_bytes: u64,
    pub catalog_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Doc(#[from] DocError),
    #[error("bind: `{0}` is not a host:port address")]
    Bind(String),
    #[error("{0} must be positive")]
    NotPositive(&'static str),
}

impl ServeConfig {
    pub fn resolve(over: Overrides, file: FileConfig) -> Result<Self, ConfigError> {
        let bind = over.bind.or(file.bind).unwrap_or_else(|| DEFAULT_BIND.into());
        let bind = bind.parse().map_err(|_| ConfigError::Bind(bind))?;
        let max_sessions = over.max_sessions.or(file.max_sessions).unwrap_or(DEFAULT_MAX_SESSIONS);
        if max_sessions == 0 {
            return Err(ConfigError::NotPositive("max_sessions"));
        }
        let media_cap_bytes = over.media_cap_bytes.or(file.media_cap_bytes).unwrap_or(DEFAULT_MEDIA_CAP_BYTES);
        if media_cap_bytes == 0 {
            return Err(ConfigError::NotPositive("media_cap_bytes"));
        }
        Ok(ServeConfig {
            data_dir: over.data_dir.or(file.data_dir).unwrap_or_else(|| DEFAULT_DATA_DIR.into()),
            bind,
            max_sessions,
            media_cap_bytes,
            catalog_dir: over.catalog_dir.or(file.catalog_dir),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file = FileConfig::parse("bind = \"127.0.0.1:9000\"\nmax_sessions = 4\ndata_dir = \"/f\"\n", "c").unwrap();
        let over = Overrides { max_sessions: Some(8), ..Default::default() };
        let c = ServeConfig::resolve(over, file).unwrap();
        assert_eq!(c.bind, "127.0.0.1:9000".parse().unwrap());
        assert_eq!(c.max_sessions, 8);
        assert_eq!(c.data_dir, PathBuf::from("/f"));
        assert_eq!(c.media_cap_bytes, DEFAULT_MEDIA_CAP_BYTES);
    }

    #[test]
    fn defaults() {
        let c = ServeConfig::resolve(Overrides::default(), FileConfig::default()).unwrap();
        assert_eq!(c.max_sessions, 32);
        assert_eq!(c.bind, DEFAULT_BIND.parse().unwrap());
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = FileConfig::parse("bind = \"x\"\nmax_sessions = \"many\"\n", "serve.toml").unwrap_err();
        let msg = e.to_string();
        assert!(msg.contains("serve.toml") && msg.contains("line 2"), "{msg}");
        assert!(FileConfig::parse("colour = 1\n", "c").is_err());
        let bad = Overrides { bind: Some("nope".into()), ..Default::default() };
        assert!(ServeConfig::resolve(bad, FileConfig::default()).is_err());
    }
}
