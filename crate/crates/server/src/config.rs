//! Service configuration, read from a TOML file.
//!
//! ```toml
//! bind = "127.0.0.1:8080"
//! store_dir = "data"
//! rule_pack = "rules/custom.rules"   # built-in pack when omitted
//! trace_log = "traces.jsonl"         # optional
//! lifecycle_job = true
//!
//! [[tokens]]
//! token_env = "NEUSYMMS_ADMIN_TOKEN"
//! role = "admin"
//!
//! [[tokens]]
//! token = "alice-secret"
//! role = "user"
//! user_id = "alice"
//!
//! [extraction]
//! mode = "offline"
//!
//! [lifecycle]
//! promotion_threshold = 3
//! ```
//!
//! Relative paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use neusymms_core::extraction::ExtractorConfig;
use neusymms_core::lifecycle::LifecyclePolicy;
use neusymms_core::rules::{default_rule_pack, parse_rule_pack, RulePack};

use crate::auth::{Auth, Principal, Role};

pub const DEFAULT_BIND: &str = "127.0.0.1:8080";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{path}: `{key}`: {message}")]
    Parse { path: PathBuf, key: String, message: String },
    #[error("`{key}`: {message}")]
    Invalid { key: String, message: String },
    #[error("rule pack {path}: {message}")]
    RulePack { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenEntry {
    #[serde(default)]
    pub token: Option<String>,
    /// Environment variable holding the token, instead of `token`.
    #[serde(default)]
    pub token_env: Option<String>,
    pub role: Role,
    #[serde(default)]
    pub user_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerConfig {
    #[serde(default = "default_bind")]
    pub bind: String,
    pub store_dir: PathBuf,
    #[serde(default)]
    pub rule_pack: Option<PathBuf>,
    #[serde(default)]
    pub trace_log: Option<PathBuf>,
    #[serde(default = "yes")]
    pub lifecycle_job: bool,
    #[serde(default)]
    pub tokens: Vec<TokenEntry>,
    #[serde(default)]
    pub extraction: ExtractorConfig,
    #[serde(default)]
    pub lifecycle: LifecyclePolicy,
}

fn default_bind() -> String {
    DEFAULT_BIND.to_string()
}

fn yes() -> bool {
    true
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

impl ServerConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            ConfigError::Parse { key, message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                key,
                message,
            },
            other => other,
        })
    }

    /// Parses and checks a config; relative paths are joined onto `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            key: String::new(),
            message: e.message().to_string(),
        })?;
        let mut cfg: ServerConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: PathBuf::new(),
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.store_dir);
        cfg.rule_pack.as_mut().map(resolve);
        cfg.trace_log.as_mut().map(resolve);
        cfg.extraction.patterns_path.as_mut().map(resolve);
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.lifecycle.check().map_err(|m| invalid("lifecycle", m))?;
        self.extraction.check().map_err(|m| invalid("extraction", m))?;
        for (i, t) in self.tokens.iter().enumerate() {
            let key = |field: &str| format!("tokens[{i}].{field}");
            match (&t.token, &t.token_env) {
                (Some(_), Some(_)) => return Err(invalid(key("token"), "set either token or token_env, not both")),
                (None, None) => return Err(invalid(key("token"), "one of token or token_env is required")),
                (Some(tok), None) if tok.is_empty() => return Err(invalid(key("token"), "must not be empty")),
                _ => {}
            }
            match (t.role, &t.user_id) {
                (Role::User, None) => return Err(invalid(key("user_id"), "required for role user")),
                (Role::User, Some(u)) if u.is_empty() => return Err(invalid(key("user_id"), "must not be empty")),
                (Role::Admin, Some(_)) => return Err(invalid(key("user_id"), "not allowed for role admin")),
                _ => {}
            }
        }
        Ok(())
    }

    /// The token table, reading `token_env` variables now.
    pub fn auth(&self) -> Result<Auth, ConfigError> {
        let mut entries = Vec::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let token = match (&t.token, &t.token_env) {
                (Some(tok), _) => tok.clone(),
                (None, Some(var)) => match std::env::var(var) {
                    Ok(v) if !v.is_empty() => v,
                    _ => return Err(invalid(format!("tokens[{i}].token_env"), format!("variable {var} is not set"))),
                },
                (None, None) => unreachable!("checked on load"),
            };
            let principal = Principal::new(&token, t.role, t.user_id.clone());
            entries.push((token, principal));
        }
        Auth::new(entries).map_err(|m| invalid("tokens", m))
    }

    pub fn load_rule_pack(&self) -> Result<RulePack, ConfigError> {
        let Some(path) = &self.rule_pack else {
            return Ok(default_rule_pack());
        };
        let source = std::fs::read_to_string(path).map_err(|e| ConfigError::RulePack {
            path: path.clone(),
            message: e.to_string(),
        })?;
        parse_rule_pack(&source).map_err(|e| ConfigError::RulePack {
            path: path.clone(),
            message: e.to_string(),
        })
    }
}
