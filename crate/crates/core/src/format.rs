//! Structured-text documents (schemas, configs, surveys, scripts) in JSON or TOML.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum DocumentError {
    #[error("invalid JSON document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid TOML document: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("cannot encode TOML document: {0}")]
    TomlEncode(#[from] toml::ser::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DocFormat {
    #[default]
    Json,
    Toml,
}

impl DocFormat {
    /// `.toml` files are TOML; everything else is read as JSON.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("toml") => DocFormat::Toml,
            _ => DocFormat::Json,
        }
    }

    pub fn parse<T: DeserializeOwned>(self, text: &str) -> Result<T, DocumentError> {
        Ok(match self {
            DocFormat::Json => serde_json::from_str(text)?,
            DocFormat::Toml => toml::from_str(text)?,
        })
    }

    pub fn render<T: Serialize>(self, value: &T) -> Result<String, DocumentError> {
        Ok(match self {
            DocFormat::Json => serde_json::to_string_pretty(value)?,
            DocFormat::Toml => toml::to_string_pretty(value)?,
        })
    }
}
