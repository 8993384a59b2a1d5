//! Training configuration files.
//!
//! Configs are TOML with every field optional; omitted fields take their
//! defaults, unknown fields are rejected. Parsing always validates.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TrainConfig;

/// Parses and validates a config from TOML text.
pub fn parse_train_config(text: &str) -> Result<TrainConfig> {
    let cfg: TrainConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a config file from disk. An unreadable file is a config error, not
/// an I/O error: the path came from the user's command line.
pub fn load_train_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_train_config(&text)
}

/// Renders a config as TOML, e.g. to print a template for editing.
pub fn render_train_config(cfg: &TrainConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config render error: {e}")))
}
