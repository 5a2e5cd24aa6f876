//! Versioned run manifests written next to every command's outputs.

use crate::config::Seeds;
use anyhow::Context;
use serde::Serialize;
use std::path::Path;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct Manifest<C: Serialize> {
    pub format_version: u32,
    pub tool_version: &'static str,
    pub command: &'static str,
    /// Fully resolved inputs; for `train` and `synth` this is a complete
    /// config that `--config` accepts.
    pub config: C,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Seeds>,
    pub outputs: Vec<String>,
    pub summary: serde_json::Value,
}

impl<C: Serialize> Manifest<C> {
    pub fn new(command: &'static str, config: C, seeds: Option<Seeds>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seeds,
            outputs: Vec::new(),
            summary: serde_json::Value::Null,
        }
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
