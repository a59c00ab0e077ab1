//! Plain `key=value` run records. Keys under `config.` hold the effective
//! configuration as TOML literals so a run can be replayed from the file alone.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::config::{self, config_err, Config};

#[derive(Debug, Clone, Default)]
pub struct Manifest {
    pub entries: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &Config) -> Result<Self> {
        let mut m = Manifest::default();
        m.push("command", command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.push("seed", cfg.seed);
        for (k, v) in config::flatten(cfg)? {
            m.entries.push((format!("config.{k}"), v));
        }
        Ok(m)
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push((key.to_string(), value.to_string().replace('\n', " ")));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        self.entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut m = Manifest::default();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err(format!("manifest line {}: expected key=value", i + 1)))?;
            m.entries.push((k.to_string(), v.to_string()));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        vidgen_core::lgr::write_atomic(path, self.to_text().as_bytes())
            .with_context(|| format!("writing manifest {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        Self::parse(&text)
    }

    /// The recorded configuration with `overrides` applied on top.
    pub fn config(&self, overrides: &[String]) -> Result<Config> {
        let entries: Vec<(String, String)> = self
            .entries
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("config.").map(|k| (k.to_string(), v.clone())))
            .collect();
        let mut table = config::unflatten(&entries)?;
        for o in overrides {
            config::apply_override(&mut table, o)?;
        }
        config::from_table(table)
    }
}

/// Manifest location for a primary output file or directory.
pub fn path_for(output: &Path) -> PathBuf {
    if output.is_dir() {
        output.join("manifest.txt")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}
