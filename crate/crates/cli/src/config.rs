//! Run configuration: one TOML document plus dotted `--set` overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

/// Raised for malformed or inconsistent configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_err(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; every other seed is derived from it.
    pub seed: u64,
    pub synth: SynthSection,
    pub degrade: DegradeSection,
    pub train: TrainSection,
    pub preview: PreviewSection,
    pub refine: RefineSection,
    pub profile: ProfileSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub out: PathBuf,
    pub count: usize,
    /// `bouncing_rect`, `moving_gaussian`, or `mixed` (alternating).
    pub kind: String,
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Per-clip seed overrides keyed by clip index.
    pub clip_seeds: BTreeMap<String, u64>,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection {
            out: "data".into(),
            count: 32,
            kind: "mixed".into(),
            channels: 1,
            frames: 9,
            height: 16,
            width: 16,
            clip_seeds: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradeSection {
    pub blur_radius: usize,
    pub blur_sigma: f64,
    pub down_factor: usize,
    pub latent_noise: f64,
}

impl Default for DegradeSection {
    fn default() -> Self {
        DegradeSection { blur_radius: 2, blur_sigma: 1.0, down_factor: 2, latent_noise: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub data: PathBuf,
    pub base_out: PathBuf,
    pub refiner_out: PathBuf,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub phase1_frames: usize,
    pub phase1_iters: usize,
    pub phase2_frames: usize,
    pub phase2_iters: usize,
    /// Stop once this many iterations are done in total; 0 runs the whole schedule.
    pub stop_at: usize,
    /// Continue from the existing checkpoint and optimizer state.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            data: "data".into(),
            base_out: "base.ckpt".into(),
            refiner_out: "refiner.ckpt".into(),
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 4,
            phase1_frames: 5,
            phase1_iters: 100,
            phase2_frames: 9,
            phase2_iters: 100,
            stop_at: 0,
            resume: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreviewSection {
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    pub frames: usize,
    /// Full-resolution latent size.
    pub height: usize,
    pub width: usize,
    /// Latent size after the resolution switch.
    pub lo_height: usize,
    pub lo_width: usize,
    pub n_total: usize,
    pub k: usize,
    pub shift: f64,
    pub seed: u64,
    pub count: usize,
}

impl Default for PreviewSection {
    fn default() -> Self {
        PreviewSection {
            checkpoint: "base.ckpt".into(),
            out: "preview.lgr".into(),
            frames: 9,
            height: 8,
            width: 8,
            lo_height: 4,
            lo_width: 4,
            n_total: 40,
            k: 10,
            shift: 5.0,
            seed: 0,
            count: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub checkpoint: PathBuf,
    pub preview: PathBuf,
    pub out: PathBuf,
    pub frames_dir: PathBuf,
    pub steps: usize,
    /// Spatial upscale from preview to refined latent.
    pub scale: usize,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            checkpoint: "refiner.ckpt".into(),
            preview: "preview.lgr".into(),
            out: "refined.lgr".into(),
            frames_dir: "frames".into(),
            steps: 10,
            scale: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageEntry {
    pub name: String,
    pub frames: usize,
    /// Token grid per frame.
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub steps: usize,
    /// Temporal window in frames; 0 means global attention.
    pub window: usize,
    pub overhead_s: f64,
}

impl Default for StageEntry {
    fn default() -> Self {
        StageEntry {
            name: "stage".into(),
            frames: 1,
            height: 1,
            width: 1,
            dim: 1,
            heads: 1,
            depth: 1,
            steps: 1,
            window: 0,
            overhead_s: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileSection {
    pub out: PathBuf,
    pub k_values: Vec<usize>,
    pub n_total: usize,
    /// Empty: use the built-in reference pipeline.
    pub stages: Vec<StageEntry>,
    pub baseline: Option<StageEntry>,
    /// 0: scale so the baseline takes the published baseline time.
    pub sec_per_flop: f64,
    pub step_overhead_s: f64,
}

impl Default for ProfileSection {
    fn default() -> Self {
        ProfileSection {
            out: "profile".into(),
            k_values: vec![5, 10, 20, 30, 40],
            n_total: 40,
            stages: Vec::new(),
            baseline: None,
            sec_per_flop: 0.0,
            step_overhead_s: 0.0,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, or as a bare
/// string when it does not parse as one.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {part:?} is not a table")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

pub fn from_table(table: toml::Table) -> Result<Config> {
    let cfg: Config = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Config> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    from_table(table)
}

/// Effective config as `dotted.key` → TOML literal, in a stable order.
pub fn flatten(cfg: &Config) -> Result<Vec<(String, String)>> {
    fn walk(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
        match v {
            toml::Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            other => out.push((prefix.to_string(), other.to_string())),
        }
    }
    let value = toml::Value::try_from(cfg).context("serialising config")?;
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out.sort();
    Ok(out)
}

/// Rebuilds a config from [`flatten`] output.
pub fn unflatten(entries: &[(String, String)]) -> Result<toml::Table> {
    let text: String = entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
    toml::from_str::<toml::Table>(&text).map_err(|e| config_err(format!("manifest config: {e}")))
}

pub fn check_positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        bail!(config_err(format!("{name} must be >= 1")));
    }
    Ok(())
}
