//! TOML run configuration.
//!
//! ```toml
//! seed = 0
//! [io]       # scene_dir, output_dir, fp_database
//! [rig]      # synthetic camera ring and LiDAR mount
//! [painter]
//! [refiner]
//! [fusion]
//! [dispatch]
//! [fpa]
//! [synth]    # scene generator and noise
//! ```
//!
//! Every key is optional. Overrides use dotted paths, e.g.
//! `refiner.enabled=false` or `synth.noise.rotation_jitter_deg=0.5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dispatch::DispatchConfig;
use crate::error::{Error, Result};
use crate::fp_augment::FpaConfig;
use crate::fusion::FusionConfig;
use crate::painter::PainterConfig;
use crate::refiner::RefinerConfig;
use crate::synth::{RigSpec, SceneSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub scene_dir: PathBuf,
    pub output_dir: PathBuf,
    pub fp_database: PathBuf,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            scene_dir: "scene".into(),
            output_dir: "out".into(),
            fp_database: "fp_db".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub io: IoConfig,
    pub rig: RigSpec,
    pub painter: PainterConfig,
    pub refiner: RefinerConfig,
    pub fusion: FusionConfig,
    pub dispatch: DispatchConfig,
    pub fpa: FpaConfig,
    pub synth: SceneSpec,
}

impl Config {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = toml::from_str(text).map_err(config_error)?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| config_error(e))
    }

    /// Reads `path` (defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_error)
    }

    /// Scene spec with the rig section folded in.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            rig: self.rig,
            ..self.synth.clone()
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string().trim_end().to_string())
}

fn apply_override(root: &mut toml::Table, expr: &str) -> Result<()> {
    let (key, raw) = expr
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {expr:?} is not key=value")))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {key:?}")));
    }
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{part} in {key:?} is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_default() {
        assert_eq!(Config::from_toml("", &[]).unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.seed = 7;
        c.refiner.enabled = false;
        c.synth.noise.occluders = 3;
        let text = c.to_toml().unwrap();
        assert_eq!(Config::from_toml(&text, &[]).unwrap(), c);
    }

    #[test]
    fn overrides() {
        let c = Config::from_toml(
            "[refiner]\nmin_pts = 6\n",
            &[
                "refiner.enabled=false".into(),
                "synth.noise.rotation_jitter_deg = 0.5".into(),
                "io.scene_dir=/tmp/x".into(),
                "seed=3".into(),
            ],
        )
        .unwrap();
        assert!(!c.refiner.enabled);
        assert_eq!(c.refiner.min_pts, 6);
        assert_eq!(c.synth.noise.rotation_jitter_deg, 0.5);
        assert_eq!(c.io.scene_dir, PathBuf::from("/tmp/x"));
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert!(Config::from_toml("[bogus]\n", &[]).is_err());
        assert!(Config::from_toml("[refiner]\nbogus = 1\n", &[]).is_err());
        assert!(Config::from_toml("", &["fusion.grid.bogus=1".into()]).is_err());
        assert!(Config::from_toml("", &["refiner.enabled".into()]).is_err());
        assert!(Config::from_toml("", &["refiner.min_pts=many".into()]).is_err());
    }
}
