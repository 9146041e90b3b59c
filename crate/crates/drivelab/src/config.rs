//! Flat key-value configuration with sections.
//!
//! Grammar (one entry per line):
//!
//! ```text
//! # comment
//! [section]
//! key = value
//! ```
//!
//! Keys are addressed as `section.key`. A config starts from the built-in
//! defaults; a file overrides defaults; `--set section.key=value` flags
//! override both. The config hash is the SHA-256 of the canonical sorted
//! `key = value` listing and is embedded in every artifact produced under
//! that config.

use crate::data::CollectConfig;
use crate::models::ModelScale;
use crate::training::TrainConfig;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config line {0}: {1}")]
    Parse(usize, String),
    #[error("config key '{0}': {1}")]
    Value(String, String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        let mut c = Config { values: BTreeMap::new() };
        let defaults: &[(&str, &str)] = &[
            ("run.seed", "7"),
            ("run.workers", "2"),
            ("run.scale_width", "8"),
            ("run.full_scale", "false"),
            // data collection
            ("data.map_seed", "1"),
            ("data.episodes", "200"),
            ("data.frames_per_episode", "200"),
            ("data.vehicles_min", "2"),
            ("data.vehicles_max", "8"),
            ("data.pedestrians_min", "4"),
            ("data.pedestrians_max", "12"),
            ("data.annotation_fraction", "1.0"),
            ("data.require_all_commands", "true"),
            // training
            ("train.batch_size", "120"),
            ("train.lr", "2e-4"),
            ("train.lr_drop_factor", "10"),
            ("train.lr_patience_iters", "1000"),
            ("train.val_every_iters", "2000"),
            ("train.early_stop_patience", "3"),
            ("train.max_iters", "60000"),
            ("train.control_w_brake", "1.0"),
            ("train.control_w_gas", "1.0"),
            ("train.control_w_steer", "2.0"),
            ("train.mimic_w_seg", "0.03"),
            ("train.mimic_w_intent", "0.03"),
            ("train.intention_mask", "vpl"),
            ("train.mimic_sources", "seg+intent"),
            ("train.val_fraction", "0.1"),
            ("train.side_w_seg", "1.0"),
            ("train.side_w_intent", "1.0"),
            // benchmarks
            ("bench.train_town_seed", "1"),
            ("bench.new_town_seed", "2"),
            ("bench.routes_per_condition", "25"),
            ("bench.repetitions", "3"),
            ("bench.timeout_factor", "2.0"),
            ("bench.regular_vehicles", "8"),
            ("bench.regular_pedestrians", "12"),
            ("bench.dense_vehicles", "16"),
            ("bench.dense_pedestrians", "24"),
            ("bench.target_speed", "6.0"),
            ("bench.arrival_tolerance", "2.0"),
            ("bench.off_route_lateral", "5.0"),
            ("bench.off_route_secs", "3.0"),
            ("bench.conditions", "all"),
            ("bench.levels", "all"),
        ];
        for (k, v) in defaults {
            c.values.insert(k.to_string(), v.to_string());
        }
        c
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Config::parse(&text)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut section = String::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Parse(ln + 1, format!("expected 'key = value', got '{line}'")))?;
            let key = key.trim();
            if key.is_empty() || section.is_empty() {
                return Err(ConfigError::Parse(ln + 1, "key outside a [section]".into()));
            }
            self.values.insert(format!("{section}.{key}"), value.trim().to_string());
        }
        Ok(())
    }

    /// `--set section.key=value` overrides.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, value) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::Parse(0, format!("--set expects section.key=value, got '{spec}'")))?;
        if !key.contains('.') {
            return Err(ConfigError::Parse(0, format!("--set key '{key}' must be section.key")));
        }
        self.values.insert(key.trim().to_string(), value.trim().to_string());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get_str(&self, key: &str) -> Result<&str, ConfigError> {
        self.values
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| ConfigError::Value(key.into(), "missing".into()))
    }

    pub fn get_f64(&self, key: &str) -> Result<f64, ConfigError> {
        self.get_str(key)?
            .parse()
            .map_err(|e| ConfigError::Value(key.into(), format!("not a number: {e}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64, ConfigError> {
        self.get_str(key)?
            .parse()
            .map_err(|e| ConfigError::Value(key.into(), format!("not an integer: {e}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize, ConfigError> {
        self.get_str(key)?
            .parse()
            .map_err(|e| ConfigError::Value(key.into(), format!("not an integer: {e}")))
    }

    pub fn get_bool(&self, key: &str) -> Result<bool, ConfigError> {
        match self.get_str(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(ConfigError::Value(key.into(), format!("not a bool: '{other}'"))),
        }
    }

    /// Canonical sorted listing; the artifact hash is derived from this.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical().as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn scale(&self) -> Result<ModelScale, ConfigError> {
        if self.get_bool("run.full_scale")? {
            Ok(ModelScale::Full)
        } else {
            Ok(ModelScale::Desk { width: self.get_usize("run.scale_width")? })
        }
    }

    pub fn collect_config(&self) -> Result<CollectConfig, ConfigError> {
        Ok(CollectConfig {
            map_seed: self.get_u64("data.map_seed")?,
            weathers: crate::sim::WeatherParams::train_set().iter().map(|w| w.name.clone()).collect(),
            episodes: self.get_usize("data.episodes")?,
            frames_per_episode: self.get_usize("data.frames_per_episode")?,
            vehicles_range: (self.get_usize("data.vehicles_min")?, self.get_usize("data.vehicles_max")?),
            pedestrians_range: (
                self.get_usize("data.pedestrians_min")?,
                self.get_usize("data.pedestrians_max")?,
            ),
            annotation_fraction: self.get_f64("data.annotation_fraction")?,
            seed: self.get_u64("run.seed")?,
            require_all_commands: self.get_bool("data.require_all_commands")?,
            config_hash: self.hash(),
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig, ConfigError> {
        let mask_s = self.get_str("train.intention_mask")?;
        let intention_mask = [mask_s.contains('v'), mask_s.contains('p'), mask_s.contains('l')];
        let src = self.get_str("train.mimic_sources")?;
        let mimic_sources = [src.contains("seg"), src.contains("intent")];
        Ok(TrainConfig {
            batch_size: self.get_usize("train.batch_size")?,
            lr: self.get_f64("train.lr")?,
            lr_drop_factor: self.get_f64("train.lr_drop_factor")?,
            lr_patience_iters: self.get_u64("train.lr_patience_iters")?,
            val_every_iters: self.get_u64("train.val_every_iters")?,
            early_stop_patience: self.get_u64("train.early_stop_patience")?,
            max_iters: self.get_u64("train.max_iters")?,
            control_weights: [
                self.get_f64("train.control_w_brake")?,
                self.get_f64("train.control_w_gas")?,
                self.get_f64("train.control_w_steer")?,
            ],
            mimic_weights: [self.get_f64("train.mimic_w_seg")?, self.get_f64("train.mimic_w_intent")?],
            intention_mask,
            mimic_sources,
            val_fraction: self.get_f64("train.val_fraction")?,
            side_weights: [self.get_f64("train.side_w_seg")?, self.get_f64("train.side_w_intent")?],
            scale: self.scale()?,
            seed: self.get_u64("run.seed")?,
        })
    }

    pub fn suite(&self, name: crate::bench::SuiteName) -> Result<crate::bench::BenchmarkSuite, ConfigError> {
        use std::str::FromStr;
        let mut suite = crate::bench::BenchmarkSuite::new(name);
        suite.train_town_seed = self.get_u64("bench.train_town_seed")?;
        suite.new_town_seed = self.get_u64("bench.new_town_seed")?;
        suite.routes_per_condition = self.get_usize("bench.routes_per_condition")?;
        suite.repetitions = self.get_usize("bench.repetitions")?;
        suite.timeout_factor = self.get_f64("bench.timeout_factor")?;
        suite.regular_population =
            (self.get_usize("bench.regular_vehicles")?, self.get_usize("bench.regular_pedestrians")?);
        suite.dense_population =
            (self.get_usize("bench.dense_vehicles")?, self.get_usize("bench.dense_pedestrians")?);
        suite.target_speed = self.get_f64("bench.target_speed")?;
        suite.arrival_tolerance = self.get_f64("bench.arrival_tolerance")?;
        suite.off_route_lateral = self.get_f64("bench.off_route_lateral")?;
        suite.off_route_secs = self.get_f64("bench.off_route_secs")?;
        suite.seed = self.get_u64("run.seed")?.wrapping_mul(1000).wrapping_add(17);
        let conds = self.get_str("bench.conditions")?;
        if conds != "all" {
            suite.conditions = conds
                .split(',')
                .map(|s| crate::bench::ConditionKind::from_str(s.trim()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ConfigError::Value("bench.conditions".into(), e))?;
        }
        let levels = self.get_str("bench.levels")?;
        if levels != "all" && name != crate::bench::SuiteName::TrafficLight {
            suite.levels = levels
                .split(',')
                .map(|s| match s.trim() {
                    "empty" => Ok(crate::bench::TrafficLevel::Empty),
                    "regular" => Ok(crate::bench::TrafficLevel::Regular),
                    "dense" => Ok(crate::bench::TrafficLevel::Dense),
                    other => Err(ConfigError::Value("bench.levels".into(), format!("unknown level '{other}'"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
        }
        Ok(suite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_sections_and_overrides() {
        let mut cfg = Config::parse("[run]\nseed = 42\n# comment\n[train]\nbatch_size = 16\n").unwrap();
        assert_eq!(cfg.get_u64("run.seed").unwrap(), 42);
        assert_eq!(cfg.get_usize("train.batch_size").unwrap(), 16);
        cfg.apply_override("train.batch_size=8").unwrap();
        assert_eq!(cfg.get_usize("train.batch_size").unwrap(), 8);
        assert!(cfg.apply_override("nodot=1").is_err());
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(Config::parse("[run]\nnot a kv line\n").is_err());
        assert!(Config::parse("orphan = 1\n").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::parse("[run]\nseed = 1\n").unwrap();
        let b = Config::parse("[run]\nseed = 2\n").unwrap();
        let a2 = Config::parse("[run]\nseed = 1\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a2.hash());
    }

    #[test]
    fn typed_extraction_defaults() {
        let cfg = Config::default();
        let t = cfg.train_config().unwrap();
        assert_eq!(t.batch_size, 120);
        assert_eq!(t.control_weights, [1.0, 1.0, 2.0]);
        assert_eq!(t.mimic_weights, [0.03, 0.03]);
        let c = cfg.collect_config().unwrap();
        assert_eq!(c.episodes, 200);
        assert_eq!(c.frames_per_episode, 200);
        let s = cfg.suite(crate::bench::SuiteName::Nocrash).unwrap();
        assert_eq!(s.routes_per_condition, 25);
        assert_eq!(s.repetitions, 3);
        assert_eq!(s.timeout_factor, 2.0);
    }
}
