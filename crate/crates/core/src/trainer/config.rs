//! Run configuration addressed by flat dotted keys (`trainer.lr_g`, ...).
//!
//! A file is a JSON object of dotted keys (nested objects are flattened).
//! The `preset` entry, if any, is applied first; every other key must
//! already exist in the configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
    Tiny,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config(format!("unknown preset {s:?} (paper, desk, tiny)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub lambda: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub lr_t: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    /// Overrides the epoch-derived step count when positive.
    pub max_steps: usize,
    pub seed: u64,
    /// 0 disables periodic checkpoints (a final one is still written).
    pub checkpoint_every: usize,
    /// 0 disables periodic evaluation.
    pub eval_every: usize,
    /// Samples in each PNG grid.
    pub grid_samples: usize,
    pub out_dir: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: String,
    /// Empty evaluates on the training manifest.
    pub val_manifest: String,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub preset: Preset,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl Config {
    pub fn preset(preset: Preset) -> Self {
        let trainer = TrainerConfig {
            batch_size: 4,
            lambda: 0.1,
            lr_g: 0.0002,
            lr_d: 0.0002,
            lr_t: 0.002,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 160,
            max_steps: 0,
            seed: 1,
            checkpoint_every: 0,
            eval_every: 50,
            grid_samples: 4,
            out_dir: "runs/tsg".into(),
        };
        let data = DataConfig { train_manifest: String::new(), val_manifest: String::new(), augment: true };
        match preset {
            Preset::Paper => Self {
                preset,
                model: ModelConfig::paper(),
                trainer: TrainerConfig { batch_size: 16, eval_every: 1000, checkpoint_every: 5000, ..trainer },
                data,
            },
            Preset::Desk => {
                Self { preset, model: ModelConfig::desk(), trainer: TrainerConfig { epochs: 150, ..trainer }, data }
            }
            Preset::Tiny => Self {
                preset,
                model: ModelConfig::tiny(),
                trainer: TrainerConfig { batch_size: 2, epochs: 10, eval_every: 5, ..trainer },
                data,
            },
        }
    }

    /// Every key with its current value, sorted by key.
    pub fn entries(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        flatten("", &serde_json::to_value(self).expect("config serialises"), &mut out);
        out
    }

    /// Sets one dotted key. Unknown keys and ill-typed values are config
    /// errors naming the key.
    pub fn set(&mut self, key: &str, value: Value) -> Result<()> {
        if key == "preset" {
            let p: Preset = serde_json::from_value(value).map_err(|e| Error::Config(format!("preset: {e}")))?;
            *self = Self::preset(p);
            return Ok(());
        }
        let mut tree = serde_json::to_value(&*self).expect("config serialises");
        let mut slot = &mut tree;
        for part in key.split('.') {
            slot = match slot.as_object_mut().and_then(|m| m.get_mut(part)) {
                Some(s) => s,
                None => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
            };
        }
        if slot.is_object() {
            return Err(Error::Config(format!("{key:?} is a section, not a key")));
        }
        *slot = value;
        *self = serde_json::from_value(tree).map_err(|e| Error::Config(format!("invalid value for {key:?}: {e}")))?;
        Ok(())
    }

    /// Applies entries in order after the last `preset` entry has reset the
    /// configuration.
    pub fn apply(&mut self, entries: &[(String, Value)]) -> Result<()> {
        if let Some((_, p)) = entries.iter().rev().find(|(k, _)| k == "preset") {
            self.set("preset", p.clone())?;
        }
        for (k, v) in entries.iter().filter(|(k, _)| k != "preset") {
            self.set(k, v.clone())?;
        }
        self.validate()
    }

    pub fn from_entries(entries: &[(String, Value)]) -> Result<Self> {
        let mut c = Self::default();
        c.apply(entries)?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_entries(&read_entries(path)?)
    }

    /// Flat JSON object of every key.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trainer;
        let bad = |m: String| Err(Error::Config(m));
        if t.batch_size == 0 {
            return bad("trainer.batch_size must be positive".into());
        }
        for (k, v) in [("trainer.lr_g", t.lr_g), ("trainer.lr_d", t.lr_d), ("trainer.lr_t", t.lr_t)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
            return bad(format!("trainer.lambda must be non-negative, got {}", t.lambda));
        }
        for (k, v) in [("trainer.beta1", t.beta1), ("trainer.beta2", t.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{k} must lie in [0, 1), got {v}"));
            }
        }
        self.model.codec().feature_side(self.model.image_size)?;
        Ok(())
    }

    /// Steps for a training set of `n` samples: one step per batch per epoch
    /// unless `trainer.max_steps` is set.
    pub fn total_steps(&self, n: usize) -> usize {
        if self.trainer.max_steps > 0 {
            self.trainer.max_steps
        } else {
            self.trainer.epochs * crate::data::batches_per_epoch(n, self.trainer.batch_size)
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

/// Dotted entries of a JSON configuration file, in file order.
pub fn read_entries(path: &Path) -> Result<Vec<(String, Value)>> {
    let text = fs::read_to_string(path)?;
    let v: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    flatten("", &Value::Object(v), &mut out);
    Ok(out.into_iter().collect())
}

/// Parses `key=value`; the value is read as JSON, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, Value)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn paper_defaults() {
        let c = Config::preset(Preset::Paper);
        assert_eq!(c.trainer.lambda, 0.1);
        assert_eq!((c.trainer.lr_g, c.trainer.lr_d, c.trainer.lr_t), (0.0002, 0.0002, 0.002));
        assert_eq!((c.trainer.beta1, c.trainer.beta2), (0.5, 0.999));
        assert_eq!(c.trainer.epochs, 160);
        assert_eq!((c.model.word_dim, c.model.text_len, c.model.noise_dim, c.model.cond_dim), (256, 18, 100, 100));
    }

    #[test]
    fn set_round_trips_every_key() {
        let c = Config::default();
        for (k, v) in c.entries() {
            let mut d = c.clone();
            d.set(&k, v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_key_named_in_error() {
        let err = Config::default().set("trainer.lr_x", json!(1.0)).unwrap_err();
        assert!(err.to_string().contains("trainer.lr_x"));
        assert!(Config::default().set("trainer", json!(1.0)).is_err());
        assert!(Config::default().set("trainer.lr_g", json!("fast")).is_err());
    }

    #[test]
    fn preset_applies_before_other_keys() {
        let c = Config::from_entries(&[("trainer.lr_g".into(), json!(0.01)), ("preset".into(), json!("tiny"))]).unwrap();
        assert_eq!(c.preset, Preset::Tiny);
        assert_eq!(c.trainer.lr_g, 0.01);
        assert_eq!(c.model.image_size, 8);
    }

    #[test]
    fn file_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"preset": "tiny", "trainer": {"seed": 9}, "model.stage2": false}"#).unwrap();
        let mut entries = read_entries(&p).unwrap();
        entries.push(parse_override("trainer.out_dir=/tmp/x").unwrap());
        entries.push(parse_override("model.ca_channels=[4]").unwrap());
        let c = Config::from_entries(&entries).unwrap();
        assert_eq!((c.trainer.seed, c.model.stage2), (9, false));
        assert_eq!(c.trainer.out_dir, "/tmp/x");
        assert_eq!(c.model.ca_channels, vec![4]);
    }

    #[test]
    fn validation() {
        let mut c = Config::default();
        c.trainer.lr_d = 0.0;
        assert!(c.validate().is_err());
        let mut c = Config::default();
        c.model.image_size = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn desk_overfit_schedule_is_300_steps_for_8_samples() {
        assert_eq!(Config::preset(Preset::Desk).total_steps(8), 300);
    }
}
