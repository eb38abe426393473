//! The run configuration file shared by `train`, `finetune` and `ablate`.
//!
//! ```json
//! {"version": 1, "model": {...}, "train": {...}, "ablation": {...}}
//! ```
//!
//! Every section is optional. See `docs/config.md` for the keys.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::convmodel::{check_version, system_config_from_value, unknown_keys, SystemConfig, SystemKind};
use crate::error::{Error, Result};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub systems: Vec<SystemKind>,
    pub multipliers: Vec<f64>,
    pub n_eval: usize,
    pub eval_seed: u64,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            systems: SystemKind::ALL.to_vec(),
            multipliers: vec![1.0, 1.5, 2.0],
            n_eval: 5,
            eval_seed: 2024,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    /// The model section as written (or the default), for per-arm overrides.
    pub model_value: Value,
    pub model: SystemConfig,
    pub train: TrainConfig,
    pub ablation: AblationSection,
}

pub fn default_model_value() -> Value {
    serde_json::json!({"preset": "desk", "system": "s1"})
}

/// Parses one section, collecting every unknown key. Keys under an
/// `opaque` prefix are tagged enums whose variants carry different fields;
/// serde validates those.
fn section<T>(v: Option<&Value>, name: &str, opaque: &[&str], bad: &mut Vec<String>) -> Option<T>
where
    T: Default + Serialize + for<'de> Deserialize<'de>,
{
    let Some(v) = v else { return Some(T::default()) };
    let reference = serde_json::to_value(T::default()).expect("defaults serialise");
    let unknown: Vec<String> = unknown_keys(v, &reference)
        .into_iter()
        .filter(|k| !opaque.iter().any(|p| k.starts_with(&format!("{p}."))))
        .collect();
    if !unknown.is_empty() {
        bad.extend(unknown.into_iter().map(|k| format!("{name}.{k}")));
        return None;
    }
    match serde_json::from_value(v.clone()) {
        Ok(t) => Some(t),
        Err(e) => {
            bad.push(format!("{name}: {e}"));
            None
        }
    }
}

impl RunConfig {
    pub fn defaults() -> Result<RunConfig> {
        Self::from_value(&serde_json::json!({"version": 1}))
    }

    pub fn from_value(v: &Value) -> Result<RunConfig> {
        check_version(v)?;
        let obj = v
            .as_object()
            .ok_or_else(|| Error::Schema(vec!["run config must be a JSON object".into()]))?;
        let mut bad: Vec<String> = obj
            .keys()
            .filter(|k| !matches!(k.as_str(), "version" | "model" | "train" | "ablation"))
            .cloned()
            .collect();
        let model_value = obj.get("model").cloned().unwrap_or_else(default_model_value);
        let model = match system_config_from_value(&model_value) {
            Ok(m) => Some(m),
            Err(Error::Schema(keys)) => {
                bad.extend(keys.into_iter().map(|k| match k.strip_prefix("unknown key ") {
                    Some(key) => format!("model.{key}"),
                    None => format!("model: {k}"),
                }));
                None
            }
            Err(e) => return Err(e),
        };
        let train: Option<TrainConfig> = section(obj.get("train"), "train", &["lr_schedule"], &mut bad);
        let ablation: Option<AblationSection> = section(obj.get("ablation"), "ablation", &[], &mut bad);
        if !bad.is_empty() {
            return Err(Error::Schema(bad));
        }
        let (model, train, ablation) = (model.unwrap(), train.unwrap(), ablation.unwrap());
        train.validate()?;
        if ablation.multipliers.iter().any(|m| !(m.is_finite() && *m > 0.0)) || ablation.n_eval == 0 {
            return Err(Error::Schema(vec![
                "ablation.multipliers must be positive and ablation.n_eval ≥ 1".into(),
            ]));
        }
        Ok(RunConfig {
            model_value,
            model,
            train,
            ablation,
        })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let v: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(vec![format!("{}: {e}", path.display())]))?;
        Self::from_value(&v)
    }

    /// The resolved configuration, every default spelled out.
    pub fn to_value(&self) -> Value {
        serde_json::json!({
            "version": 1,
            "model": self.model,
            "train": self.train,
            "ablation": self.ablation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c = RunConfig::defaults().unwrap();
        assert_eq!(c.model.system, SystemKind::S1);
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.ablation.systems.len(), 4);
    }

    #[test]
    fn every_unknown_key_is_listed() {
        let v = serde_json::json!({
            "version": 1,
            "extra": 0,
            "model": {"preset": "micro", "system": "s2", "bogus": 1},
            "train": {"lr": 0.01, "momentum": 0.9},
            "ablation": {"trials": 3}
        });
        let Err(Error::Schema(keys)) = RunConfig::from_value(&v) else { panic!() };
        for k in ["extra", "model.bogus", "train.momentum", "ablation.trials"] {
            assert!(keys.iter().any(|x| x == k), "{k} missing from {keys:?}");
        }
    }

    #[test]
    fn resolved_config_reloads() {
        let v = serde_json::json!({"version": 1, "model": {"preset": "micro", "system": "s3"}, "train": {"max_steps": 3}});
        let c = RunConfig::from_value(&v).unwrap();
        let back = RunConfig::from_value(&c.to_value()).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train.max_steps, 3);
    }

    #[test]
    fn step_schedule_fields_are_accepted() {
        let v = serde_json::json!({"version": 1, "train": {"lr_schedule": {"kind": "step", "every": 10, "factor": 0.5}}});
        let c = RunConfig::from_value(&v).unwrap();
        assert!(matches!(c.train.lr_schedule, crate::training::LrSchedule::Step { every: 10, .. }));
    }
}
