//! Checkpoints: a named-tensor bundle plus the model configuration as JSON.
//!
//! Optimizer moments, when present, are stored in the same bundle under
//! `adam.m/<name>` and `adam.v/<name>`, with the step counter in
//! `adam.step`.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::{system_config_from_json, system_config_to_json, SystemConfig};
use super::model::ConversionModel;
use crate::error::{Error, Result};
use crate::numcore::{io, ParamStore, Tensor};

pub const WEIGHTS_FILE: &str = "model.tnsr";
pub const CONFIG_FILE: &str = "config.json";

/// Adam moments aligned with the model's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ConversionModel,
    pub optimizer: Option<OptimizerSnapshot>,
}

fn paths(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(WEIGHTS_FILE), dir.join(CONFIG_FILE))
}

pub fn save_checkpoint(dir: &Path, model: &ConversionModel, optimizer: Option<&OptimizerSnapshot>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (weights, config) = paths(dir);
    let mut names: Vec<String> = Vec::new();
    let mut tensors: Vec<&Tensor> = Vec::new();
    for (_, name, t) in model.params().iter() {
        names.push(name.to_string());
        tensors.push(t);
    }
    let step_tensor;
    if let Some(opt) = optimizer {
        if opt.m.len() != model.params().len() || opt.v.len() != model.params().len() {
            return Err(Error::contract("optimizer state does not match the parameter list"));
        }
        for (prefix, moments) in [("adam.m/", &opt.m), ("adam.v/", &opt.v)] {
            for ((_, name, _), t) in model.params().iter().zip(moments.iter()) {
                names.push(format!("{prefix}{name}"));
                tensors.push(t);
            }
        }
        step_tensor = Tensor::scalar(opt.step as f64);
        names.push("adam.step".into());
        tensors.push(&step_tensor);
    }
    let entries: Vec<(&str, &Tensor)> = names.iter().map(String::as_str).zip(tensors).collect();
    io::save_named(&weights, &entries)?;
    fs::write(&config, system_config_to_json(model.config())?).map_err(|e| Error::io(&config, e))
}

pub fn load_config(dir: &Path) -> Result<SystemConfig> {
    let (_, config) = paths(dir);
    let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
    system_config_from_json(&text).map_err(|e| Error::Load(format!("{}: {e}", config.display())))
}

/// Loads a checkpoint, verifying every tensor against its stored
/// configuration. With `expected`, also requires that configuration to match.
pub fn load_checkpoint(dir: &Path, expected: Option<&SystemConfig>) -> Result<Checkpoint> {
    let config = load_config(dir)?;
    if let Some(exp) = expected {
        if *exp != config {
            return Err(Error::Load(format!(
                "checkpoint configuration (system {}) differs from the requested one (system {})",
                config.system, exp.system
            )));
        }
    }
    let (weights, _) = paths(dir);
    let entries = io::load_named(&weights)?;
    let mut params = ParamStore::new();
    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut step = None;
    for (name, t) in entries {
        if let Some(rest) = name.strip_prefix("adam.m/") {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("adam.v/") {
            v.push((rest.to_string(), t));
        } else if name == "adam.step" {
            step = Some(t.item() as u64);
        } else {
            params.insert(name, t)?;
        }
    }
    let model = ConversionModel::from_params(config, params)?;
    let optimizer = match step {
        None => None,
        Some(step) => {
            let order = |list: Vec<(String, Tensor)>| -> Result<Vec<Tensor>> {
                let mut out = Vec::with_capacity(model.params().len());
                for (_, name, p) in model.params().iter() {
                    let t = list
                        .iter()
                        .find(|(n, _)| n == name)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::Load(format!("optimizer state lacks {name}")))?;
                    if t.shape() != p.shape() {
                        return Err(Error::Load(format!("optimizer state for {name} has the wrong shape")));
                    }
                    out.push(t);
                }
                Ok(out)
            };
            Some(OptimizerSnapshot {
                m: order(m)?,
                v: order(v)?,
                step,
            })
        }
    };
    Ok(Checkpoint { model, optimizer })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convmodel::config::{Preset, SystemKind};

    #[test]
    fn roundtrip_with_and_without_optimizer() {
        let dir = tempfile::tempdir().unwrap();
        let model = ConversionModel::new(SystemConfig::preset(Preset::Micro, SystemKind::S3), 5).unwrap();
        save_checkpoint(dir.path(), &model, None).unwrap();
        let back = load_checkpoint(dir.path(), Some(model.config())).unwrap();
        assert_eq!(back.model.params(), model.params());
        assert!(back.optimizer.is_none());

        let opt = OptimizerSnapshot {
            m: model.params().values().iter().map(|t| t.map(|x| x * 0.5)).collect(),
            v: model.params().values().iter().map(|t| t.map(|x| x * x)).collect(),
            step: 17,
        };
        save_checkpoint(dir.path(), &model, Some(&opt)).unwrap();
        let back = load_checkpoint(dir.path(), None).unwrap();
        assert_eq!(back.optimizer.unwrap(), opt);
    }

    #[test]
    fn mismatched_configuration_is_a_load_error() {
        let dir = tempfile::tempdir().unwrap();
        let model = ConversionModel::new(SystemConfig::preset(Preset::Micro, SystemKind::S1), 5).unwrap();
        save_checkpoint(dir.path(), &model, None).unwrap();
        let other = SystemConfig::preset(Preset::Micro, SystemKind::S2);
        assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::Load(_))));
        // a config file that no longer matches the stored tensors
        fs::write(dir.path().join(CONFIG_FILE), system_config_to_json(&other).unwrap()).unwrap();
        assert!(matches!(load_checkpoint(dir.path(), None), Err(Error::Load(_))));
    }
}
