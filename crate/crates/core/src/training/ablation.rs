use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;
use serde_json::Value;

use super::{evaluate_alignment, train, Example, TrainConfig, TrainData, TrainOutcome};
use crate::convmodel::{system_config_from_value, ConversionModel, SystemConfig, SystemKind};
use crate::error::Result;
use crate::numcore::{ParamStore, Tensor};
use crate::synthdata::{derive_seed, gen_utterance_of_length, native_reference, ToyLanguage};

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub systems: Vec<SystemKind>,
    /// Model section shared by every arm; each arm overrides the system
    /// switches.
    pub model: Value,
    pub train: TrainConfig,
    /// Evaluation lengths as multiples of the longest training utterance.
    pub multipliers: Vec<f64>,
    /// Held-out utterances per length.
    pub n_eval: usize,
    pub eval_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ArmReport {
    pub system: SystemKind,
    pub params: usize,
    pub steps: usize,
    pub final_train_mse: Option<f64>,
    pub final_val_mse: Option<f64>,
    pub best_val_mse: Option<f64>,
    /// Keyed by multiplier label (`1x`, `1.5x`, `2x`).
    pub alignment_error: BTreeMap<String, f64>,
    pub error: Option<String>,
}

/// How one arm's parameter set differs from another's.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StructuralDiff {
    pub system: SystemKind,
    pub relative_to: SystemKind,
    /// Top-level parameter groups present only in `system`.
    pub added_groups: Vec<String>,
    pub removed_groups: Vec<String>,
    /// Shared parameters whose shapes differ.
    pub reshaped: Vec<String>,
    /// Every reshaped parameter differs on one axis, by exactly the change
    /// in memory width.
    pub reshaped_only_by_memory_width: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub version: u32,
    pub seed: u64,
    pub max_train_len: usize,
    pub multipliers: Vec<f64>,
    pub eval_lengths: Vec<usize>,
    pub arms: Vec<ArmReport>,
    pub structure: Vec<StructuralDiff>,
}

pub struct ArmOutcome {
    pub system: SystemKind,
    pub config: SystemConfig,
    pub trained: Option<TrainOutcome>,
    /// Alignment of the first evaluation utterance at each length.
    pub alignments: Vec<(String, Tensor)>,
    pub wall_clock_s: f64,
}

pub struct AblationOutcome {
    pub report: AblationReport,
    pub arms: Vec<ArmOutcome>,
}

pub fn multiplier_label(m: f64) -> String {
    format!("{m}x")
}

/// Configuration of one arm: the shared model section with the arm's
/// system switches.
pub fn arm_config(model: &Value, system: SystemKind) -> Result<SystemConfig> {
    let mut v = model.clone();
    if let Value::Object(obj) = &mut v {
        obj.insert("system".into(), Value::String(system.as_str().into()));
        if !obj.contains_key("preset") {
            let (enc, att, mel, ph) = system.switches();
            obj.insert("encoder".into(), serde_json::to_value(enc)?);
            obj.insert("attention".into(), serde_json::to_value(att)?);
            obj.insert("use_mel_ref".into(), Value::Bool(mel));
            obj.insert("use_phone_ref".into(), Value::Bool(ph));
        }
    }
    system_config_from_value(&v)
}

fn group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

/// Compares parameter names and shapes of two models.
pub fn structural_diff(
    system: SystemKind,
    a: &ParamStore,
    a_width: usize,
    relative_to: SystemKind,
    b: &ParamStore,
    b_width: usize,
) -> StructuralDiff {
    let groups = |s: &ParamStore| -> BTreeSet<String> { s.iter().map(|(_, n, _)| group(n).to_string()).collect() };
    let (ga, gb) = (groups(a), groups(b));
    let added_groups = ga.difference(&gb).cloned().collect();
    let removed_groups = gb.difference(&ga).cloned().collect();
    let mut reshaped = Vec::new();
    let mut only_width = true;
    let delta = a_width.abs_diff(b_width);
    for (_, name, ta) in a.iter() {
        let Some(idb) = b.id(name) else { continue };
        let tb = b.get(idb);
        if ta.shape() == tb.shape() {
            continue;
        }
        reshaped.push(name.to_string());
        let ok = ta.rank() == tb.rank() && {
            let diffs: Vec<usize> = ta
                .shape()
                .iter()
                .zip(tb.shape())
                .filter(|(x, y)| x != y)
                .map(|(x, y)| x.abs_diff(*y))
                .collect();
            diffs == [delta]
        };
        only_width &= ok;
    }
    StructuralDiff {
        system,
        relative_to,
        added_groups,
        removed_groups,
        reshaped,
        reshaped_only_by_memory_width: only_width,
    }
}

fn eval_sets(
    lang: &ToyLanguage,
    opts: &AblationOptions,
    max_len: usize,
    r: usize,
) -> Result<Vec<(String, usize, Vec<Example>)>> {
    opts.multipliers
        .iter()
        .enumerate()
        .map(|(mi, &m)| {
            let t = ((m * max_len as f64).round() as usize).max(1);
            let examples = (0..opts.n_eval)
                .map(|k| {
                    let seed = derive_seed(opts.eval_seed, (mi * 10_000 + k) as u64);
                    let u = gen_utterance_of_length(lang, seed, t)?;
                    let native = native_reference(lang, &u, seed)?;
                    Ok(Example::from_utterance(format!("eval{mi}_{k}"), &u, r).with_reference(&native))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((multiplier_label(m), t, examples))
        })
        .collect()
}

fn run_arm(
    system: SystemKind,
    opts: &AblationOptions,
    data: &TrainData,
    lang: &ToyLanguage,
    max_len: usize,
) -> Result<(SystemConfig, TrainOutcome, Vec<(String, f64, Tensor)>)> {
    let cfg = arm_config(&opts.model, system)?;
    let model = ConversionModel::new(cfg.clone(), opts.train.seed)?;
    let out = train(model, data, &opts.train, None)?;
    let mut metrics = Vec::new();
    for (label, _, examples) in eval_sets(lang, opts, max_len, cfg.reduction_factor)? {
        let (err, first) = evaluate_alignment(&out.best, &examples)?;
        metrics.push((label, err, first));
    }
    Ok((cfg, out, metrics))
}

/// Trains every requested arm with identical data and seed, then measures
/// validation MSE and free-running alignment error at each length
/// multiplier. A failing arm is reported with its error; the others still
/// run.
pub fn run_ablation(opts: &AblationOptions, data: &TrainData, lang: &ToyLanguage) -> Result<AblationOutcome> {
    opts.train.validate()?;
    let max_len = data.train.iter().map(Example::t_ppg).max().unwrap_or(1);
    let eval_lengths = opts
        .multipliers
        .iter()
        .map(|m| ((m * max_len as f64).round() as usize).max(1))
        .collect();
    let mut reports = Vec::new();
    let mut arms = Vec::new();
    for &system in &opts.systems {
        let t0 = Instant::now();
        let result = run_arm(system, opts, data, lang, max_len);
        let wall_clock_s = t0.elapsed().as_secs_f64();
        match result {
            Ok((config, out, metrics)) => {
                reports.push(ArmReport {
                    system,
                    params: out.best.params().num_scalars(),
                    steps: out.steps,
                    final_train_mse: out.curve.last().map(|r| r.train_mse),
                    final_val_mse: Some(out.final_val_mse),
                    best_val_mse: Some(out.best_val_mse),
                    alignment_error: metrics.iter().map(|(l, e, _)| (l.clone(), *e)).collect(),
                    error: None,
                });
                arms.push(ArmOutcome {
                    system,
                    config,
                    trained: Some(out),
                    alignments: metrics.into_iter().map(|(l, _, a)| (l, a)).collect(),
                    wall_clock_s,
                });
            }
            Err(e) => {
                let config = arm_config(&opts.model, system).ok();
                reports.push(ArmReport {
                    system,
                    params: config
                        .as_ref()
                        .map(crate::convmodel::closed_form_param_count)
                        .unwrap_or(0),
                    steps: 0,
                    final_train_mse: None,
                    final_val_mse: None,
                    best_val_mse: None,
                    alignment_error: BTreeMap::new(),
                    error: Some(e.to_string()),
                });
                if let Some(config) = config {
                    arms.push(ArmOutcome {
                        system,
                        config,
                        trained: None,
                        alignments: Vec::new(),
                        wall_clock_s,
                    });
                }
            }
        }
    }
    let mut structure = Vec::new();
    let reference = arms
        .iter()
        .find(|a| a.system == SystemKind::S1)
        .and_then(|a| a.trained.as_ref().map(|t| (a, t)));
    if let Some((s1, s1_out)) = reference {
        for arm in arms.iter().filter(|a| a.system != SystemKind::S1) {
            if let Some(out) = &arm.trained {
                structure.push(structural_diff(
                    arm.system,
                    out.best.params(),
                    arm.config.augmented_width(),
                    SystemKind::S1,
                    s1_out.best.params(),
                    s1.config.augmented_width(),
                ));
            }
        }
    }
    Ok(AblationOutcome {
        report: AblationReport {
            version: REPORT_VERSION,
            seed: opts.train.seed,
            max_train_len: max_len,
            multipliers: opts.multipliers.clone(),
            eval_lengths,
            arms: reports,
            structure,
        },
        arms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convmodel::Preset;

    #[test]
    fn labels() {
        assert_eq!(multiplier_label(1.0), "1x");
        assert_eq!(multiplier_label(1.5), "1.5x");
    }

    #[test]
    fn reference_encoders_are_the_only_new_groups() {
        let model = serde_json::json!({"preset": "micro", "system": "s1"});
        let build = |s| ConversionModel::new(arm_config(&model, s).unwrap(), 1).unwrap();
        let (s1, s3) = (build(SystemKind::S1), build(SystemKind::S3));
        let d = structural_diff(
            SystemKind::S3,
            s3.params(),
            s3.config().augmented_width(),
            SystemKind::S1,
            s1.params(),
            s1.config().augmented_width(),
        );
        assert_eq!(d.added_groups, vec!["mel_ref", "phone_ref"]);
        assert!(d.removed_groups.is_empty());
        assert!(d.reshaped_only_by_memory_width, "{d:?}");
        assert!(!d.reshaped.is_empty());
    }

    #[test]
    fn full_configs_get_arm_switches() {
        let full = serde_json::to_value(SystemConfig::preset(Preset::Micro, SystemKind::S1)).unwrap();
        let c = arm_config(&full, SystemKind::Baseline).unwrap();
        assert_eq!(c.system, SystemKind::Baseline);
        assert!(!c.use_mel_ref);
    }
}
