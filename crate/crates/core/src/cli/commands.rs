use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::runconfig::RunConfig;
use super::{AblateArgs, ConvertArgs, FinetuneArgs, GenArgs, GradcheckArgs, RunInfo, ScaleArg, SpeakerArg, TrainArgs};
use crate::attention::{write_alignment_csv, write_alignment_pgm};
use crate::convmodel::{
    convert_ppg, load_checkpoint, model_gradcheck, save_checkpoint, ConversionModel, GradcheckInputs, Preset,
    SystemConfig, SystemKind,
};
use crate::error::{Error, Result};
use crate::numcore::gradcheck::GradCheckOptions;
use crate::numcore::suite::{primitive_suite, ComponentResult, SuiteOptions, SuiteScale};
use crate::numcore::io;
use crate::synthdata::{
    derive_seed, gen_corpus, load_corpus, native_reference, parse_phonemes, save_corpus, speaker_language,
    CorpusManifest, Speaker,
};
use crate::training::{
    finetune as finetune_model, loss_curve_csv, run_ablation, train as train_model, AblationOptions, Example,
    TrainData, TrainOutcome,
};

/// Relative-error threshold of the end-to-end model check.
pub const MODEL_TOL: f64 = 1e-4;

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(v)? + "\n")
}

pub(super) fn gen(a: &GenArgs, info: &mut RunInfo) -> Result<()> {
    info.seed = Some(a.seed);
    if a.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    if a.min_phones == 0 || a.min_phones > a.max_phones {
        return Err(Error::Usage("need 1 ≤ --min-phones ≤ --max-phones".into()));
    }
    let speaker = match a.speaker {
        SpeakerArg::A => Speaker::A,
        SpeakerArg::B => Speaker::B,
    };
    let lang = speaker_language(a.language_seed, speaker);
    let native = speaker_language(a.language_seed, Speaker::A);
    let utts = gen_corpus(&lang, a.n, a.seed, a.min_phones..=a.max_phones)?;
    let refs = utts
        .iter()
        .enumerate()
        .map(|(i, u)| native_reference(&native, u, derive_seed(a.seed ^ 0x4e47, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    let m = save_corpus(
        &a.out.out,
        &utts,
        Some(&refs),
        (a.language_seed, speaker, a.seed, lang.n_phonemes, lang.ppg_dim),
    )?;
    println!("wrote {} utterances to {}", m.utterances.len(), a.out.out.display());
    Ok(())
}

/// Corpus utterances as training examples, checked against `cfg`.
fn load_examples(dir: &Path, cfg: &SystemConfig) -> Result<(CorpusManifest, Vec<Example>)> {
    let (manifest, utts) = load_corpus(dir)?;
    if manifest.ppg_dim != cfg.ppg_dim || manifest.n_phonemes > cfg.n_phonemes {
        return Err(Error::format(format!(
            "corpus has ppg_dim {} and {} phonemes; the model expects ppg_dim {} and at most {}",
            manifest.ppg_dim, manifest.n_phonemes, cfg.ppg_dim, cfg.n_phonemes
        )));
    }
    let examples = manifest
        .utterances
        .iter()
        .zip(&utts)
        .map(|(e, (u, _))| Example::from_utterance(e.id.clone(), u, cfg.reduction_factor))
        .collect();
    Ok((manifest, examples))
}

fn load_run_config(path: Option<&Path>, info: &mut RunInfo) -> Result<RunConfig> {
    info.config_path = path.map(Path::to_path_buf);
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::defaults()?,
    };
    info.seed = Some(cfg.train.seed);
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainMetrics {
    system: SystemKind,
    params: usize,
    steps: usize,
    best_step: usize,
    best_val_mse: f64,
    final_val_mse: f64,
    final_train_mse: Option<f64>,
    n_train: usize,
    n_val: usize,
}

/// Writes the best checkpoint, the last one with optimizer state, the loss
/// curve and summary metrics.
fn write_training_outputs(out: &Path, outcome: &TrainOutcome, data: &TrainData, run: &serde_json::Value) -> Result<()> {
    save_checkpoint(&out.join("checkpoint"), &outcome.best, None)?;
    save_checkpoint(&out.join("last"), &outcome.last, Some(&outcome.optimizer))?;
    write(&out.join("loss_curve.csv"), loss_curve_csv(&outcome.curve))?;
    write_json(&out.join("config.json"), run)?;
    let metrics = TrainMetrics {
        system: outcome.best.config().system,
        params: outcome.best.params().num_scalars(),
        steps: outcome.steps,
        best_step: outcome.best_step,
        best_val_mse: outcome.best_val_mse,
        final_val_mse: outcome.final_val_mse,
        final_train_mse: outcome.curve.last().map(|r| r.train_mse),
        n_train: data.train.len(),
        n_val: data.val.len(),
    };
    write_json(&out.join("metrics.json"), &metrics)?;
    println!(
        "{} steps; best val MSE {:.5} at step {}; final val MSE {:.5}",
        outcome.steps, outcome.best_val_mse, outcome.best_step, outcome.final_val_mse
    );
    Ok(())
}

pub(super) fn train(a: &TrainArgs, info: &mut RunInfo) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), info)?;
    let (_, examples) = load_examples(&a.corpus, &cfg.model)?;
    let data = TrainData::split(examples, cfg.train.val_fraction)?;
    let (model, resume) = match &a.resume {
        Some(dir) => {
            let ck = load_checkpoint(dir, Some(&cfg.model))?;
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Load(format!("{} has no optimizer state to resume from", dir.display())))?;
            (ck.model, Some(opt))
        }
        None => (ConversionModel::new(cfg.model.clone(), cfg.train.seed)?, None),
    };
    let outcome = train_model(model, &data, &cfg.train, resume)?;
    write_training_outputs(&a.out.out, &outcome, &data, &cfg.to_value())
}

pub(super) fn finetune(a: &FinetuneArgs, info: &mut RunInfo) -> Result<()> {
    let cfg = load_run_config(a.config.as_deref(), info)?;
    let explicit_model = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: serde_json::Value = serde_json::from_str(&text)?;
            v.get("model").is_some()
        }
        None => false,
    };
    let ck = load_checkpoint(&a.from, explicit_model.then_some(&cfg.model))?;
    let model = ck.model;
    let (_, examples) = load_examples(&a.corpus, model.config())?;
    let data = TrainData::split(examples, cfg.train.val_fraction)?;
    let mut run = cfg.to_value();
    run["model"] = serde_json::to_value(model.config())?;
    let outcome = finetune_model(model, &data, &cfg.train)?;
    write_training_outputs(&a.out.out, &outcome, &data, &run)
}

pub(super) fn convert(a: &ConvertArgs, _info: &mut RunInfo) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint, None)?.model;
    let ppg = io::load_tensor(&a.ppg)?;
    let ref_mel = a.ref_mel.as_ref().map(io::load_tensor).transpose()?;
    let phonemes = a.phones.as_deref().map(parse_phonemes).transpose()?;
    let c = convert_ppg(&model, &ppg, ref_mel.as_ref(), phonemes.as_deref(), a.max_steps)?;
    let dir = &a.out.out;
    io::save_tensor(dir.join("mel.tnsr"), &c.mel)?;
    io::save_tensor(dir.join("mel_before.tnsr"), &c.mel_before)?;
    io::save_tensor(dir.join("alignment.tnsr"), &c.alignment)?;
    write_alignment_csv(dir.join("alignment.csv"), &c.alignment)?;
    write_alignment_pgm(dir.join("alignment.pgm"), &c.alignment)?;
    io::save_tensor(dir.join("stop.tnsr"), &c.stop)?;
    let mut csv = String::from("step,stop_probability\n");
    for (i, p) in c.stop.data().iter().enumerate() {
        csv.push_str(&format!("{i},{p:e}\n"));
    }
    write(&dir.join("stop.csv"), csv)?;
    println!(
        "{} decoder steps, {} mel frames, alignment {}x{}",
        c.steps,
        c.mel.rows(),
        c.alignment.rows(),
        c.alignment.cols()
    );
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    component: String,
    coords: usize,
    max_rel_err: f64,
    max_abs_err: f64,
    tol: f64,
    pass: bool,
}

/// The end-to-end model checks run by `gradcheck` at `scale`.
pub fn model_checks(scale: ScaleArg, seed: u64) -> Result<Vec<ComponentResult>> {
    let (systems, coords): (&[SystemKind], usize) = match scale {
        ScaleArg::Micro => (&[SystemKind::S3], 3),
        ScaleArg::Small => (&SystemKind::ALL, 6),
    };
    let mut out = Vec::new();
    for &system in systems {
        let cfg = SystemConfig::preset(Preset::Micro, system);
        let model = ConversionModel::new(cfg.clone(), seed)?;
        let inputs = GradcheckInputs::new(&cfg, 5, 12, seed ^ 0x77)?;
        let opts = GradCheckOptions {
            max_coords_per_input: Some(coords),
            seed,
            ..Default::default()
        };
        out.push(ComponentResult {
            name: format!("model_{}", system.as_str()),
            report: model_gradcheck(&model, &inputs, &opts)?,
            tol: MODEL_TOL,
        });
    }
    Ok(out)
}

pub(super) fn gradcheck(a: &GradcheckArgs, info: &mut RunInfo) -> Result<()> {
    info.seed = Some(a.seed);
    let scale = match a.scale {
        ScaleArg::Micro => SuiteScale::Micro,
        ScaleArg::Small => SuiteScale::Small,
    };
    let mut results = primitive_suite(&SuiteOptions {
        scale,
        seed: a.seed,
        inject_fault: a.inject_fault,
    })?;
    results.extend(model_checks(a.scale, a.seed)?);
    println!("{:<24} {:>7} {:>12} {:>8}  result", "component", "coords", "max rel err", "tol");
    let mut rows = Vec::new();
    for r in &results {
        println!(
            "{:<24} {:>7} {:>12.3e} {:>8.0e}  {}",
            r.name,
            r.report.coords_checked,
            r.report.max_rel_err,
            r.tol,
            if r.passes() { "PASS" } else { "FAIL" }
        );
        rows.push(GradcheckRow {
            component: r.name.clone(),
            coords: r.report.coords_checked,
            max_rel_err: r.report.max_rel_err,
            max_abs_err: r.report.max_abs_err,
            tol: r.tol,
            pass: r.passes(),
        });
    }
    if let Some(dir) = &a.out {
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passes()).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradientCheck(failed))
    }
}

pub fn parse_systems(s: &str) -> Result<Vec<SystemKind>> {
    let mut out: Vec<SystemKind> = Vec::new();
    for name in s.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let k: SystemKind = name.parse()?;
        if !out.contains(&k) {
            out.push(k);
        }
    }
    if out.is_empty() {
        return Err(Error::Usage("--systems names no system".into()));
    }
    Ok(out)
}

pub(super) fn ablate(a: &AblateArgs, info: &mut RunInfo) -> Result<()> {
    let systems = a.systems.as_deref().map(parse_systems).transpose()?;
    let cfg = load_run_config(a.config.as_deref(), info)?;
    let systems = systems.unwrap_or_else(|| cfg.ablation.systems.clone());
    let (manifest, examples) = load_examples(&a.corpus, &cfg.model)?;
    let data = TrainData::split(examples, cfg.train.val_fraction)?;
    let lang = speaker_language(manifest.language_seed, manifest.speaker);
    let opts = AblationOptions {
        systems,
        model: cfg.model_value.clone(),
        train: cfg.train.clone(),
        multipliers: cfg.ablation.multipliers.clone(),
        n_eval: cfg.ablation.n_eval,
        eval_seed: cfg.ablation.eval_seed,
    };
    let outcome = run_ablation(&opts, &data, &lang)?;
    let dir = &a.out.out;
    write_json(&dir.join("report.json"), &outcome.report)?;
    write_json(&dir.join("config.json"), &cfg.to_value())?;
    let mut timing = BTreeMap::new();
    for arm in &outcome.arms {
        timing.insert(arm.system.as_str(), arm.wall_clock_s);
        let arm_dir = dir.join("arms").join(arm.system.as_str());
        fs::create_dir_all(&arm_dir).map_err(|e| Error::io(&arm_dir, e))?;
        if let Some(t) = &arm.trained {
            save_checkpoint(&arm_dir.join("checkpoint"), &t.best, None)?;
            write(&arm_dir.join("loss_curve.csv"), loss_curve_csv(&t.curve))?;
        }
        for (label, m) in &arm.alignments {
            write_alignment_pgm(arm_dir.join(format!("alignment_{label}.pgm")), m)?;
            write_alignment_csv(arm_dir.join(format!("alignment_{label}.csv")), m)?;
            io::save_tensor(arm_dir.join(format!("alignment_{label}.tnsr")), m)?;
        }
    }
    write_json(&dir.join("timing.json"), &timing)?;
    for r in &outcome.report.arms {
        match &r.error {
            None => println!(
                "{:<8} params {:>8}  best val MSE {:.5}  alignment error {}",
                r.system.as_str(),
                r.params,
                r.best_val_mse.unwrap_or(f64::NAN),
                r.alignment_error
                    .iter()
                    .map(|(k, v)| format!("{k}={v:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            ),
            Some(e) => eprintln!("{:<8} failed: {e}", r.system.as_str()),
        }
    }
    let failed: Vec<&str> = outcome
        .report
        .arms
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.system.as_str())
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::ArmsFailed(failed.iter().map(|s| s.to_string()).collect()))
    }
}
