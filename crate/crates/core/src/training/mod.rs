//! Optimisation: Adam, the teacher-forced training loop, fine-tuning and
//! evaluation helpers.
//!
//! A batch is a list of utterances of different lengths. Each utterance is
//! run on its own graph and the gradients are summed in batch order. The
//! loss is normalised by the total number of frames (and decoder steps) in
//! the batch, which is exactly the value a padded batch with a length mask
//! would produce, without computing anything for padding.

mod ablation;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ablation::{
    arm_config, multiplier_label, run_ablation, structural_diff, AblationOptions, AblationOutcome, AblationReport,
    ArmOutcome, ArmReport, StructuralDiff, REPORT_VERSION,
};

use crate::attention::alignment_error;
use crate::convmodel::{loss_sums, stop_targets, ConversionModel, DecodeMode, ModelInput, Mode, OptimizerSnapshot};
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;
use crate::numcore::{Graph, Tensor};
use crate::synthdata::{derive_seed, Utterance};

/// Learning-rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` steps.
    Step { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, step: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::Step { every, factor } => base * factor.powi((step / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Utterances per step. Production runs used 64; 8 suits a desk machine.
    pub batch_size: usize,
    pub max_steps: usize,
    /// Steps used by fine-tuning runs.
    pub finetune_steps: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    /// Share of the corpus held out for validation (taken from the end).
    pub val_fraction: f64,
    /// Validate every this many steps (and after the last one).
    pub val_every: usize,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 8,
            max_steps: 2000,
            finetune_steps: 1000,
            seed: 1,
            grad_clip_norm: 1.0,
            val_fraction: 0.1,
            val_every: 100,
            lr_schedule: LrSchedule::Constant,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            bad.push("train.lr must be > 0".to_string());
        }
        if self.batch_size == 0 {
            bad.push("train.batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            bad.push("train.val_fraction must lie in [0, 1)".into());
        }
        if self.val_every == 0 {
            bad.push("train.val_every must be ≥ 1".into());
        }
        if !(self.grad_clip_norm > 0.0) {
            bad.push("train.grad_clip_norm must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            bad.push("train.beta1/beta2 must lie in [0, 1) and eps must be > 0".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(bad))
        }
    }

    pub fn adam(&self, step: usize) -> AdamConfig {
        AdamConfig {
            lr: self.lr_schedule.rate(self.lr, step),
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape().to_vec());
        AdamState {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        }
    }

    pub fn snapshot(&self) -> OptimizerSnapshot {
        OptimizerSnapshot {
            m: self.m.clone(),
            v: self.v.clone(),
            step: self.t,
        }
    }

    pub fn from_snapshot(s: OptimizerSnapshot) -> Self {
        AdamState {
            m: s.m,
            v: s.v,
            t: s.step,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::dim(format!(
            "adam: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "adam: parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    state.t += 1;
    let c1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let c2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, &gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, &gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *pj -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One training or evaluation utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub ppg: Tensor,
    /// Target mel `[T_mel × 80]`.
    pub mel: Tensor,
    /// Reference mel for the mel reference encoder.
    pub ref_mel: Tensor,
    pub phonemes: Vec<usize>,
    /// Expected encoder position per decoder step, for alignment metrics.
    pub oracle: Vec<f64>,
}

impl Example {
    /// Training form: the reference mel is the target itself.
    pub fn from_utterance(id: impl Into<String>, u: &Utterance, r: usize) -> Example {
        Example {
            id: id.into(),
            ppg: u.ppg.clone(),
            mel: u.mel.frames().clone(),
            ref_mel: u.mel.frames().clone(),
            phonemes: u.phonemes.clone(),
            oracle: u.attention_oracle(r),
        }
    }

    /// Inference form: the reference mel is a native rendering.
    pub fn with_reference(mut self, native: &MelSpectrogram) -> Example {
        self.ref_mel = native.frames().clone();
        self
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            ppg: &self.ppg,
            ref_mel: Some(&self.ref_mel),
            phonemes: Some(&self.phonemes),
        }
    }

    pub fn t_ppg(&self) -> usize {
        self.ppg.rows()
    }
}

/// Training and validation split.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

impl TrainData {
    /// Holds out the last `floor(n·val_fraction)` examples. When that is 0,
    /// validation reuses the training set.
    pub fn split(mut all: Vec<Example>, val_fraction: f64) -> Result<TrainData> {
        if all.is_empty() {
            return Err(Error::contract("training corpus is empty"));
        }
        let n_val = ((all.len() as f64) * val_fraction).floor() as usize;
        if n_val == 0 || n_val >= all.len() {
            let val = all.clone();
            return Ok(TrainData { train: all, val });
        }
        let val = all.split_off(all.len() - n_val);
        Ok(TrainData { train: all, val })
    }
}

/// Training example indices of the batch at `step`. Each epoch visits every
/// example once in an order seeded by `(seed, epoch)`, so the batch depends
/// only on the step number.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut cached: Option<(usize, Vec<usize>)> = None;
    (0..batch_size)
        .map(|j| {
            let pos = step * batch_size + j;
            let epoch = pos / n;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x5eed_ba7c, epoch as u64));
                perm.shuffle(&mut rng);
                cached = Some((epoch, perm));
            }
            cached.as_ref().unwrap().1[pos % n]
        })
        .collect()
}

/// Result of one optimisation step before the update is applied.
#[derive(Clone, Debug)]
pub struct BatchResult {
    pub loss: f64,
    /// Frame-weighted mel_after MSE of the batch.
    pub mel_mse: f64,
    pub grads: Vec<Tensor>,
}

/// Loss and summed gradients of a batch under teacher forcing.
pub fn batch_gradients(model: &ConversionModel, batch: &[&Example], dropout_seed: Option<u64>) -> Result<BatchResult> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let cfg = model.config();
    let r = cfg.reduction_factor;
    let frames: usize = batch.iter().map(|e| e.mel.rows()).sum();
    let steps: usize = batch.iter().map(|e| e.mel.rows().div_ceil(r)).sum();
    let mel_norm = 1.0 / (frames * cfg.mel_dim) as f64;
    let stop_norm = 1.0 / steps as f64;
    let mut grads: Vec<Tensor> = model
        .params()
        .values()
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut total = 0.0;
    let mut sse_after = 0.0;
    for (j, ex) in batch.iter().enumerate() {
        let mut mode = match dropout_seed {
            Some(s) => Mode::training(derive_seed(s, j as u64)),
            None => Mode::inference(),
        };
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex.input(), DecodeMode::TeacherForced(&ex.mel), &mut mode)?;
        let target = g.constant(ex.mel.clone());
        let ts = g.constant(stop_targets(out.decode.steps));
        let (b, a, s) = loss_sums(&mut g, &out.decode, target, ts)?;
        let mse = g.add(b, a)?;
        let mut l = g.scale(mse, mel_norm);
        if cfg.stop_token {
            let s = g.scale(s, stop_norm);
            l = g.add(l, s)?;
        }
        let lv = g.value(l).item();
        if !lv.is_finite() {
            return Err(Error::Numeric {
                step: out.decode.steps,
                what: format!("non-finite loss on utterance {}", ex.id),
            });
        }
        total += lv;
        sse_after += g.value(a).item();
        g.backward(l)?;
        for (id, gr) in g.param_grads() {
            let dst = grads[id.index()].data_mut();
            for (d, x) in dst.iter_mut().zip(gr.data()) {
                *d += x;
            }
        }
    }
    Ok(BatchResult {
        loss: total,
        mel_mse: sse_after * mel_norm,
        grads,
    })
}

/// Frame-weighted teacher-forced mel_after MSE with dropout off.
pub fn evaluate_mse(model: &ConversionModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::contract("no evaluation examples"));
    }
    let mut sse = 0.0;
    let mut n = 0usize;
    for ex in examples {
        let mut g = Graph::new();
        let out = model.forward(&mut g, &ex.input(), DecodeMode::TeacherForced(&ex.mel), &mut Mode::inference())?;
        let pred = g.value(out.decode.mel_after);
        sse += pred.data().iter().zip(ex.mel.data()).map(|(p, t)| (p - t) * (p - t)).sum::<f64>();
        n += ex.mel.len();
    }
    Ok(sse / n as f64)
}

/// Free-running alignment of one example for exactly as many decoder steps
/// as its oracle has, ignoring the stop head.
pub fn free_running_alignment(model: &ConversionModel, ex: &Example) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &ex.input(),
        DecodeMode::FreeRunning {
            max_steps: ex.oracle.len(),
            use_stop: false,
        },
        &mut Mode::inference(),
    )?;
    Ok((g.value(out.decode.alignment).clone(), g.value(out.decode.mel_after).clone()))
}

/// Mean alignment error over `examples`, plus the alignment of the first.
pub fn evaluate_alignment(model: &ConversionModel, examples: &[Example]) -> Result<(f64, Tensor)> {
    let mut total = 0.0;
    let mut first = None;
    for ex in examples {
        let (a, mel) = free_running_alignment(model, ex)?;
        if !mel.is_finite() || !a.is_finite() {
            return Err(Error::Numeric {
                step: ex.oracle.len(),
                what: format!("non-finite free-running output on {}", ex.id),
            });
        }
        total += alignment_error(&a, &ex.oracle)?;
        first.get_or_insert(a);
    }
    let first = first.ok_or_else(|| Error::contract("no evaluation examples"))?;
    Ok((total / examples.len() as f64, first))
}

/// One row of the loss curve. `val_mse` is present on validation steps.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub train_mse: f64,
    pub loss: f64,
    pub val_mse: Option<f64>,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut s = String::from("step,train_mse,val_mse\n");
    for r in records {
        let val = r.val_mse.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{}", r.step, r.train_mse, val).unwrap();
    }
    s
}

pub struct TrainOutcome {
    /// Parameters after the last step.
    pub last: ConversionModel,
    /// Parameters with the lowest validation MSE seen (step 0 included).
    pub best: ConversionModel,
    pub best_val_mse: f64,
    pub best_step: usize,
    pub final_val_mse: f64,
    pub curve: Vec<LossRecord>,
    pub optimizer: OptimizerSnapshot,
    /// Total optimizer steps taken, counting those before a resume.
    pub steps: usize,
}

/// Trains `model` for `cfg.max_steps` total steps. With `resume`, training
/// continues from the snapshot's step count and moments; batches and
/// dropout masks depend only on `(cfg.seed, step)`, so a resumed run
/// retraces the uninterrupted one exactly.
pub fn train(
    model: ConversionModel,
    data: &TrainData,
    cfg: &TrainConfig,
    resume: Option<OptimizerSnapshot>,
) -> Result<TrainOutcome> {
    train_steps(model, data, cfg, resume, cfg.max_steps)
}

/// Continues training from a checkpoint on a new corpus for
/// `cfg.finetune_steps` steps with a fresh optimizer state.
pub fn finetune(model: ConversionModel, data: &TrainData, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_steps(model, data, cfg, None, cfg.finetune_steps)
}

fn train_steps(
    mut model: ConversionModel,
    data: &TrainData,
    cfg: &TrainConfig,
    resume: Option<OptimizerSnapshot>,
    total_steps: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract("training needs at least one training and one validation example"));
    }
    let mut adam = match resume {
        Some(s) => {
            if s.m.len() != model.params().len() {
                return Err(Error::Load("optimizer state does not match the model".into()));
            }
            AdamState::from_snapshot(s)
        }
        None => AdamState::new(model.params().values()),
    };
    let start = adam.t as usize;
    let mut curve = Vec::new();
    let mut best = model.clone();
    let mut best_val = evaluate_mse(&model, &data.val)?;
    let mut best_step = start;
    let mut last_val = best_val;
    let dropout_stream = derive_seed(cfg.seed, 0xd50f);
    for step in start..total_steps {
        let idx = batch_indices(data.train.len(), cfg.batch_size, cfg.seed, step);
        let batch: Vec<&Example> = idx.iter().map(|&i| &data.train[i]).collect();
        let batch_no = step % data.train.len().div_ceil(cfg.batch_size);
        let ids = || batch.iter().map(|e| e.id.as_str()).collect::<Vec<_>>().join(",");
        let mut res = match batch_gradients(&model, &batch, Some(derive_seed(dropout_stream, step as u64))) {
            Ok(r) => r,
            Err(Error::Numeric { what, .. }) => {
                return Err(Error::Diverged {
                    step,
                    batch: batch_no,
                    what: format!("{what} [{}]", ids()),
                })
            }
            Err(e) => return Err(e),
        };
        let norm = clip_global_norm(&mut res.grads, cfg.grad_clip_norm);
        if !res.loss.is_finite() || !norm.is_finite() {
            return Err(Error::Diverged {
                step,
                batch: batch_no,
                what: format!("loss {} gradient norm {norm} [{}]", res.loss, ids()),
            });
        }
        adam_step(model.params_mut().values_mut(), &res.grads, &mut adam, &cfg.adam(step))?;
        let done = step + 1;
        let val_mse = if done % cfg.val_every == 0 || done == total_steps {
            let v = evaluate_mse(&model, &data.val)?;
            if !v.is_finite() {
                return Err(Error::Diverged {
                    step,
                    batch: batch_no,
                    what: format!("validation MSE {v}"),
                });
            }
            if v < best_val {
                best_val = v;
                best = model.clone();
                best_step = done;
            }
            last_val = v;
            Some(v)
        } else {
            None
        };
        curve.push(LossRecord {
            step: done,
            train_mse: res.mel_mse,
            loss: res.loss,
            val_mse,
        });
    }
    Ok(TrainOutcome {
        optimizer: adam.snapshot(),
        steps: total_steps.max(start),
        last: model,
        best,
        best_val_mse: best_val,
        best_step,
        final_val_mse: last_val,
        curve,
    })
}
