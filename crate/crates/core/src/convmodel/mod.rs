//! The PPG-to-mel conversion network and its ablation variants.

mod audit;
mod checkpoint;
mod config;
mod model;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use audit::{closed_form_param_count, width_audit, WidthAudit, WidthEntry};
pub use checkpoint::{
    load_checkpoint, load_config, save_checkpoint, Checkpoint, OptimizerSnapshot, CONFIG_FILE, WEIGHTS_FILE,
};
pub use config::{
    check_version, merge_json, system_config_from_json, system_config_from_value, system_config_to_json,
    unknown_keys, AttentionKind, CbhgConfig, DecoderConfig, DropoutConfig, EncoderKind, GmmConfig, LsaConfig,
    MelRefConfig, PhoneRefConfig, Preset, SystemConfig, SystemKind, Taco2Config, CONFIG_VERSION,
};
pub use model::{
    halved, interpolation_matrix, loss, loss_sums, pad_to_multiple, stop_targets, ConversionModel, DecodeMode,
    DecodeOutput, ForwardOutput, ModelInput, Mode,
};

use crate::error::Result;
use crate::numcore::gradcheck::{compare_with_fd, GradCheckOptions, GradCheckReport};
use crate::numcore::{Graph, Tensor};

/// Fixed toy inputs for end-to-end gradient checks.
pub struct GradcheckInputs {
    pub ppg: Tensor,
    pub mel: Tensor,
    pub phonemes: Vec<usize>,
}

impl GradcheckInputs {
    pub fn new(cfg: &SystemConfig, t_ppg: usize, t_mel: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ppg = Vec::with_capacity(t_ppg * cfg.ppg_dim);
        for _ in 0..t_ppg {
            let row: Vec<f64> = (0..cfg.ppg_dim).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = row.iter().sum();
            ppg.extend(row.iter().map(|x| x / s));
        }
        let mel = (0..t_mel * cfg.mel_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let phonemes = (0..3).map(|_| rng.gen_range(0..cfg.n_phonemes)).collect();
        Ok(GradcheckInputs {
            ppg: Tensor::new(vec![t_ppg, cfg.ppg_dim], ppg)?,
            mel: Tensor::new(vec![t_mel, cfg.mel_dim], mel)?,
            phonemes,
        })
    }

    pub fn input(&self) -> ModelInput<'_> {
        ModelInput {
            ppg: &self.ppg,
            ref_mel: Some(&self.mel),
            phonemes: Some(&self.phonemes),
        }
    }
}

/// Teacher-forced training loss of `model` on `inputs`, dropout off.
pub fn inference_loss(model: &ConversionModel, g: &mut Graph, inputs: &GradcheckInputs) -> Result<crate::numcore::Var> {
    let out = model.forward(g, &inputs.input(), DecodeMode::TeacherForced(&inputs.mel), &mut Mode::inference())?;
    let target = g.constant(inputs.mel.clone());
    let ts = g.constant(stop_targets(out.decode.steps));
    loss(g, &out.decode, target, ts, model.config().stop_token)
}

/// Standard deviation of the jitter added before an end-to-end check.
pub const GRADCHECK_JITTER: f64 = 0.05;

/// End-to-end finite-difference check of every parameter tensor of
/// `model`. Coordinates are sampled per tensor when
/// `opts.max_coords_per_input` is set.
///
/// The check runs on a copy whose parameters carry a small seeded jitter:
/// zero-initialised biases fed by the all-zero first decoder frame would
/// otherwise sit exactly on a ReLU kink, where central differences and the
/// subgradient legitimately disagree.
pub fn model_gradcheck(model: &ConversionModel, inputs: &GradcheckInputs, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x6a17);
    let mut jittered = model.clone();
    for t in jittered.params_mut().values_mut() {
        *t = t.map(|x| x + GRADCHECK_JITTER * (rng.gen::<f64>() * 2.0 - 1.0));
    }
    let model = &jittered;
    let mut g = Graph::new();
    let l = inference_loss(model, &mut g, inputs)?;
    g.backward(l)?;
    let mut analytic: Vec<Tensor> = model.params().values().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad;
    }
    let mut values = model.params().values().to_vec();
    let mut probe = model.clone();
    compare_with_fd(
        &mut values,
        &analytic,
        |vals| {
            probe.params_mut().values_mut().clone_from_slice(vals);
            let mut g = Graph::new();
            let l = inference_loss(&probe, &mut g, inputs)?;
            Ok(g.value(l).item())
        },
        opts,
    )
}

/// Result of a free-running conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Conversion {
    /// `[steps·r × mel_dim]`, PostNet applied.
    pub mel: Tensor,
    pub mel_before: Tensor,
    /// `[steps × T_ppg]`
    pub alignment: Tensor,
    /// Stop probability per decoder step.
    pub stop: Tensor,
    pub steps: usize,
}

/// Free-running conversion of one PPG sequence with dropout off.
///
/// A reference input must be given exactly when the configuration enables
/// the matching encoder. `max_steps` defaults to twice the decoder steps
/// implied by the PPG length.
pub fn convert_ppg(
    model: &ConversionModel,
    ppg: &Tensor,
    ref_mel: Option<&Tensor>,
    phonemes: Option<&[usize]>,
    max_steps: Option<usize>,
) -> Result<Conversion> {
    let cfg = model.config();
    if ppg.rank() != 2 || ppg.rows() == 0 || ppg.cols() != cfg.ppg_dim {
        return Err(crate::Error::dim(format!(
            "PPG of shape {:?} does not match the model's ppg_dim {}",
            ppg.shape(),
            cfg.ppg_dim
        )));
    }
    if ref_mel.is_some() && !cfg.use_mel_ref {
        return Err(crate::Error::Usage(
            "a reference mel was given, but the configuration has use_mel_ref = false".into(),
        ));
    }
    if phonemes.is_some() && !cfg.use_phone_ref {
        return Err(crate::Error::Usage(
            "phonemes were given, but the configuration has use_phone_ref = false".into(),
        ));
    }
    let max_steps = max_steps.unwrap_or_else(|| 2 * (3 * ppg.rows()).div_ceil(cfg.reduction_factor));
    if max_steps == 0 {
        return Err(crate::Error::Usage("max_steps must be at least 1".into()));
    }
    let input = ModelInput { ppg, ref_mel, phonemes };
    let mut g = Graph::new();
    let out = model.forward(
        &mut g,
        &input,
        DecodeMode::FreeRunning {
            max_steps,
            use_stop: cfg.stop_token,
        },
        &mut Mode::inference(),
    )?;
    let dec = out.decode;
    let mel = g.value(dec.mel_after).clone();
    let alignment = g.value(dec.alignment).clone();
    if !mel.is_finite() || !alignment.is_finite() {
        return Err(crate::Error::Numeric {
            step: dec.steps,
            what: "non-finite converted output".into(),
        });
    }
    Ok(Conversion {
        mel,
        mel_before: g.value(dec.mel_before).clone(),
        alignment,
        stop: g.value(dec.stop_logits).map(crate::numcore::sigmoid),
        steps: dec.steps,
    })
}
