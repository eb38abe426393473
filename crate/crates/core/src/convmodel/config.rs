//! Model configuration, presets and strict JSON loading.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attention::SigmaForm;
use crate::error::{Error, Result};
use crate::features::MEL_DIM;
use crate::synthdata::{DEFAULT_PHONEMES, PPG_DIM, RATE};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Cbhg,
    Taco2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Gmm,
    LsaWindowed,
}

/// The four ablation arms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemKind {
    Baseline,
    S1,
    S2,
    S3,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [SystemKind::Baseline, SystemKind::S1, SystemKind::S2, SystemKind::S3];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Baseline => "baseline",
            SystemKind::S1 => "s1",
            SystemKind::S2 => "s2",
            SystemKind::S3 => "s3",
        }
    }

    /// `(encoder, attention, mel reference, phoneme reference)`
    pub fn switches(self) -> (EncoderKind, AttentionKind, bool, bool) {
        match self {
            SystemKind::Baseline => (EncoderKind::Taco2, AttentionKind::LsaWindowed, false, false),
            SystemKind::S1 => (EncoderKind::Cbhg, AttentionKind::Gmm, false, false),
            SystemKind::S2 => (EncoderKind::Cbhg, AttentionKind::Gmm, true, false),
            SystemKind::S3 => (EncoderKind::Cbhg, AttentionKind::Gmm, true, true),
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(SystemKind::Baseline),
            "s1" | "system1" => Ok(SystemKind::S1),
            "s2" | "system2" => Ok(SystemKind::S2),
            "s3" | "system3" => Ok(SystemKind::S3),
            other => Err(Error::Usage(format!(
                "unknown system {other:?} (expected baseline, s1, s2 or s3)"
            ))),
        }
    }
}

/// Width presets. `full` carries the original layer sizes; `desk` and
/// `micro` shrink them so training fits a single CPU core.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Full,
    Desk,
    Micro,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "desk" => Ok(Preset::Desk),
            "micro" => Ok(Preset::Micro),
            other => Err(Error::Usage(format!(
                "unknown preset {other:?} (expected full, desk or micro)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CbhgConfig {
    /// Conv bank holds kernels of width 1..=bank_k.
    pub bank_k: usize,
    pub bank_channels: usize,
    pub pool_width: usize,
    pub proj_channels: usize,
    pub proj_kernel: usize,
    pub highway_layers: usize,
    /// GRU units per direction; the encoder emits `2·gru`.
    pub gru: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Taco2Config {
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    /// LSTM units per direction; the encoder emits `2·lstm`.
    pub lstm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MelRefConfig {
    /// Output channels of each 3×3 conv. All but the last stride (1,2);
    /// the last strides (3,2).
    pub channels: Vec<usize>,
    /// GRU units per direction; directions are summed, so this is also the
    /// embedding width.
    pub gru: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhoneRefConfig {
    pub embedding: usize,
    /// Output channels of each 3×3 stride-(1,2) conv.
    pub channels: Vec<usize>,
    pub gru: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub prenet: Vec<usize>,
    pub attention_lstm: usize,
    pub decoder_lstm: usize,
    pub postnet_layers: usize,
    pub postnet_channels: usize,
    pub postnet_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmConfig {
    pub components: usize,
    pub hidden: usize,
    pub sigma_form: SigmaForm,
    pub renormalize: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsaConfig {
    pub window: usize,
    pub attention_dim: usize,
    pub location_filters: usize,
    pub location_kernel: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutConfig {
    pub prenet: f64,
    pub lstm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub system: SystemKind,
    pub encoder: EncoderKind,
    pub attention: AttentionKind,
    pub use_mel_ref: bool,
    pub use_phone_ref: bool,
    pub reduction_factor: usize,
    pub stop_token: bool,
    pub ppg_dim: usize,
    pub mel_dim: usize,
    pub n_phonemes: usize,
    /// Mel frames per PPG frame; sets the LSA window drift per decoder step.
    pub ppg_frame_ratio: usize,
    pub ppg_prenet: Vec<usize>,
    pub cbhg: CbhgConfig,
    pub taco2: Taco2Config,
    pub mel_ref: MelRefConfig,
    pub phone_ref: PhoneRefConfig,
    pub decoder: DecoderConfig,
    pub gmm: GmmConfig,
    pub lsa: LsaConfig,
    pub dropout: DropoutConfig,
}

impl SystemConfig {
    pub fn preset(preset: Preset, system: SystemKind) -> SystemConfig {
        let (encoder, attention, use_mel_ref, use_phone_ref) = system.switches();
        let mut c = SystemConfig {
            system,
            encoder,
            attention,
            use_mel_ref,
            use_phone_ref,
            reduction_factor: 2,
            stop_token: true,
            ppg_dim: PPG_DIM,
            mel_dim: MEL_DIM,
            n_phonemes: DEFAULT_PHONEMES,
            ppg_frame_ratio: RATE,
            ppg_prenet: vec![128, 128],
            cbhg: CbhgConfig {
                bank_k: 16,
                bank_channels: 128,
                pool_width: 2,
                proj_channels: 128,
                proj_kernel: 3,
                highway_layers: 4,
                gru: 128,
            },
            taco2: Taco2Config {
                conv_layers: 3,
                conv_channels: 256,
                conv_kernel: 5,
                lstm: 128,
            },
            mel_ref: MelRefConfig {
                channels: vec![32, 32, 64, 64, 128, 128],
                gru: 4,
            },
            phone_ref: PhoneRefConfig {
                embedding: 128,
                channels: vec![32, 32, 64, 64, 128, 128],
                gru: 128,
            },
            decoder: DecoderConfig {
                prenet: vec![300, 300],
                attention_lstm: 300,
                decoder_lstm: 300,
                postnet_layers: 5,
                postnet_channels: 512,
                postnet_kernel: 5,
            },
            gmm: GmmConfig {
                components: 10,
                hidden: 128,
                sigma_form: SigmaForm::Revised,
                renormalize: false,
            },
            lsa: LsaConfig {
                window: 20,
                attention_dim: 128,
                location_filters: 32,
                location_kernel: 31,
            },
            dropout: DropoutConfig {
                prenet: 0.5,
                lstm: 0.1,
            },
        };
        match preset {
            Preset::Full => {}
            Preset::Desk => {
                c.ppg_prenet = vec![64, 64];
                c.cbhg = CbhgConfig {
                    bank_k: 8,
                    bank_channels: 32,
                    pool_width: 2,
                    proj_channels: 64,
                    proj_kernel: 3,
                    highway_layers: 4,
                    gru: 64,
                };
                c.taco2 = Taco2Config {
                    conv_layers: 3,
                    conv_channels: 64,
                    conv_kernel: 5,
                    lstm: 64,
                };
                c.mel_ref.channels = vec![4, 4, 8, 8, 16, 16];
                c.phone_ref = PhoneRefConfig {
                    embedding: 32,
                    channels: vec![4, 4, 8, 8, 16, 16],
                    gru: 32,
                };
                c.decoder = DecoderConfig {
                    prenet: vec![64, 64],
                    attention_lstm: 96,
                    decoder_lstm: 96,
                    postnet_layers: 5,
                    postnet_channels: 64,
                    postnet_kernel: 5,
                };
                c.gmm.hidden = 64;
                c.lsa.attention_dim = 64;
                c.lsa.location_filters = 16;
            }
            Preset::Micro => {
                c.ppg_prenet = vec![8, 8];
                c.cbhg = CbhgConfig {
                    bank_k: 3,
                    bank_channels: 8,
                    pool_width: 2,
                    proj_channels: 8,
                    proj_kernel: 3,
                    highway_layers: 2,
                    gru: 8,
                };
                c.taco2 = Taco2Config {
                    conv_layers: 2,
                    conv_channels: 8,
                    conv_kernel: 5,
                    lstm: 8,
                };
                c.mel_ref.channels = vec![2, 2, 2, 2, 2, 2];
                c.phone_ref = PhoneRefConfig {
                    embedding: 8,
                    channels: vec![2, 2, 2],
                    gru: 8,
                };
                c.decoder = DecoderConfig {
                    prenet: vec![8, 8],
                    attention_lstm: 8,
                    decoder_lstm: 8,
                    postnet_layers: 2,
                    postnet_channels: 8,
                    postnet_kernel: 5,
                };
                c.gmm.components = 2;
                c.gmm.hidden = 8;
                c.lsa = LsaConfig {
                    window: 4,
                    attention_dim: 8,
                    location_filters: 2,
                    location_kernel: 3,
                };
            }
        }
        c
    }

    /// Width of the encoder output before augmentation.
    pub fn encoder_width(&self) -> usize {
        match self.encoder {
            EncoderKind::Cbhg => 2 * self.cbhg.gru,
            EncoderKind::Taco2 => 2 * self.taco2.lstm,
        }
    }

    pub fn mel_ref_width(&self) -> usize {
        if self.use_mel_ref {
            self.mel_ref.gru
        } else {
            0
        }
    }

    pub fn phone_ref_width(&self) -> usize {
        if self.use_phone_ref {
            self.phone_ref.gru
        } else {
            0
        }
    }

    /// Memory width seen by the attention and the decoder.
    pub fn augmented_width(&self) -> usize {
        self.encoder_width() + self.mel_ref_width() + self.phone_ref_width()
    }

    /// Encoder positions advanced per decoder step, used to centre the LSA
    /// window.
    pub fn len_ratio(&self) -> f64 {
        self.reduction_factor as f64 / self.ppg_frame_ratio as f64
    }

    /// Checks ranges and that the switches agree with the named system.
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        let (enc, att, mel, ph) = self.system.switches();
        if (self.encoder, self.attention, self.use_mel_ref, self.use_phone_ref) != (enc, att, mel, ph) {
            bad.push(format!(
                "switches (encoder, attention, use_mel_ref, use_phone_ref) do not define system {}",
                self.system
            ));
        }
        let positive = [
            ("reduction_factor", self.reduction_factor),
            ("ppg_dim", self.ppg_dim),
            ("mel_dim", self.mel_dim),
            ("n_phonemes", self.n_phonemes),
            ("ppg_frame_ratio", self.ppg_frame_ratio),
            ("cbhg.bank_k", self.cbhg.bank_k),
            ("cbhg.bank_channels", self.cbhg.bank_channels),
            ("cbhg.pool_width", self.cbhg.pool_width),
            ("cbhg.proj_channels", self.cbhg.proj_channels),
            ("cbhg.proj_kernel", self.cbhg.proj_kernel),
            ("cbhg.gru", self.cbhg.gru),
            ("taco2.conv_channels", self.taco2.conv_channels),
            ("taco2.conv_kernel", self.taco2.conv_kernel),
            ("taco2.lstm", self.taco2.lstm),
            ("mel_ref.gru", self.mel_ref.gru),
            ("phone_ref.embedding", self.phone_ref.embedding),
            ("phone_ref.gru", self.phone_ref.gru),
            ("decoder.attention_lstm", self.decoder.attention_lstm),
            ("decoder.decoder_lstm", self.decoder.decoder_lstm),
            ("decoder.postnet_layers", self.decoder.postnet_layers),
            ("decoder.postnet_channels", self.decoder.postnet_channels),
            ("decoder.postnet_kernel", self.decoder.postnet_kernel),
            ("gmm.components", self.gmm.components),
            ("gmm.hidden", self.gmm.hidden),
            ("lsa.window", self.lsa.window),
            ("lsa.attention_dim", self.lsa.attention_dim),
            ("lsa.location_filters", self.lsa.location_filters),
            ("lsa.location_kernel", self.lsa.location_kernel),
        ];
        bad.extend(positive.iter().filter(|(_, v)| *v == 0).map(|(k, _)| format!("{k} must be ≥ 1")));
        for (k, list) in [
            ("ppg_prenet", &self.ppg_prenet),
            ("mel_ref.channels", &self.mel_ref.channels),
            ("phone_ref.channels", &self.phone_ref.channels),
            ("decoder.prenet", &self.decoder.prenet),
        ] {
            if list.is_empty() || list.contains(&0) {
                bad.push(format!("{k} must be a nonempty list of positive widths"));
            }
        }
        for (k, p) in [("dropout.prenet", self.dropout.prenet), ("dropout.lstm", self.dropout.lstm)] {
            if !(0.0..1.0).contains(&p) {
                bad.push(format!("{k} must lie in [0, 1)"));
            }
        }
        if self.encoder == EncoderKind::Cbhg && self.cbhg.proj_channels == 0 {
            bad.push("cbhg.proj_channels must be ≥ 1".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Schema(bad))
        }
    }
}

/// Recursively lists keys of `given` that do not occur in `reference`.
pub fn unknown_keys(given: &Value, reference: &Value) -> Vec<String> {
    let mut out = Vec::new();
    collect_unknown(given, reference, "", &mut out);
    out
}

fn collect_unknown(given: &Value, reference: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(g), Value::Object(r)) = (given, reference) {
        for (k, v) in g {
            let path = if prefix.is_empty() {
                k.clone()
            } else {
                format!("{prefix}.{k}")
            };
            match r.get(k) {
                Some(rv) => collect_unknown(v, rv, &path, out),
                None => out.push(path),
            }
        }
    }
}

/// Overlays `patch` onto `base`, descending into objects.
pub fn merge_json(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

/// Parses a model section. Either a complete configuration, or
/// `{"preset": "...", "system": "...", ...overrides}`.
pub fn system_config_from_value(v: &Value) -> Result<SystemConfig> {
    let obj = v
        .as_object()
        .ok_or_else(|| Error::Schema(vec!["model section must be an object".into()]))?;
    let mut value = v.clone();
    if let Some(p) = obj.get("preset") {
        let preset: Preset = p
            .as_str()
            .ok_or_else(|| Error::Schema(vec!["preset must be a string".into()]))?
            .parse()
            .map_err(|e: Error| Error::Schema(vec![e.to_string()]))?;
        let system: SystemKind = obj
            .get("system")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Schema(vec!["system is required alongside preset".into()]))?
            .parse()
            .map_err(|e: Error| Error::Schema(vec![e.to_string()]))?;
        let mut patch = v.clone();
        if let Value::Object(m) = &mut patch {
            m.remove("preset");
            m.remove("system");
        }
        value = serde_json::to_value(SystemConfig::preset(preset, system))?;
        merge_json(&mut value, &patch);
    }
    let reference = serde_json::to_value(SystemConfig::preset(Preset::Micro, SystemKind::S3))?;
    let unknown = unknown_keys(&value, &reference);
    if !unknown.is_empty() {
        return Err(Error::Schema(
            unknown.into_iter().map(|k| format!("unknown key {k}")).collect(),
        ));
    }
    let cfg: SystemConfig =
        serde_json::from_value(value).map_err(|e| Error::Schema(vec![e.to_string()]))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Versioned on-disk form of a lone model configuration.
#[derive(Serialize, Deserialize)]
struct VersionedSystem {
    version: u32,
    model: SystemConfig,
}

pub fn system_config_to_json(cfg: &SystemConfig) -> Result<String> {
    let v = VersionedSystem {
        version: CONFIG_VERSION,
        model: cfg.clone(),
    };
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

pub fn system_config_from_json(text: &str) -> Result<SystemConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Schema(vec![e.to_string()]))?;
    check_version(&v)?;
    let mut bad = Vec::new();
    if let Some(obj) = v.as_object() {
        bad.extend(
            obj.keys()
                .filter(|k| *k != "version" && *k != "model")
                .map(|k| format!("unknown key {k}")),
        );
    }
    if !bad.is_empty() {
        return Err(Error::Schema(bad));
    }
    let model = v
        .get("model")
        .ok_or_else(|| Error::Schema(vec!["missing key model".into()]))?;
    system_config_from_value(model)
}

pub fn check_version(v: &Value) -> Result<()> {
    match v.get("version").and_then(Value::as_u64) {
        Some(n) if n == CONFIG_VERSION as u64 => Ok(()),
        Some(n) => Err(Error::Schema(vec![format!(
            "unsupported config version {n} (expected {CONFIG_VERSION})"
        )])),
        None => Err(Error::Schema(vec!["missing integer key version".into()])),
    }
}
