//! Width and parameter-count bookkeeping.
//!
//! Expected widths and counts are derived here by plain arithmetic on the
//! configuration, independently of parameter registration, and compared
//! against a probe forward pass.

use serde::Serialize;

use super::config::{AttentionKind, EncoderKind, SystemConfig};
use super::model::{halved, ConversionModel, DecodeMode, ModelInput, Mode};
use crate::error::{Error, Result};
use crate::numcore::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WidthEntry {
    pub name: String,
    pub expected: usize,
    pub actual: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WidthAudit {
    pub entries: Vec<WidthEntry>,
    pub param_count: usize,
    pub expected_param_count: usize,
}

impl WidthAudit {
    pub fn passes(&self) -> bool {
        self.param_count == self.expected_param_count && self.entries.iter().all(|e| e.expected == e.actual)
    }

    pub fn mismatches(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .entries
            .iter()
            .filter(|e| e.expected != e.actual)
            .map(|e| format!("{}: expected {}, got {}", e.name, e.expected, e.actual))
            .collect();
        if self.param_count != self.expected_param_count {
            out.push(format!(
                "parameter count: expected {}, got {}",
                self.expected_param_count, self.param_count
            ));
        }
        out
    }

    pub fn get(&self, name: &str) -> Option<&WidthEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn dense(i: usize, o: usize) -> usize {
    i * o + o
}

fn conv1d(k: usize, i: usize, o: usize) -> usize {
    k * i * o + o
}

fn conv2d(i: usize, o: usize) -> usize {
    9 * i * o + o
}

fn gru(i: usize, h: usize) -> usize {
    3 * h * (i + h) + 6 * h
}

fn lstm(i: usize, h: usize) -> usize {
    4 * h * (i + h) + 4 * h
}

fn chain(first: usize, widths: &[usize]) -> (usize, usize) {
    let mut total = 0;
    let mut w = first;
    for &o in widths {
        total += dense(w, o);
        w = o;
    }
    (total, w)
}

fn conv2d_chain(channels: &[usize]) -> usize {
    let mut total = 0;
    let mut cin = 1;
    for &o in channels {
        total += conv2d(cin, o);
        cin = o;
    }
    total
}

/// Trainable scalar count implied by the configuration.
pub fn closed_form_param_count(c: &SystemConfig) -> usize {
    let (mut n, p) = chain(c.ppg_dim, &c.ppg_prenet);
    n += match c.encoder {
        EncoderKind::Cbhg => {
            let b = &c.cbhg;
            (1..=b.bank_k).map(|k| conv1d(k, p, b.bank_channels)).sum::<usize>()
                + conv1d(b.proj_kernel, b.bank_k * b.bank_channels, b.proj_channels)
                + conv1d(b.proj_kernel, b.proj_channels, p)
                + b.highway_layers * 2 * dense(p, p)
                + 2 * gru(p, b.gru)
        }
        EncoderKind::Taco2 => {
            let t = &c.taco2;
            conv1d(t.conv_kernel, p, t.conv_channels)
                + t.conv_layers.saturating_sub(1) * conv1d(t.conv_kernel, t.conv_channels, t.conv_channels)
                + 2 * lstm(t.conv_channels, t.lstm)
        }
    };
    if c.use_mel_ref {
        let m = &c.mel_ref;
        let flat = halved(c.mel_dim, m.channels.len()) * m.channels[m.channels.len() - 1];
        n += conv2d_chain(&m.channels) + 2 * gru(flat, m.gru);
    }
    if c.use_phone_ref {
        let ph = &c.phone_ref;
        let flat = halved(ph.embedding, ph.channels.len()) * ph.channels[ph.channels.len() - 1];
        n += c.n_phonemes * ph.embedding + conv2d_chain(&ph.channels) + 2 * gru(flat, ph.gru);
    }
    let d = c.augmented_width();
    let dec = &c.decoder;
    let ha = dec.attention_lstm;
    n += match c.attention {
        AttentionKind::Gmm => dense(ha, c.gmm.hidden) + c.gmm.hidden * 3 * c.gmm.components,
        AttentionKind::LsaWindowed => {
            let l = &c.lsa;
            let a = l.attention_dim;
            ha * a + d * a + l.location_kernel * 2 * l.location_filters + l.location_filters * a + a + a
        }
    };
    let (pre, pw) = chain(c.mel_dim, &dec.prenet);
    n += pre + lstm(pw + d, ha) + lstm(ha + d, dec.decoder_lstm);
    n += dense(dec.decoder_lstm + d, c.reduction_factor * c.mel_dim);
    if c.stop_token {
        n += dense(dec.decoder_lstm + d, 1);
    }
    let ch = dec.postnet_channels;
    n += match dec.postnet_layers {
        1 => conv1d(dec.postnet_kernel, c.mel_dim, c.mel_dim),
        l => {
            conv1d(dec.postnet_kernel, c.mel_dim, ch)
                + (l - 2) * conv1d(dec.postnet_kernel, ch, ch)
                + conv1d(dec.postnet_kernel, ch, c.mel_dim)
        }
    };
    n
}

const PROBE_PPG: usize = 4;
const PROBE_MEL: usize = 7;

/// Runs a small teacher-forced probe and compares every inter-module
/// width with the configuration arithmetic.
pub fn width_audit(model: &ConversionModel) -> Result<WidthAudit> {
    let c = model.config();
    let ppg = Tensor::full(vec![PROBE_PPG, c.ppg_dim], 1.0 / c.ppg_dim as f64);
    let mel = Tensor::zeros(vec![PROBE_MEL, c.mel_dim]);
    let phonemes = [0, c.n_phonemes - 1];
    let input = ModelInput {
        ppg: &ppg,
        ref_mel: Some(&mel),
        phonemes: Some(&phonemes),
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &input, DecodeMode::TeacherForced(&mel), &mut Mode::inference())?;
    let mut entries = Vec::new();
    let mut push = |name: &str, expected: usize, actual: usize| {
        entries.push(WidthEntry {
            name: name.to_string(),
            expected,
            actual,
        })
    };
    push("ppg_prenet", c.ppg_prenet[c.ppg_prenet.len() - 1], g.shape(out.prenet)[1]);
    push("encoder", c.encoder_width(), g.shape(out.encoder)[1]);
    push("encoder_len", PROBE_PPG, g.shape(out.encoder)[0]);
    if let Some(m) = out.mel_ref {
        push("mel_ref", c.mel_ref.gru, g.shape(m)[1]);
        push("mel_ref_len", PROBE_MEL.div_ceil(3), g.shape(m)[0]);
    }
    if let Some(p) = out.phone_ref {
        push("phone_ref", c.phone_ref.gru, g.value(p).len());
    }
    push("augmented", c.augmented_width(), g.shape(out.augmented)[1]);
    push("mel_before", c.mel_dim, g.shape(out.decode.mel_before)[1]);
    push("mel_after", c.mel_dim, g.shape(out.decode.mel_after)[1]);
    push("mel_len", PROBE_MEL, g.shape(out.decode.mel_after)[0]);
    push(
        "decoder_steps",
        PROBE_MEL.div_ceil(c.reduction_factor),
        g.shape(out.decode.alignment)[0],
    );
    push("alignment_cols", PROBE_PPG, g.shape(out.decode.alignment)[1]);
    Ok(WidthAudit {
        entries,
        param_count: model.params().num_scalars(),
        expected_param_count: closed_form_param_count(c),
    })
}

pub(crate) fn audit_model(model: &ConversionModel) -> Result<()> {
    let a = width_audit(model)?;
    if a.passes() {
        Ok(())
    } else {
        Err(Error::dim(format!("width audit failed: {}", a.mismatches().join("; "))))
    }
}
