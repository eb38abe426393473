use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{AttentionKind, EncoderKind, SystemConfig};
use crate::attention::{
    self, GmmAttentionState, GmmOptions, GmmWeights, LsaState, LsaWeights,
};
use crate::error::{Error, Result};
use crate::numcore::cells::{self, GruWeights, LstmWeights};
use crate::numcore::{Graph, Init, Padding, ParamId, ParamStore, Tensor, Var};

/// Dropout switch plus its random stream. Inference uses
/// [`Mode::inference`], which never touches the generator.
pub struct Mode {
    pub training: bool,
    pub rng: ChaCha8Rng,
}

impl Mode {
    pub fn inference() -> Mode {
        Mode {
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn training(seed: u64) -> Mode {
        Mode {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Conditioning inputs of one utterance.
#[derive(Clone, Copy, Debug)]
pub struct ModelInput<'a> {
    pub ppg: &'a Tensor,
    /// Reference mel `[T_ref × 80]`; required when the mel reference
    /// encoder is enabled.
    pub ref_mel: Option<&'a Tensor>,
    /// Phoneme ids; required when the phoneme reference encoder is enabled.
    pub phonemes: Option<&'a [usize]>,
}

#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a> {
    /// Feed ground-truth frames `[T_mel × 80]`.
    TeacherForced(&'a Tensor),
    /// Feed back predictions. Stops after `max_steps`, or earlier when
    /// `use_stop` is set and the stop probability exceeds 0.5.
    FreeRunning { max_steps: usize, use_stop: bool },
}

/// Decoder outputs bound on the graph that produced them.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOutput {
    /// `[T_out × 80]`
    pub mel_before: Var,
    /// `[T_out × 80]`, PostNet residual applied.
    pub mel_after: Var,
    /// One logit per decoder step, `[steps]`.
    pub stop_logits: Var,
    /// `[steps × T_ppg]`
    pub alignment: Var,
    pub steps: usize,
}

/// Everything a forward pass produces, including intermediate encodings.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub prenet: Var,
    pub encoder: Var,
    pub mel_ref: Option<Var>,
    pub phone_ref: Option<Var>,
    pub augmented: Var,
    pub decode: DecodeOutput,
}

/// The conversion network: configuration plus its named parameters.
#[derive(Clone, Debug)]
pub struct ConversionModel {
    config: SystemConfig,
    params: ParamStore,
    index: HashMap<String, ParamId>,
}

fn dense_init(fan_in: usize, fan_out: usize) -> Init {
    Init::Glorot { fan_in, fan_out }
}

/// Frequency width after `n` stride-2 "same" convolutions.
pub fn halved(mut w: usize, n: usize) -> usize {
    for _ in 0..n {
        w = w.div_ceil(2);
    }
    w
}

struct Registrar<'a> {
    store: &'a mut ParamStore,
    seed: u64,
}

impl Registrar<'_> {
    fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) -> Result<()> {
        self.store.init(name, shape, init, self.seed).map(|_| ())
    }

    fn dense(&mut self, prefix: &str, i: usize, o: usize) -> Result<()> {
        self.add(&format!("{prefix}.w"), vec![i, o], dense_init(i, o))?;
        self.add(&format!("{prefix}.b"), vec![o], Init::Zeros)
    }

    fn conv1d(&mut self, prefix: &str, k: usize, i: usize, o: usize) -> Result<()> {
        self.add(&format!("{prefix}.w"), vec![k, i, o], dense_init(k * i, k * o))?;
        self.add(&format!("{prefix}.b"), vec![o], Init::Zeros)
    }

    fn conv2d(&mut self, prefix: &str, i: usize, o: usize) -> Result<()> {
        self.add(&format!("{prefix}.w"), vec![3, 3, i, o], dense_init(9 * i, 9 * o))?;
        self.add(&format!("{prefix}.b"), vec![o], Init::Zeros)
    }

    fn gru(&mut self, prefix: &str, i: usize, h: usize) -> Result<()> {
        self.add(&format!("{prefix}.w_x"), vec![i, 3 * h], dense_init(i, h))?;
        self.add(&format!("{prefix}.w_h"), vec![h, 3 * h], dense_init(h, h))?;
        self.add(&format!("{prefix}.b_x"), vec![3 * h], Init::Zeros)?;
        self.add(&format!("{prefix}.b_h"), vec![3 * h], Init::Zeros)
    }

    fn lstm(&mut self, prefix: &str, i: usize, h: usize) -> Result<()> {
        self.add(&format!("{prefix}.w_x"), vec![i, 4 * h], dense_init(i, h))?;
        self.add(&format!("{prefix}.w_h"), vec![h, 4 * h], dense_init(h, h))?;
        // forget-gate bias starts at 1 so early gradients survive the recurrence
        let mut b = vec![0.0; 4 * h];
        b[h..2 * h].fill(1.0);
        self.store
            .insert(format!("{prefix}.b"), Tensor::new(vec![4 * h], b)?)
            .map(|_| ())
    }
}

impl ConversionModel {
    /// Registers every parameter, seeded by `seed`, then runs a small probe
    /// forward pass that checks each inter-module width against the
    /// configuration arithmetic.
    pub fn new(config: SystemConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        register(&config, &mut Registrar { store: &mut store, seed })?;
        let model = Self::from_parts(config, store)?;
        super::audit::audit_model(&model)?;
        Ok(model)
    }

    /// Wraps an existing parameter set, verifying names and shapes against
    /// what `config` requires.
    pub fn from_params(config: SystemConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut expected = ParamStore::new();
        register(&config, &mut Registrar { store: &mut expected, seed: 0 })?;
        let mut problems = Vec::new();
        for (_, name, t) in expected.iter() {
            match params.id(name) {
                None => problems.push(format!("missing parameter {name}")),
                Some(id) if params.get(id).shape() != t.shape() => problems.push(format!(
                    "parameter {name} has shape {:?}, configuration needs {:?}",
                    params.get(id).shape(),
                    t.shape()
                )),
                Some(_) => {}
            }
        }
        for (_, name, _) in params.iter() {
            if expected.id(name).is_none() {
                problems.push(format!("unexpected parameter {name}"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems.join("; ")));
        }
        // reorder to registration order so iteration is canonical
        let mut ordered = ParamStore::new();
        for (_, name, _) in expected.iter() {
            ordered.insert(name, params.get(params.id(name).unwrap()).clone())?;
        }
        Self::from_parts(config, ordered)
    }

    fn from_parts(config: SystemConfig, params: ParamStore) -> Result<Self> {
        let index = params.iter().map(|(id, n, _)| (n.to_string(), id)).collect();
        Ok(ConversionModel { config, params, index })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    fn p(&self, g: &mut Graph, name: &str) -> Result<Var> {
        let id = self
            .param_id(name)
            .ok_or_else(|| Error::contract(format!("model has no parameter {name}")))?;
        Ok(g.param(&self.params, id))
    }

    fn dense(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn conv1d(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        let y = g.conv1d(x, w, 1, Padding::Same)?;
        g.add(y, b)
    }

    fn conv2d(&self, g: &mut Graph, prefix: &str, x: Var, stride: (usize, usize)) -> Result<Var> {
        let w = self.p(g, &format!("{prefix}.w"))?;
        let b = self.p(g, &format!("{prefix}.b"))?;
        let y = g.conv2d(x, w, stride)?;
        g.add(y, b)
    }

    fn gru_weights(&self, g: &mut Graph, prefix: &str) -> Result<GruWeights> {
        Ok(GruWeights {
            w_x: self.p(g, &format!("{prefix}.w_x"))?,
            w_h: self.p(g, &format!("{prefix}.w_h"))?,
            b_x: self.p(g, &format!("{prefix}.b_x"))?,
            b_h: self.p(g, &format!("{prefix}.b_h"))?,
        })
    }

    fn lstm_weights(&self, g: &mut Graph, prefix: &str) -> Result<LstmWeights> {
        Ok(LstmWeights {
            w_x: self.p(g, &format!("{prefix}.w_x"))?,
            w_h: self.p(g, &format!("{prefix}.w_h"))?,
            b: self.p(g, &format!("{prefix}.b"))?,
        })
    }

    /// Runs a GRU over the rows of `xs` in the given direction; returns the
    /// per-step states in time order.
    fn gru_sequence(&self, g: &mut Graph, prefix: &str, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let w = self.gru_weights(g, prefix)?;
        let h_dim = g.shape(w.w_h)[0];
        let proj = cells::gru_project(g, xs, &w)?;
        let t = g.shape(xs)[0];
        let mut h = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut out = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let row = g.row(proj, i)?;
            h = cells::gru_step(g, row, h, &w)?;
            out[i] = h;
        }
        Ok(out)
    }

    fn lstm_sequence(&self, g: &mut Graph, prefix: &str, xs: Var, reverse: bool) -> Result<Vec<Var>> {
        let w = self.lstm_weights(g, prefix)?;
        let h_dim = g.shape(w.w_h)[0];
        let proj = cells::lstm_project(g, xs, &w)?;
        let t = g.shape(xs)[0];
        let mut h = g.constant(Tensor::zeros(vec![1, h_dim]));
        let mut c = h;
        let mut out = vec![h; t];
        let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
        for i in order {
            let row = g.row(proj, i)?;
            (h, c) = cells::lstm_step(g, row, h, c, &w)?;
            out[i] = h;
        }
        Ok(out)
    }

    // ---- encoder side -----------------------------------------------------

    /// FC-ReLU-dropout stack on the PPG frames: `[T × 87] → [T × 128]`.
    pub fn ppg_prenet(&self, g: &mut Graph, ppg: Var, mode: &mut Mode) -> Result<Var> {
        let w = g.shape(ppg).to_vec();
        if w.len() != 2 || w[1] != self.config.ppg_dim {
            return Err(Error::dim(format!(
                "PPG input {w:?} does not have width {}",
                self.config.ppg_dim
            )));
        }
        let mut x = ppg;
        for i in 0..self.config.ppg_prenet.len() {
            x = self.dense(g, &format!("ppg_prenet.{i}"), x)?;
            x = g.relu(x);
            x = g.dropout(x, self.config.dropout.prenet, &mut mode.rng, mode.training)?;
        }
        Ok(x)
    }

    /// One highway layer `T·H(x) + (1 − T)·x`.
    pub fn highway(&self, g: &mut Graph, prefix: &str, x: Var) -> Result<Var> {
        let h = self.dense(g, &format!("{prefix}.h"), x)?;
        let h = g.relu(h);
        let t = self.dense(g, &format!("{prefix}.t"), x)?;
        let t = g.sigmoid(t);
        let th = g.mul(t, h)?;
        let carry = g.one_minus(t);
        let cx = g.mul(carry, x)?;
        g.add(th, cx)
    }

    /// Conv bank, max pool, projections, residual, highway stack and BiGRU:
    /// `[T × P] → [T × 2·gru]`.
    pub fn cbhg_encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = &self.config.cbhg;
        let mut bank = Vec::with_capacity(c.bank_k);
        for k in 1..=c.bank_k {
            let y = self.conv1d(g, &format!("encoder.bank.{k}"), x)?;
            bank.push(g.relu(y));
        }
        let y = g.concat(&bank, 1)?;
        let y = g.max_pool_time(y, c.pool_width)?;
        let y = self.conv1d(g, "encoder.proj.0", y)?;
        let y = g.relu(y);
        let y = self.conv1d(g, "encoder.proj.1", y)?;
        let mut y = g.add(y, x)?;
        for i in 0..c.highway_layers {
            y = self.highway(g, &format!("encoder.highway.{i}"), y)?;
        }
        let fw = self.gru_sequence(g, "encoder.gru.fw", y, false)?;
        let bw = self.gru_sequence(g, "encoder.gru.bw", y, true)?;
        let fw = g.concat(&fw, 0)?;
        let bw = g.concat(&bw, 0)?;
        g.concat(&[fw, bw], 1)
    }

    /// Conv-ReLU stack followed by a BiLSTM: `[T × P] → [T × 2·lstm]`.
    pub fn taco2_encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut y = x;
        for i in 0..self.config.taco2.conv_layers {
            y = self.conv1d(g, &format!("encoder.conv.{i}"), y)?;
            y = g.relu(y);
        }
        let fw = self.lstm_sequence(g, "encoder.lstm.fw", y, false)?;
        let bw = self.lstm_sequence(g, "encoder.lstm.bw", y, true)?;
        let fw = g.concat(&fw, 0)?;
        let bw = g.concat(&bw, 0)?;
        g.concat(&[fw, bw], 1)
    }

    /// `[T_ref × 80] → [ceil(T_ref/3) × gru]`, values in (−1, 1).
    pub fn mel_ref_encode(&self, g: &mut Graph, ref_mel: Var) -> Result<Var> {
        let s = g.shape(ref_mel).to_vec();
        if s.len() != 2 || s[1] != self.config.mel_dim {
            return Err(Error::dim(format!("reference mel {s:?} is not [T × {}]", self.config.mel_dim)));
        }
        if s[0] < 3 {
            return Err(Error::contract(format!(
                "reference mel needs at least 3 frames, got {}",
                s[0]
            )));
        }
        let n = self.config.mel_ref.channels.len();
        let mut y = g.reshape(ref_mel, vec![s[0], s[1], 1])?;
        for i in 0..n {
            let stride = if i + 1 == n { (3, 2) } else { (1, 2) };
            y = self.conv2d(g, &format!("mel_ref.conv.{i}"), y, stride)?;
            y = g.relu(y);
        }
        let ys = g.shape(y).to_vec();
        let y = g.reshape(y, vec![ys[0], ys[1] * ys[2]])?;
        let fw = self.gru_sequence(g, "mel_ref.gru.fw", y, false)?;
        let bw = self.gru_sequence(g, "mel_ref.gru.bw", y, true)?;
        let fw = g.concat(&fw, 0)?;
        let bw = g.concat(&bw, 0)?;
        let sum = g.add(fw, bw)?;
        Ok(g.tanh(sum))
    }

    /// Fixed-size phoneme-sequence embedding `[1 × gru]`.
    pub fn phone_ref_encode(&self, g: &mut Graph, phonemes: &[usize]) -> Result<Var> {
        if phonemes.is_empty() {
            return Err(Error::contract("phoneme reference needs at least one phoneme"));
        }
        let table = self.p(g, "phone_ref.embedding")?;
        let x = g.gather_rows(table, phonemes)?;
        let e = self.config.phone_ref.embedding;
        let mut y = g.reshape(x, vec![phonemes.len(), e, 1])?;
        for i in 0..self.config.phone_ref.channels.len() {
            y = self.conv2d(g, &format!("phone_ref.conv.{i}"), y, (1, 2))?;
        }
        let ys = g.shape(y).to_vec();
        let y = g.reshape(y, vec![ys[0], ys[1] * ys[2]])?;
        let fw = self.gru_sequence(g, "phone_ref.gru.fw", y, false)?;
        let bw = self.gru_sequence(g, "phone_ref.gru.bw", y, true)?;
        let last = g.add(fw[fw.len() - 1], bw[0])?;
        Ok(g.tanh(last))
    }

    /// Concatenates reference embeddings onto every encoder step.
    pub fn augment_encoder(&self, g: &mut Graph, enc: Var, mel_ref: Option<Var>, phone_ref: Option<Var>) -> Result<Var> {
        let t = g.shape(enc)[0];
        let mut parts = vec![enc];
        if let Some(m) = mel_ref {
            let interp = g.constant(interpolation_matrix(t, g.shape(m)[0]));
            parts.push(g.matmul(interp, m)?);
        }
        if let Some(p) = phone_ref {
            let ones = g.constant(Tensor::full(vec![t, 1], 1.0));
            parts.push(g.matmul(ones, p)?);
        }
        if parts.len() == 1 {
            return Ok(enc);
        }
        g.concat(&parts, 1)
    }

    /// Encoder side of the network: `(prenet, encoder, mel_ref, phone_ref, augmented)`.
    #[allow(clippy::type_complexity)]
    pub fn encode(
        &self,
        g: &mut Graph,
        input: &ModelInput,
        mode: &mut Mode,
    ) -> Result<(Var, Var, Option<Var>, Option<Var>, Var)> {
        let ppg = g.constant(input.ppg.clone());
        let pre = self.ppg_prenet(g, ppg, mode)?;
        let enc = match self.config.encoder {
            EncoderKind::Cbhg => self.cbhg_encode(g, pre)?,
            EncoderKind::Taco2 => self.taco2_encode(g, pre)?,
        };
        let mel_ref = if self.config.use_mel_ref {
            let r = input.ref_mel.ok_or_else(|| {
                Error::Usage("configuration enables use_mel_ref but no reference mel was given".into())
            })?;
            let r = g.constant(r.clone());
            Some(self.mel_ref_encode(g, r)?)
        } else {
            None
        };
        let phone_ref = if self.config.use_phone_ref {
            let ph = input.phonemes.ok_or_else(|| {
                Error::Usage("configuration enables use_phone_ref but no phonemes were given".into())
            })?;
            Some(self.phone_ref_encode(g, ph)?)
        } else {
            None
        };
        let aug = self.augment_encoder(g, enc, mel_ref, phone_ref)?;
        Ok((pre, enc, mel_ref, phone_ref, aug))
    }

    // ---- decoder side -----------------------------------------------------

    fn decoder_prenet(&self, g: &mut Graph, frame: Var, mode: &mut Mode) -> Result<Var> {
        let mut x = frame;
        for i in 0..self.config.decoder.prenet.len() {
            x = self.dense(g, &format!("decoder.prenet.{i}"), x)?;
            x = g.relu(x);
            x = g.dropout(x, self.config.dropout.prenet, &mut mode.rng, mode.training)?;
        }
        Ok(x)
    }

    /// PostNet residual: `mel + PostNet(mel)`.
    pub fn postnet(&self, g: &mut Graph, mel: Var) -> Result<Var> {
        let n = self.config.decoder.postnet_layers;
        let mut y = mel;
        for i in 0..n {
            y = self.conv1d(g, &format!("postnet.{i}"), y)?;
            if i + 1 < n {
                y = g.tanh(y);
            }
        }
        g.add(mel, y)
    }

    /// Autoregressive decoder over the augmented memory `[T_ppg × D]`.
    pub fn decode(&self, g: &mut Graph, memory: Var, mode_dec: DecodeMode, mode: &mut Mode) -> Result<DecodeOutput> {
        let cfg = &self.config;
        let r = cfg.reduction_factor;
        let mel_dim = cfg.mel_dim;
        let (enc_len, d) = (g.shape(memory)[0], g.shape(memory)[1]);
        if d != cfg.augmented_width() {
            return Err(Error::dim(format!(
                "decoder memory width {d}, configuration expects {}",
                cfg.augmented_width()
            )));
        }
        let (steps, target, true_len) = match mode_dec {
            DecodeMode::TeacherForced(t) => {
                if t.rank() != 2 || t.cols() != mel_dim {
                    return Err(Error::dim(format!("target mel {:?} is not [T × {mel_dim}]", t.shape())));
                }
                let steps = t.rows().div_ceil(r);
                let padded = pad_to_multiple(t, r)?;
                (steps, Some(g.constant(padded)), Some(t.rows()))
            }
            DecodeMode::FreeRunning { max_steps, .. } => {
                if max_steps == 0 {
                    return Err(Error::contract("max_steps must be ≥ 1"));
                }
                (max_steps, None, None)
            }
        };
        let use_stop = matches!(mode_dec, DecodeMode::FreeRunning { use_stop: true, .. }) && cfg.stop_token;

        let att_w = self.lstm_weights(g, "decoder.attention_lstm")?;
        let dec_w = self.lstm_weights(g, "decoder.lstm")?;
        let (ha, hd) = (cfg.decoder.attention_lstm, cfg.decoder.decoder_lstm);
        let zeros = |g: &mut Graph, n| g.constant(Tensor::zeros(vec![1, n]));
        let (mut att_h, mut att_c) = (zeros(g, ha), zeros(g, ha));
        let (mut dec_h, mut dec_c) = (zeros(g, hd), zeros(g, hd));
        let mut context = zeros(g, d);
        let mut prev_frame = zeros(g, mel_dim);

        enum AttState {
            Gmm(GmmAttentionState, GmmWeights, GmmOptions),
            Lsa(LsaState, LsaWeights, Var),
        }
        let mut att = match cfg.attention {
            AttentionKind::Gmm => {
                let w = GmmWeights {
                    w: self.p(g, "attention.gmm.w")?,
                    b: self.p(g, "attention.gmm.b")?,
                    v: self.p(g, "attention.gmm.v")?,
                };
                let opts = GmmOptions {
                    sigma_form: cfg.gmm.sigma_form,
                    renormalize: cfg.gmm.renormalize,
                };
                AttState::Gmm(attention::gmm_init_state(g, cfg.gmm.components)?, w, opts)
            }
            AttentionKind::LsaWindowed => {
                let w = LsaWeights {
                    query: self.p(g, "attention.lsa.query")?,
                    memory: self.p(g, "attention.lsa.memory")?,
                    loc_conv: self.p(g, "attention.lsa.loc_conv")?,
                    loc_dense: self.p(g, "attention.lsa.loc_dense")?,
                    bias: self.p(g, "attention.lsa.bias")?,
                    v: self.p(g, "attention.lsa.v")?,
                };
                let processed = attention::lsa_process_memory(g, memory, &w)?;
                AttState::Lsa(attention::lsa_init_state(g, enc_len)?, w, processed)
            }
        };

        let mut mel_rows = Vec::with_capacity(steps);
        let mut stops = Vec::with_capacity(steps);
        let mut alphas = Vec::with_capacity(steps);
        for i in 0..steps {
            if i > 0 {
                if let Some(t) = target {
                    prev_frame = g.row(t, i * r - 1)?;
                }
            }
            let pre = self.decoder_prenet(g, prev_frame, mode)?;
            let x = g.concat(&[pre, context], 1)?;
            (att_h, att_c) = cells::lstm_cell(g, x, att_h, att_c, &att_w)?;
            let query = g.dropout(att_h, cfg.dropout.lstm, &mut mode.rng, mode.training)?;
            let alpha = match &mut att {
                AttState::Gmm(state, w, opts) => {
                    let (alpha, next) = attention::gmm_step(g, query, state, enc_len, w, opts, i)?;
                    *state = next;
                    alpha
                }
                AttState::Lsa(state, w, processed) => {
                    let (alpha, next) = attention::lsa_windowed_step(
                        g,
                        query,
                        state,
                        *processed,
                        i,
                        cfg.len_ratio(),
                        cfg.lsa.window,
                        w,
                    )?;
                    *state = next;
                    alpha
                }
            };
            context = g.matmul(alpha, memory)?;
            let x = g.concat(&[query, context], 1)?;
            (dec_h, dec_c) = cells::lstm_cell(g, x, dec_h, dec_c, &dec_w)?;
            let out = g.dropout(dec_h, cfg.dropout.lstm, &mut mode.rng, mode.training)?;
            let feat = g.concat(&[out, context], 1)?;
            let frames = self.dense(g, "decoder.mel_proj", feat)?;
            if !g.value(frames).is_finite() {
                return Err(Error::Numeric {
                    step: i,
                    what: "non-finite decoder output".into(),
                });
            }
            let frames = g.reshape(frames, vec![r, mel_dim])?;
            mel_rows.push(frames);
            alphas.push(alpha);
            if cfg.stop_token {
                let stop = self.dense(g, "decoder.stop_proj", feat)?;
                stops.push(stop);
                if use_stop && crate::numcore::sigmoid(g.value(stop).item()) > 0.5 {
                    break;
                }
            }
            if target.is_none() {
                prev_frame = g.row(frames, r - 1)?;
            }
        }
        let steps = mel_rows.len();
        let mut mel_before = g.concat(&mel_rows, 0)?;
        if let Some(n) = true_len {
            if n != steps * r {
                mel_before = g.narrow(mel_before, 0, 0, n)?;
            }
        }
        let mel_after = self.postnet(g, mel_before)?;
        if !g.value(mel_after).is_finite() {
            return Err(Error::Numeric {
                step: steps.saturating_sub(1),
                what: "non-finite PostNet output".into(),
            });
        }
        let stop_logits = if stops.is_empty() {
            g.constant(Tensor::zeros(vec![steps]))
        } else {
            let s = g.concat(&stops, 1)?;
            g.reshape(s, vec![steps])?
        };
        let alignment = g.concat(&alphas, 0)?;
        Ok(DecodeOutput {
            mel_before,
            mel_after,
            stop_logits,
            alignment,
            steps,
        })
    }

    /// Encoder plus decoder.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput, dec: DecodeMode, mode: &mut Mode) -> Result<ForwardOutput> {
        let (prenet, encoder, mel_ref, phone_ref, augmented) = self.encode(g, input, mode)?;
        let decode = self.decode(g, augmented, dec, mode)?;
        Ok(ForwardOutput {
            prenet,
            encoder,
            mel_ref,
            phone_ref,
            augmented,
            decode,
        })
    }
}

/// Registers parameters in a fixed canonical order.
fn register(c: &SystemConfig, r: &mut Registrar) -> Result<()> {
    let mut w = c.ppg_dim;
    for (i, &o) in c.ppg_prenet.iter().enumerate() {
        r.dense(&format!("ppg_prenet.{i}"), w, o)?;
        w = o;
    }
    let p = w;
    match c.encoder {
        EncoderKind::Cbhg => {
            let cb = &c.cbhg;
            for k in 1..=cb.bank_k {
                r.conv1d(&format!("encoder.bank.{k}"), k, p, cb.bank_channels)?;
            }
            r.conv1d("encoder.proj.0", cb.proj_kernel, cb.bank_k * cb.bank_channels, cb.proj_channels)?;
            r.conv1d("encoder.proj.1", cb.proj_kernel, cb.proj_channels, p)?;
            for i in 0..cb.highway_layers {
                r.dense(&format!("encoder.highway.{i}.h"), p, p)?;
                r.add(&format!("encoder.highway.{i}.t.w"), vec![p, p], dense_init(p, p))?;
                // negative transform bias: carry the input through at first
                r.add(&format!("encoder.highway.{i}.t.b"), vec![p], Init::Const(-1.0))?;
            }
            r.gru("encoder.gru.fw", p, cb.gru)?;
            r.gru("encoder.gru.bw", p, cb.gru)?;
        }
        EncoderKind::Taco2 => {
            let t = &c.taco2;
            let mut cin = p;
            for i in 0..t.conv_layers {
                r.conv1d(&format!("encoder.conv.{i}"), t.conv_kernel, cin, t.conv_channels)?;
                cin = t.conv_channels;
            }
            r.lstm("encoder.lstm.fw", cin, t.lstm)?;
            r.lstm("encoder.lstm.bw", cin, t.lstm)?;
        }
    }
    if c.use_mel_ref {
        let mut cin = 1;
        for (i, &o) in c.mel_ref.channels.iter().enumerate() {
            r.conv2d(&format!("mel_ref.conv.{i}"), cin, o)?;
            cin = o;
        }
        let flat = halved(c.mel_dim, c.mel_ref.channels.len()) * cin;
        r.gru("mel_ref.gru.fw", flat, c.mel_ref.gru)?;
        r.gru("mel_ref.gru.bw", flat, c.mel_ref.gru)?;
    }
    if c.use_phone_ref {
        let e = c.phone_ref.embedding;
        r.add("phone_ref.embedding", vec![c.n_phonemes, e], dense_init(c.n_phonemes, e))?;
        let mut cin = 1;
        for (i, &o) in c.phone_ref.channels.iter().enumerate() {
            r.conv2d(&format!("phone_ref.conv.{i}"), cin, o)?;
            cin = o;
        }
        let flat = halved(e, c.phone_ref.channels.len()) * cin;
        r.gru("phone_ref.gru.fw", flat, c.phone_ref.gru)?;
        r.gru("phone_ref.gru.bw", flat, c.phone_ref.gru)?;
    }
    let d = c.augmented_width();
    let dec = &c.decoder;
    let ha = dec.attention_lstm;
    match c.attention {
        AttentionKind::Gmm => {
            let g = &c.gmm;
            r.dense("attention.gmm", ha, g.hidden)?;
            r.add("attention.gmm.v", vec![g.hidden, 3 * g.components], dense_init(g.hidden, 3 * g.components))?;
        }
        AttentionKind::LsaWindowed => {
            let l = &c.lsa;
            let a = l.attention_dim;
            r.add("attention.lsa.query", vec![ha, a], dense_init(ha, a))?;
            r.add("attention.lsa.memory", vec![d, a], dense_init(d, a))?;
            r.add(
                "attention.lsa.loc_conv",
                vec![l.location_kernel, 2, l.location_filters],
                dense_init(2 * l.location_kernel, l.location_filters * l.location_kernel),
            )?;
            r.add("attention.lsa.loc_dense", vec![l.location_filters, a], dense_init(l.location_filters, a))?;
            r.add("attention.lsa.bias", vec![a], Init::Zeros)?;
            r.add("attention.lsa.v", vec![a, 1], dense_init(a, 1))?;
        }
    }
    let mut w = c.mel_dim;
    for (i, &o) in dec.prenet.iter().enumerate() {
        r.dense(&format!("decoder.prenet.{i}"), w, o)?;
        w = o;
    }
    r.lstm("decoder.attention_lstm", w + d, ha)?;
    r.lstm("decoder.lstm", ha + d, dec.decoder_lstm)?;
    r.dense("decoder.mel_proj", dec.decoder_lstm + d, c.reduction_factor * c.mel_dim)?;
    if c.stop_token {
        r.dense("decoder.stop_proj", dec.decoder_lstm + d, 1)?;
    }
    for i in 0..dec.postnet_layers {
        let cin = if i == 0 { c.mel_dim } else { dec.postnet_channels };
        let cout = if i + 1 == dec.postnet_layers { c.mel_dim } else { dec.postnet_channels };
        r.conv1d(&format!("postnet.{i}"), dec.postnet_kernel, cin, cout)?;
    }
    Ok(())
}

/// Linear interpolation from `src` to `dst` positions with aligned end
/// points, as a `[dst × src]` matrix whose rows sum to 1.
pub fn interpolation_matrix(dst: usize, src: usize) -> Tensor {
    let mut m = Tensor::zeros(vec![dst, src]);
    for i in 0..dst {
        let pos = if dst == 1 || src == 1 {
            0.0
        } else {
            i as f64 * (src - 1) as f64 / (dst - 1) as f64
        };
        let lo = (pos.floor() as usize).min(src - 1);
        let frac = pos - lo as f64;
        let hi = (lo + 1).min(src - 1);
        m.data_mut()[i * src + lo] += 1.0 - frac;
        if frac > 0.0 {
            m.data_mut()[i * src + hi] += frac;
        }
    }
    m
}

/// Repeats the last frame until the length is a multiple of `r`.
pub fn pad_to_multiple(t: &Tensor, r: usize) -> Result<Tensor> {
    let n = t.rows();
    let padded = n.div_ceil(r) * r;
    if padded == n {
        return Ok(t.clone());
    }
    let c = t.cols();
    let mut data = t.data().to_vec();
    let last = t.row(n - 1).to_vec();
    for _ in n..padded {
        data.extend_from_slice(&last);
    }
    Tensor::new(vec![padded, c], data)
}

/// Stop targets for `steps` decoder steps: 1 on the last step only.
pub fn stop_targets(steps: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![steps]);
    t.data_mut()[steps - 1] = 1.0;
    t
}

/// Per-utterance loss pieces: summed squared errors of both mel outputs and
/// the summed stop binary cross-entropy (with logits).
pub fn loss_sums(g: &mut Graph, out: &DecodeOutput, target: Var, target_stop: Var) -> Result<(Var, Var, Var)> {
    let sse = |g: &mut Graph, pred: Var| -> Result<Var> {
        let d = g.sub(pred, target)?;
        let d = g.square(d);
        Ok(g.sum(d))
    };
    let before = sse(g, out.mel_before)?;
    let after = sse(g, out.mel_after)?;
    // softplus(x) − x·y is BCE(sigmoid(x), y) in a numerically safe form
    let sp = g.softplus(out.stop_logits);
    let xy = g.mul(out.stop_logits, target_stop)?;
    let bce = g.sub(sp, xy)?;
    let bce = g.sum(bce);
    Ok((before, after, bce))
}

/// `MSE(before) + MSE(after) + mean BCE(stop)` for one utterance. The stop
/// term is omitted when the configuration has no stop head.
pub fn loss(g: &mut Graph, out: &DecodeOutput, target: Var, target_stop: Var, with_stop: bool) -> Result<Var> {
    if g.shape(out.mel_before) != g.shape(target) {
        return Err(Error::dim(format!(
            "prediction {:?} and target {:?} differ",
            g.shape(out.mel_before),
            g.shape(target)
        )));
    }
    let n = g.value(target).len() as f64;
    let steps = g.value(target_stop).len() as f64;
    let (b, a, s) = loss_sums(g, out, target, target_stop)?;
    let mse = g.add(b, a)?;
    let mse = g.scale(mse, 1.0 / n);
    if !with_stop {
        return Ok(mse);
    }
    let s = g.scale(s, 1.0 / steps);
    g.add(mse, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::convmodel::config::{Preset, SystemKind};

    fn micro(s: SystemKind) -> ConversionModel {
        ConversionModel::new(SystemConfig::preset(Preset::Micro, s), 3).unwrap()
    }

    fn ppg(t: usize) -> Tensor {
        Tensor::new(vec![t, 87], (0..t * 87).map(|i| ((i * 7) % 11) as f64 / 11.0).collect()).unwrap()
    }

    #[test]
    fn interpolation_rows_sum_to_one_and_keep_constants() {
        for (dst, src) in [(7, 3), (3, 7), (1, 4), (5, 1), (6, 6)] {
            let m = interpolation_matrix(dst, src);
            for i in 0..dst {
                assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
        let m = interpolation_matrix(6, 6);
        assert_eq!(m, Tensor::eye(6));
    }

    #[test]
    fn padding_repeats_last_frame() {
        let t = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let p = pad_to_multiple(&t, 2).unwrap();
        assert_eq!(p.shape(), &[4, 2]);
        assert_eq!(p.row(3), &[5.0, 6.0]);
    }

    #[test]
    fn teacher_forced_shapes() {
        for s in SystemKind::ALL {
            let m = micro(s);
            let mut g = Graph::new();
            let target = Tensor::full(vec![11, 80], 0.1);
            let input = ModelInput {
                ppg: &ppg(4),
                ref_mel: Some(&target),
                phonemes: Some(&[0, 3, 1]),
            };
            let out = m
                .forward(&mut g, &input, DecodeMode::TeacherForced(&target), &mut Mode::inference())
                .unwrap();
            assert_eq!(g.shape(out.decode.mel_after), &[11, 80]);
            assert_eq!(g.shape(out.decode.alignment), &[6, 4]);
            assert_eq!(g.shape(out.decode.stop_logits), &[6]);
            assert_eq!(g.shape(out.augmented)[1], m.config().augmented_width());
        }
    }

    #[test]
    fn missing_reference_is_a_usage_error() {
        let m = micro(SystemKind::S2);
        let mut g = Graph::new();
        let input = ModelInput {
            ppg: &ppg(4),
            ref_mel: None,
            phonemes: None,
        };
        let err = m
            .forward(&mut g, &input, DecodeMode::FreeRunning { max_steps: 2, use_stop: false }, &mut Mode::inference())
            .unwrap_err();
        assert!(matches!(err, Error::Usage(ref s) if s.contains("use_mel_ref")));
    }

    #[test]
    fn loss_on_one_frame_by_hand() {
        let mut g = Graph::new();
        let before = g.constant(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let after = g.constant(Tensor::from_rows(&[vec![0.5, 2.0]]).unwrap());
        let stop = g.constant(Tensor::vector(vec![0.3]));
        let out = DecodeOutput {
            mel_before: before,
            mel_after: after,
            stop_logits: stop,
            alignment: before,
            steps: 1,
        };
        let target = g.constant(Tensor::from_rows(&[vec![0.0, 2.0]]).unwrap());
        let ts = g.constant(Tensor::vector(vec![1.0]));
        let l = loss(&mut g, &out, target, ts, true).unwrap();
        let expect = 1.0 / 2.0 + 0.25 / 2.0 + ((1.0 + 0.3f64.exp()).ln() - 0.3);
        assert!((g.value(l).item() - expect).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_leaves_only_the_stop_term() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::full(vec![2, 3], 0.7));
        let stop = g.constant(Tensor::vector(vec![-2.0]));
        let out = DecodeOutput {
            mel_before: t,
            mel_after: t,
            stop_logits: stop,
            alignment: t,
            steps: 1,
        };
        let ts = g.constant(Tensor::vector(vec![0.0]));
        let l = loss(&mut g, &out, t, ts, true).unwrap();
        assert!((g.value(l).item() - (1.0 + (-2.0f64).exp()).ln()).abs() < 1e-15);
    }
}
