//! Alignment mechanisms: GMM attention and windowed location-sensitive
//! attention.
//!
//! GMM attention is purely location based. Per decoder step an MLP on the
//! attention-RNN state produces, for each of `K` components, an unnormalised
//! weight `ω = exp(ω̂)`, a positive mean increment `Δ = exp(Δ̂)` and a width
//! `σ`. Means advance by `μ_i = μ_{i-1} + Δ_i` and the weight on encoder
//! position `j` is
//!
//! ```text
//! α_j = Σ_k ω_k · exp(−(j − μ_k)² / (2σ_k²))
//! ```
//!
//! The weights are not normalised; the context vector is `αᵀ·memory`.

mod export;

use serde::{Deserialize, Serialize};

pub use export::{alignment_to_csv, alignment_to_pgm, write_alignment_csv, write_alignment_pgm};

use crate::error::{Error, Result};
use crate::numcore::{Graph, Padding, Tensor, Var};

/// How `σ` is derived from the MLP output `σ̂`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaForm {
    /// `σ = sqrt(exp(−σ̂) / 2)`, i.e. `2σ² = exp(−σ̂)`.
    #[default]
    Revised,
    /// `σ = exp(σ̂)`.
    Draft,
}

/// MLP parameters `V·tanh(W·s + b)` bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GmmWeights {
    /// `[S × H]`
    pub w: Var,
    /// `[H]`
    pub b: Var,
    /// `[H × 3K]`
    pub v: Var,
}

impl GmmWeights {
    pub fn components(&self, g: &Graph) -> Result<usize> {
        let out = g.shape(self.v)[1];
        if !out.is_multiple_of(3) {
            return Err(Error::dim(format!("GMM head width {out} is not 3K")));
        }
        Ok(out / 3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GmmOptions {
    pub sigma_form: SigmaForm,
    /// Divide α by its sum before it is returned.
    pub renormalize: bool,
}

impl Default for GmmOptions {
    fn default() -> Self {
        GmmOptions {
            sigma_form: SigmaForm::Revised,
            renormalize: false,
        }
    }
}

/// Running means plus the mixture parameters of the last step, all `[1 × K]`.
#[derive(Clone, Copy, Debug)]
pub struct GmmAttentionState {
    pub mu: Var,
    pub omega: Option<Var>,
    pub delta: Option<Var>,
    pub sigma: Option<Var>,
}

/// μ₀ = 0 for every component: attention starts at the head of the sequence.
pub fn gmm_init_state(g: &mut Graph, k: usize) -> Result<GmmAttentionState> {
    if k == 0 {
        return Err(Error::contract("GMM attention needs K ≥ 1"));
    }
    Ok(GmmAttentionState {
        mu: g.constant(Tensor::zeros(vec![1, k])),
        omega: None,
        delta: None,
        sigma: None,
    })
}

/// The `(ω̂, Δ̂, σ̂)` intermediates, each `[1 × K]`.
pub fn gmm_intermediates(g: &mut Graph, s: Var, w: &GmmWeights) -> Result<(Var, Var, Var)> {
    let k = w.components(g)?;
    let h = g.matmul(s, w.w)?;
    let h = g.add(h, w.b)?;
    let h = g.tanh(h);
    let out = g.matmul(h, w.v)?;
    Ok((
        g.narrow(out, 1, 0, k)?,
        g.narrow(out, 1, k, k)?,
        g.narrow(out, 1, 2 * k, k)?,
    ))
}

/// Evaluates the mixture at integer positions `0..enc_len` given `ω`, `μ`
/// and `2σ²`, all `[1 × K]`. Returns `[1 × enc_len]`.
pub fn gmm_mixture(g: &mut Graph, omega: Var, mu: Var, two_sigma_sq: Var, enc_len: usize) -> Result<Var> {
    let pos = g.constant(Tensor::new(
        vec![enc_len, 1],
        (0..enc_len).map(|j| j as f64).collect(),
    )?);
    let diff = g.sub(pos, mu)?;
    let sq = g.square(diff);
    let z = g.div(sq, two_sigma_sq)?;
    let z = g.neg(z);
    let e = g.exp(z);
    let weighted = g.mul(e, omega)?;
    let alpha = g.sum_axis(weighted, 1)?;
    g.reshape(alpha, vec![1, enc_len])
}

/// One GMM attention step. `s` is the attention-RNN state `[1 × S]`;
/// returns `α: [1 × enc_len]` and the advanced state.
pub fn gmm_step(
    g: &mut Graph,
    s: Var,
    state: &GmmAttentionState,
    enc_len: usize,
    w: &GmmWeights,
    opts: &GmmOptions,
    step: usize,
) -> Result<(Var, GmmAttentionState)> {
    if enc_len == 0 {
        return Err(Error::contract("enc_len must be ≥ 1"));
    }
    if !g.value(state.mu).is_finite() {
        return Err(Error::Numeric {
            step,
            what: "GMM means are not finite".into(),
        });
    }
    let (omega_hat, delta_hat, sigma_hat) = gmm_intermediates(g, s, w)?;
    let omega = g.exp(omega_hat);
    let delta = g.exp(delta_hat);
    let (sigma, two_sigma_sq) = match opts.sigma_form {
        SigmaForm::Revised => {
            let neg = g.neg(sigma_hat);
            let two_sigma_sq = g.exp(neg);
            let half = g.scale(two_sigma_sq, 0.5);
            (g.sqrt(half), two_sigma_sq)
        }
        SigmaForm::Draft => {
            let sigma = g.exp(sigma_hat);
            let sq = g.square(sigma);
            (sigma, g.scale(sq, 2.0))
        }
    };
    let mu = g.add(state.mu, delta)?;
    let mut alpha = gmm_mixture(g, omega, mu, two_sigma_sq, enc_len)?;
    if opts.renormalize {
        let total = g.sum(alpha);
        let total = g.add_scalar(total, 1e-12);
        alpha = g.div(alpha, total)?;
    }
    for (v, what) in [(alpha, "attention weights"), (mu, "means"), (two_sigma_sq, "widths")] {
        if !g.value(v).is_finite() {
            return Err(Error::Numeric {
                step,
                what: format!("non-finite GMM {what}"),
            });
        }
    }
    Ok((
        alpha,
        GmmAttentionState {
            mu,
            omega: Some(omega),
            delta: Some(delta),
            sigma: Some(sigma),
        },
    ))
}

/// Location-sensitive attention parameters bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LsaWeights {
    /// query projection `[S × A]`
    pub query: Var,
    /// memory projection `[D × A]`
    pub memory: Var,
    /// location filters over `[prev α, cumulative α]`: `[width × 2 × F]`
    pub loc_conv: Var,
    /// `[F × A]`
    pub loc_dense: Var,
    /// `[A]`
    pub bias: Var,
    /// `[A × 1]`
    pub v: Var,
}

/// Projects the encoder memory once per utterance: `[T × D] → [T × A]`.
pub fn lsa_process_memory(g: &mut Graph, memory: Var, w: &LsaWeights) -> Result<Var> {
    g.matmul(memory, w.memory)
}

/// Half-open window `[start, end)` of width `window` centred at
/// `round(step·len_ratio)`, shifted to stay inside `[0, enc_len)`.
pub fn lsa_window(step: usize, len_ratio: f64, window: usize, enc_len: usize) -> (usize, usize) {
    if window >= enc_len {
        return (0, enc_len);
    }
    let centre = ((step as f64 * len_ratio).round().max(0.0) as usize).min(enc_len - 1);
    let start = centre.saturating_sub(window / 2).min(enc_len - window);
    (start, start + window)
}

/// Windowed LSA state carried between decoder steps, `[1 × T]` each.
#[derive(Clone, Copy, Debug)]
pub struct LsaState {
    pub prev_alpha: Var,
    pub cumulative: Var,
}

/// Initial state: all weight on the first encoder position.
pub fn lsa_init_state(g: &mut Graph, enc_len: usize) -> Result<LsaState> {
    let mut a = vec![0.0; enc_len];
    a[0] = 1.0;
    let prev = g.constant(Tensor::new(vec![1, enc_len], a)?);
    Ok(LsaState {
        prev_alpha: prev,
        cumulative: prev,
    })
}

/// One windowed LSA step. Energies and the softmax are computed only inside
/// the window; weights outside it are exactly zero.
#[allow(clippy::too_many_arguments)]
pub fn lsa_windowed_step(
    g: &mut Graph,
    s: Var,
    state: &LsaState,
    processed_memory: Var,
    step: usize,
    len_ratio: f64,
    window: usize,
    w: &LsaWeights,
) -> Result<(Var, LsaState)> {
    if window == 0 {
        return Err(Error::contract("window size must be ≥ 1"));
    }
    let enc_len = g.shape(processed_memory)[0];
    if g.shape(state.prev_alpha) != [1, enc_len] {
        return Err(Error::dim(format!(
            "previous alignment {:?} does not match memory length {enc_len}",
            g.shape(state.prev_alpha)
        )));
    }
    let (start, end) = lsa_window(step, len_ratio, window, enc_len);
    let width = end - start;

    let loc_in = g.concat(&[state.prev_alpha, state.cumulative], 0)?;
    let loc_in = g.transpose(loc_in)?;
    let loc = g.conv1d(loc_in, w.loc_conv, 1, Padding::Same)?;
    let loc = g.narrow(loc, 0, start, width)?;
    let loc = g.matmul(loc, w.loc_dense)?;

    let q = g.matmul(s, w.query)?;
    let mem = g.narrow(processed_memory, 0, start, width)?;
    let e = g.add(mem, loc)?;
    let e = g.add(e, q)?;
    let e = g.add(e, w.bias)?;
    let e = g.tanh(e);
    let energies = g.matmul(e, w.v)?;
    let energies = g.reshape(energies, vec![1, width])?;
    let local = g.softmax(energies);
    let alpha = g.embed(local, 1, start, enc_len)?;
    let cumulative = g.add(state.cumulative, alpha)?;
    Ok((
        alpha,
        LsaState {
            prev_alpha: alpha,
            cumulative,
        },
    ))
}

/// Mean over decoder steps of `|Σ_j j·ᾱ_ij − oracle_i| / enc_len`, where `ᾱ`
/// is each row renormalised to sum 1. A row with no positive mass scores 1.
pub fn alignment_error(alpha: &Tensor, oracle: &[f64]) -> Result<f64> {
    if alpha.rank() != 2 {
        return Err(Error::dim(format!("alignment must be 2-D, got {:?}", alpha.shape())));
    }
    let (t_dec, enc_len) = (alpha.rows(), alpha.cols());
    if oracle.len() != t_dec {
        return Err(Error::dim(format!(
            "oracle has {} steps, alignment has {t_dec}",
            oracle.len()
        )));
    }
    let mut total = 0.0;
    for (i, &target) in oracle.iter().enumerate() {
        let row = alpha.row(i);
        let mass: f64 = row.iter().sum();
        total += if mass > 0.0 && mass.is_finite() {
            let centre: f64 = row.iter().enumerate().map(|(j, a)| j as f64 * a).sum::<f64>() / mass;
            (centre - target).abs() / enc_len as f64
        } else {
            1.0
        };
    }
    Ok(total / t_dec as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_gaussian_at_integers() {
        // K=1, ω=1, σ²=1/2 (2σ² = 1), μ'=2.
        let mut g = Graph::new();
        let omega = g.constant(Tensor::full(vec![1, 1], 1.0));
        let mu = g.constant(Tensor::full(vec![1, 1], 2.0));
        let two_sig = g.constant(Tensor::full(vec![1, 1], 1.0));
        let a = gmm_mixture(&mut g, omega, mu, two_sig, 5).unwrap();
        let expect = [(-4.0f64).exp(), (-1.0f64).exp(), 1.0, (-1.0f64).exp(), (-4.0f64).exp()];
        for (x, y) in g.value(a).data().iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    fn zero_head(g: &mut Graph, s: usize, k: usize) -> GmmWeights {
        GmmWeights {
            w: g.constant(Tensor::zeros(vec![s, 4])),
            b: g.constant(Tensor::zeros(vec![4])),
            v: g.constant(Tensor::zeros(vec![4, 3 * k])),
        }
    }

    #[test]
    fn zero_increment_advances_one_position() {
        let mut g = Graph::new();
        let w = zero_head(&mut g, 3, 2);
        let s = g.constant(Tensor::full(vec![1, 3], 0.7));
        let st = gmm_init_state(&mut g, 2).unwrap();
        assert_eq!(g.value(st.mu).data(), &[0.0, 0.0]);
        let (_, st) = gmm_step(&mut g, s, &st, 6, &w, &GmmOptions::default(), 0).unwrap();
        assert_eq!(g.value(st.mu).data(), &[1.0, 1.0]);
        let (_, st) = gmm_step(&mut g, s, &st, 6, &w, &GmmOptions::default(), 1).unwrap();
        assert_eq!(g.value(st.mu).data(), &[2.0, 2.0]);
        // σ̂ = 0 ⇒ σ = sqrt(1/2) in the revised form
        assert!((g.value(st.sigma.unwrap()).data()[0] - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn independent_initial_states() {
        let mut g = Graph::new();
        let a = gmm_init_state(&mut g, 3).unwrap();
        let b = gmm_init_state(&mut g, 3).unwrap();
        assert_ne!(a.mu, b.mu);
        assert!(gmm_init_state(&mut g, 0).is_err());
    }

    #[test]
    fn window_arithmetic() {
        assert_eq!(lsa_window(5, 0.7, 20, 10), (0, 10));
        assert_eq!(lsa_window(30, 1.0 / 3.0, 20, 100), (0, 20));
        assert_eq!(lsa_window(90, 1.0 / 3.0, 20, 100), (20, 40));
        assert_eq!(lsa_window(1000, 1.0, 20, 100), (80, 100));
        assert_eq!(lsa_window(3, 1.0, 1, 100), (3, 4));
    }

    #[test]
    fn alignment_error_examples() {
        let one_hot = Tensor::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(alignment_error(&one_hot, &[1.0, 2.0]).unwrap(), 0.0);
        let uniform = Tensor::from_rows(&[vec![1.0 / 3.0; 3]]).unwrap();
        let e = alignment_error(&uniform, &[0.0]).unwrap();
        assert!((e - 1.0 / 3.0).abs() < 1e-15);
        assert!(alignment_error(&uniform, &[0.0, 1.0]).is_err());
    }
}
