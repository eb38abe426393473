//! Gated recurrent cells built from graph primitives.
//!
//! States and inputs are `[1 × D]` row vectors. Gate blocks are laid out
//! contiguously along the last axis: GRU `[reset | update | candidate]`,
//! LSTM `[input | forget | cell | output]`.

use super::{Graph, Var};
use crate::error::{Error, Result};

/// Handles to GRU weights bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct GruWeights {
    /// `[Din × 3H]`
    pub w_x: Var,
    /// `[H × 3H]`
    pub w_h: Var,
    /// `[3H]`
    pub b_x: Var,
    /// `[3H]`
    pub b_h: Var,
}

/// Handles to LSTM weights bound on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LstmWeights {
    /// `[Din × 4H]`
    pub w_x: Var,
    /// `[H × 4H]`
    pub w_h: Var,
    /// `[4H]`
    pub b: Var,
}

fn hidden(g: &Graph, w_h: Var, gates: usize) -> Result<usize> {
    let s = g.shape(w_h);
    if s.len() != 2 || s[1] != gates * s[0] {
        return Err(Error::dim(format!(
            "recurrent weight {s:?} is not [H × {gates}H]"
        )));
    }
    Ok(s[0])
}

fn as_row(g: &mut Graph, v: Var) -> Result<Var> {
    match g.shape(v).len() {
        1 => {
            let n = g.shape(v)[0];
            g.reshape(v, vec![1, n])
        }
        2 if g.shape(v)[0] == 1 => Ok(v),
        _ => Err(Error::dim(format!("expected a row vector, got {:?}", g.shape(v)))),
    }
}

/// GRU input projection for a whole sequence: `X·W_x + b_x`, `[T × 3H]`.
pub fn gru_project(g: &mut Graph, xs: Var, w: &GruWeights) -> Result<Var> {
    let p = g.matmul(xs, w.w_x)?;
    g.add(p, w.b_x)
}

/// One GRU step given the precomputed input projection row `[1 × 3H]`.
pub fn gru_step(g: &mut Graph, x_proj: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let hd = hidden(g, w.w_h, 3)?;
    let h = as_row(g, h)?;
    if g.shape(h)[1] != hd || g.shape(x_proj) != [1, 3 * hd] {
        return Err(Error::dim(format!(
            "gru step: state {:?}, projection {:?}, hidden {hd}",
            g.shape(h),
            g.shape(x_proj)
        )));
    }
    let hh = g.matmul(h, w.w_h)?;
    let hh = g.add(hh, w.b_h)?;
    let xr = g.narrow(x_proj, 1, 0, 2 * hd)?;
    let hr = g.narrow(hh, 1, 0, 2 * hd)?;
    let rz = g.add(xr, hr)?;
    let rz = g.sigmoid(rz);
    let r = g.narrow(rz, 1, 0, hd)?;
    let z = g.narrow(rz, 1, hd, hd)?;
    let xn = g.narrow(x_proj, 1, 2 * hd, hd)?;
    let hn = g.narrow(hh, 1, 2 * hd, hd)?;
    let rhn = g.mul(r, hn)?;
    let n = g.add(xn, rhn)?;
    let n = g.tanh(n);
    // h' = n + z ⊙ (h - n)
    let d = g.sub(h, n)?;
    let zd = g.mul(z, d)?;
    g.add(n, zd)
}

/// Standard GRU cell: `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_cell(g: &mut Graph, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let x = as_row(g, x)?;
    let proj = gru_project(g, x, w)?;
    gru_step(g, proj, h, w)
}

/// LSTM input projection for a whole sequence: `X·W_x + b`, `[T × 4H]`.
pub fn lstm_project(g: &mut Graph, xs: Var, w: &LstmWeights) -> Result<Var> {
    let p = g.matmul(xs, w.w_x)?;
    g.add(p, w.b)
}

/// One LSTM step given the precomputed input projection row; returns `(h', c')`.
pub fn lstm_step(g: &mut Graph, x_proj: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hd = hidden(g, w.w_h, 4)?;
    let h = as_row(g, h)?;
    let c = as_row(g, c)?;
    if g.shape(h)[1] != hd || g.shape(c)[1] != hd || g.shape(x_proj) != [1, 4 * hd] {
        return Err(Error::dim(format!(
            "lstm step: h {:?}, c {:?}, projection {:?}, hidden {hd}",
            g.shape(h),
            g.shape(c),
            g.shape(x_proj)
        )));
    }
    let hh = g.matmul(h, w.w_h)?;
    let gates = g.add(x_proj, hh)?;
    let ifo_pre = g.narrow(gates, 1, 0, 2 * hd)?;
    let if_ = g.sigmoid(ifo_pre);
    let i = g.narrow(if_, 1, 0, hd)?;
    let f = g.narrow(if_, 1, hd, hd)?;
    let cand = g.narrow(gates, 1, 2 * hd, hd)?;
    let cand = g.tanh(cand);
    let o = g.narrow(gates, 1, 3 * hd, hd)?;
    let o = g.sigmoid(o);
    let fc = g.mul(f, c)?;
    let ic = g.mul(i, cand)?;
    let c_next = g.add(fc, ic)?;
    let tc = g.tanh(c_next);
    let h_next = g.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Standard LSTM cell; returns `(h', c')`.
pub fn lstm_cell(g: &mut Graph, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let x = as_row(g, x)?;
    let proj = lstm_project(g, x, w)?;
    lstm_step(g, proj, h, c, w)
}
