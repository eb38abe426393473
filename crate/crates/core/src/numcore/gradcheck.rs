//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor of [`rel_error`]; near-zero gradients are compared on
/// an absolute scale of this size instead of blowing up the ratio.
pub const REL_FLOOR: f64 = 1e-3;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    let e = (analytic - numeric).abs() / denom;
    if e.is_nan() {
        f64::INFINITY
    } else {
        e
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Check at most this many coordinates per input tensor (seeded sample).
    pub max_coords_per_input: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: FD_STEP,
            max_coords_per_input: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.coords_checked > 0 && self.max_rel_err < tol
    }

    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst;
        }
        self.max_abs_err = self.max_abs_err.max(other.max_abs_err);
        self.coords_checked += other.coords_checked;
    }
}

fn coords(len: usize, limit: Option<usize>, seed: u64) -> Vec<usize> {
    match limit {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, len, k).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

/// Compares `analytic[i]` against central differences of `eval` taken by
/// perturbing `values[i]` in place. `values` is restored on return.
pub fn compare_with_fd<E>(
    values: &mut [Tensor],
    analytic: &[Tensor],
    mut eval: E,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor]) -> Result<f64>,
{
    if values.len() != analytic.len() {
        return Err(Error::contract("one analytic gradient per input is required"));
    }
    let mut report = GradCheckReport::default();
    let h = opts.step;
    for i in 0..values.len() {
        if values[i].shape() != analytic[i].shape() {
            return Err(Error::dim(format!(
                "gradient shape {:?} differs from input {:?}",
                analytic[i].shape(),
                values[i].shape()
            )));
        }
        for e in coords(values[i].len(), opts.max_coords_per_input, opts.seed ^ i as u64) {
            let orig = values[i].data()[e];
            values[i].data_mut()[e] = orig + h;
            let plus = eval(values);
            values[i].data_mut()[e] = orig - h;
            let minus = eval(values);
            values[i].data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let a = analytic[i].data()[e];
            let rel = rel_error(a, numeric);
            report.coords_checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if rel > report.max_rel_err || (rel.is_infinite() && report.max_rel_err.is_finite()) {
                report.max_rel_err = rel;
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}

/// Gradient check of a scalar function built on a graph.
///
/// `f` receives one handle per input and must return a scalar node.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
        .collect();
    let mut values = inputs.to_vec();
    compare_with_fd(
        &mut values,
        &analytic,
        |vals| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            Ok(g.value(out).item())
        },
        opts,
    )
}
