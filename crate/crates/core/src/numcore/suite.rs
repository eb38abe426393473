//! Finite-difference checks of every differentiable primitive and of the
//! recurrent cells, runnable as one suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cells::{gru_cell, lstm_cell, GruWeights, LstmWeights};
use super::gradcheck::{check_gradients, compare_with_fd, GradCheckOptions, GradCheckReport};
use super::{Graph, Padding, Tensor, Var};
use crate::error::Result;

/// Relative-error threshold every primitive must meet.
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// Name of the deliberately broken component added by
/// `SuiteOptions::inject_fault`.
pub const FAULT_COMPONENT: &str = "injected_fault";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SuiteScale {
    Micro,
    Small,
}

impl SuiteScale {
    fn base(self) -> usize {
        match self {
            SuiteScale::Micro => 3,
            SuiteScale::Small => 6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub scale: SuiteScale,
    pub seed: u64,
    /// Adds a component whose analytic gradient is wrong on purpose, to show
    /// the harness reports failures.
    pub inject_fault: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            scale: SuiteScale::Micro,
            seed: 11,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ComponentResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tol: f64,
}

impl ComponentResult {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tol)
    }
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor {
        self.uniform(shape, -1.0, 1.0)
    }

    /// Values bounded away from zero, for kinks at the origin.
    fn off_zero(&mut self, shape: &[usize]) -> Tensor {
        let t = self.uniform(shape, 0.2, 1.0);
        t.map(|v| if self.rng.gen::<bool>() { v } else { -v })
    }

    /// A shuffled grid: distinct values at least 0.1 apart, so a max never
    /// changes under a finite-difference nudge.
    fn distinct(&mut self, shape: &[usize]) -> Tensor {
        use rand::seq::SliceRandom;
        let n: usize = shape.iter().product();
        let mut data: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
        data.shuffle(&mut self.rng);
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    }
}

/// Reduces `y` to a scalar with fixed pseudo-random weights, so every
/// output coordinate carries a distinct gradient.
fn project(g: &mut Graph, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

fn cases(scale: SuiteScale, gen: &mut Gen) -> Vec<Case> {
    let n = scale.base();
    let m = n + 1;
    let mut v: Vec<Case> = Vec::new();
    macro_rules! unary {
        ($name:expr, $input:expr, $op:ident) => {
            v.push(($name, vec![$input], Box::new(|g, x| {
                let y = g.$op(x[0]);
                project(g, y)
            })));
        };
    }
    unary!("neg", gen.normal(&[n, m]), neg);
    unary!("exp", gen.normal(&[n, m]), exp);
    unary!("ln", gen.uniform(&[n, m], 0.5, 2.0), ln);
    unary!("tanh", gen.normal(&[n, m]), tanh);
    unary!("sigmoid", gen.normal(&[n, m]), sigmoid);
    unary!("relu", gen.off_zero(&[n, m]), relu);
    unary!("sqrt", gen.uniform(&[n, m], 0.5, 2.0), sqrt);
    unary!("square", gen.normal(&[n, m]), square);
    unary!("softplus", gen.normal(&[n, m]), softplus);

    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $op:ident) => {
            v.push(($name, vec![$a, $b], Box::new(|g, x| {
                let y = g.$op(x[0], x[1])?;
                project(g, y)
            })));
        };
    }
    binary!("add", gen.normal(&[n, m]), gen.normal(&[n, m]), add);
    binary!("add_broadcast", gen.normal(&[n, m]), gen.normal(&[m]), add);
    binary!("sub", gen.normal(&[n, m]), gen.normal(&[n, 1]), sub);
    binary!("mul", gen.normal(&[n, m]), gen.normal(&[1, m]), mul);
    binary!("div", gen.normal(&[n, m]), gen.uniform(&[n, m], 0.5, 2.0), div);
    binary!("matmul", gen.normal(&[n, m]), gen.normal(&[m, n + 2]), matmul);
    binary!("matmul_thin", gen.normal(&[1, 2 * m]), gen.normal(&[2 * m, n]), matmul);

    v.push(("scale", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.scale(x[0], -1.7);
        project(g, y)
    })));
    v.push(("add_scalar", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.add_scalar(x[0], 0.3);
        let y = g.square(y);
        project(g, y)
    })));
    v.push(("one_minus", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.one_minus(x[0]);
        project(g, y)
    })));
    v.push(("transpose", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.transpose(x[0])?;
        project(g, y)
    })));
    v.push(("sum", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.square(x[0]);
        Ok(g.sum(y))
    })));
    v.push(("mean", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.square(x[0]);
        Ok(g.mean(y))
    })));
    for axis in [0usize, 1] {
        v.push((
            if axis == 0 { "sum_axis0" } else { "sum_axis1" },
            vec![gen.normal(&[n, m])],
            Box::new(move |g, x| {
                let y = g.sum_axis(x[0], axis)?;
                let y = g.square(y);
                project(g, y)
            }),
        ));
    }
    v.push(("reshape", vec![gen.normal(&[n, m])], Box::new(move |g, x| {
        let y = g.reshape(x[0], vec![m, n])?;
        project(g, y)
    })));
    v.push(("concat", vec![gen.normal(&[n, m]), gen.normal(&[n, 2])], Box::new(|g, x| {
        let y = g.concat(&[x[0], x[1], x[0]], 1)?;
        project(g, y)
    })));
    v.push(("narrow", vec![gen.normal(&[n, m])], Box::new(move |g, x| {
        let y = g.narrow(x[0], 1, 1, m - 1)?;
        project(g, y)
    })));
    v.push(("embed", vec![gen.normal(&[n, m])], Box::new(move |g, x| {
        let y = g.embed(x[0], 0, 1, n + 3)?;
        project(g, y)
    })));
    v.push(("gather_rows", vec![gen.normal(&[n, m])], Box::new(move |g, x| {
        let y = g.gather_rows(x[0], &[n - 1, 0, n - 1, 1])?;
        project(g, y)
    })));
    v.push(("softmax", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let y = g.softmax(x[0]);
        project(g, y)
    })));
    v.push(("dropout", vec![gen.normal(&[n, m])], Box::new(|g, x| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = g.dropout(x[0], 0.4, &mut rng, true)?;
        project(g, y)
    })));
    for (name, stride, padding) in [
        ("conv1d_same", 1, Padding::Same),
        ("conv1d_valid_stride2", 2, Padding::Valid),
    ] {
        v.push((
            name,
            vec![gen.normal(&[n + 4, 2]), gen.normal(&[3, 2, n])],
            Box::new(move |g, x| {
                let y = g.conv1d(x[0], x[1], stride, padding)?;
                project(g, y)
            }),
        ));
    }
    v.push((
        "conv1d_even_width",
        vec![gen.normal(&[n + 2, 2]), gen.normal(&[4, 2, 2])],
        Box::new(|g, x| {
            let y = g.conv1d(x[0], x[1], 1, Padding::Same)?;
            project(g, y)
        }),
    ));
    for (name, stride) in [("conv2d", (1, 1)), ("conv2d_stride_3x2", (3, 2))] {
        v.push((
            name,
            vec![gen.normal(&[n + 2, m, 2]), gen.normal(&[3, 3, 2, 2])],
            Box::new(move |g, x| {
                let y = g.conv2d(x[0], x[1], stride)?;
                project(g, y)
            }),
        ));
    }
    v.push(("max_pool_time", vec![gen.distinct(&[n + 2, 3])], Box::new(|g, x| {
        let y = g.max_pool_time(x[0], 2)?;
        project(g, y)
    })));

    let h = n;
    let d = m;
    v.push((
        "gru_cell",
        vec![
            gen.normal(&[1, d]),
            gen.normal(&[1, h]),
            gen.normal(&[d, 3 * h]),
            gen.normal(&[h, 3 * h]),
            gen.normal(&[3 * h]),
            gen.normal(&[3 * h]),
        ],
        Box::new(|g, x| {
            let w = GruWeights {
                w_x: x[2],
                w_h: x[3],
                b_x: x[4],
                b_h: x[5],
            };
            let h1 = gru_cell(g, x[0], x[1], &w)?;
            let h2 = gru_cell(g, x[0], h1, &w)?;
            project(g, h2)
        }),
    ));
    v.push((
        "lstm_cell",
        vec![
            gen.normal(&[1, d]),
            gen.normal(&[1, h]),
            gen.normal(&[1, h]),
            gen.normal(&[d, 4 * h]),
            gen.normal(&[h, 4 * h]),
            gen.normal(&[4 * h]),
        ],
        Box::new(|g, x| {
            let w = LstmWeights {
                w_x: x[3],
                w_h: x[4],
                b: x[5],
            };
            let (h1, c1) = lstm_cell(g, x[0], x[1], x[2], &w)?;
            let (h2, c2) = lstm_cell(g, x[0], h1, c1, &w)?;
            let s = g.add(h2, c2)?;
            project(g, s)
        }),
    ));
    v
}

/// Runs the finite-difference suite over all primitives and cells.
pub fn primitive_suite(opts: &SuiteOptions) -> Result<Vec<ComponentResult>> {
    let mut gen = Gen {
        rng: ChaCha8Rng::seed_from_u64(opts.seed),
    };
    let fd = GradCheckOptions {
        seed: opts.seed,
        ..Default::default()
    };
    let mut out = Vec::new();
    for (name, inputs, f) in cases(opts.scale, &mut gen) {
        let report = check_gradients(&inputs, |g, x| f(g, x), &fd)?;
        out.push(ComponentResult {
            name: name.to_string(),
            report,
            tol: PRIMITIVE_TOL,
        });
    }
    if opts.inject_fault {
        out.push(ComponentResult {
            name: FAULT_COMPONENT.to_string(),
            report: faulty_component(&mut gen, &fd)?,
            tol: PRIMITIVE_TOL,
        });
    }
    Ok(out)
}

/// `sum(tanh(x))` checked against the gradient of `sum(x)`: a gradient bug
/// in miniature.
fn faulty_component(gen: &mut Gen, fd: &GradCheckOptions) -> Result<GradCheckReport> {
    let x = gen.normal(&[2, 3]);
    let wrong = vec![Tensor::full(vec![2, 3], 1.0)];
    let mut values = vec![x];
    compare_with_fd(
        &mut values,
        &wrong,
        |v| Ok(v[0].data().iter().map(|a| a.tanh()).sum()),
        fd,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let results = primitive_suite(&SuiteOptions::default()).unwrap();
        for r in &results {
            assert!(r.passes(), "{}: {:?}", r.name, r.report);
        }
        assert!(results.len() > 30);
    }

    #[test]
    fn injected_fault_is_reported() {
        let results = primitive_suite(&SuiteOptions {
            inject_fault: true,
            ..Default::default()
        })
        .unwrap();
        let fault = results.iter().find(|r| r.name == FAULT_COMPONENT).unwrap();
        assert!(!fault.passes());
        assert_eq!(results.iter().filter(|r| !r.passes()).count(), 1);
    }
}
