//! Dense kernels shared by the graph ops.

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t`/`b_t` mean the operand is stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    if !accumulate {
        c[..m * n].fill(0.0);
    }
    if m <= THIN || k <= THIN {
        thin_gemm(m, k, n, a, a_t, b, b_t, c);
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Below this many rows (or inner terms) the packing done by the blocked
/// kernel costs more than the product itself; recurrent steps multiply
/// single rows by weight matrices all the time.
const THIN: usize = 4;

/// Accumulating `c += op(a)·op(b)` with plain loops, for thin operands.
#[allow(clippy::too_many_arguments)]
fn thin_gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    let at = |i: usize, p: usize| if a_t { a[p * m + i] } else { a[i * k + p] };
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        if b_t {
            for (j, cj) in row.iter_mut().enumerate() {
                let bj = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for (p, bp) in bj.iter().enumerate() {
                    s += at(i, p) * bp;
                }
                *cj += s;
            }
        } else {
            for p in 0..k {
                let x = at(i, p);
                for (cj, bj) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cj += x * bj;
                }
            }
        }
    }
}

/// Output length and leading pad for one axis of a strided window op.
///
/// "same" pads symmetrically with the odd pad on the trailing side.
pub(crate) fn same_geometry(len: usize, k: usize, stride: usize) -> (usize, usize) {
    let out = len.div_ceil(stride);
    let needed = ((out - 1) * stride + k).saturating_sub(len);
    (out, needed / 2)
}
