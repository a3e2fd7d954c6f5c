//! Raw numeric kernels over flat row-major buffers.

/// Below this many multiply-adds a plain loop beats packing for gemm.
const SMALL_GEMM: usize = 4096;

/// A read-only strided matrix view.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rs: isize,
    pub cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        MatRef { data, rs: 1, cs: cols as isize }
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[(i as isize * self.rs + j as isize * self.cs) as usize]
    }
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n` row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    if m * k * n <= SMALL_GEMM {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a.at(i, p) * b.at(p, j);
                }
                let slot = &mut c[i * n + j];
                *slot = if beta == 0.0 { acc } else { beta * *slot + acc };
            }
        }
        return;
    }
    // SAFETY: strides describe in-bounds views of the given slices; c is a
    // dense row-major m x n buffer that we borrow mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides for reading an input of `shape` while walking `out_shape`; broadcast axes get 0.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let own = strides(shape);
    let mut s = vec![0; rank];
    for i in 0..shape.len() {
        let o = rank - shape.len() + i;
        if shape[i] != 1 {
            s[o] = own[i];
        }
    }
    s
}

/// Walks every element of `out_shape`, calling `f(out_index, offset_a, offset_b)`.
pub(crate) fn for_each_broadcast(
    out_shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out_shape.iter().product();
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for i in 0..total {
        f(i, oa, ob);
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            oa -= sa[d] * out_shape[d];
            ob -= sb[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Dilated causal convolution along time, channels-last.
///
/// `x` is `rows x t_in x c_in`, `kernel` is stored as `[s][ci][co]`, the output is
/// `rows x t_out x c_out`. Each output accumulates over `s` then `ci`, always from 0.0.
pub(crate) fn conv_time_forward(
    x: &[f64],
    kernel_sic: &[f64],
    rows: usize,
    t_in: usize,
    c_in: usize,
    c_out: usize,
    taps: usize,
    dilation: usize,
) -> Vec<f64> {
    let reach = dilation * (taps - 1);
    let t_out = t_in - reach;
    let mut out = vec![0.0; rows * t_out * c_out];
    for r in 0..rows {
        for t in 0..t_out {
            let acc = &mut out[(r * t_out + t) * c_out..(r * t_out + t + 1) * c_out];
            let tau = t + reach;
            for s in 0..taps {
                let src = tau - dilation * s;
                let xrow = &x[(r * t_in + src) * c_in..(r * t_in + src + 1) * c_in];
                for (ci, &xv) in xrow.iter().enumerate() {
                    let w = &kernel_sic[(s * c_in + ci) * c_out..(s * c_in + ci + 1) * c_out];
                    for (a, &wv) in acc.iter_mut().zip(w) {
                        *a += wv * xv;
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv_time_forward`]; `kernel_osi` is the kernel stored `[co][s][ci]`.
/// Returns (dx, dkernel in `[co][ci][s]` order).
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_time_backward(
    x: &[f64],
    kernel_osi: &[f64],
    g: &[f64],
    rows: usize,
    t_in: usize,
    c_in: usize,
    c_out: usize,
    taps: usize,
    dilation: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let reach = dilation * (taps - 1);
    let t_out = t_in - reach;
    let mut dx = want_dx.then(|| vec![0.0; rows * t_in * c_in]);
    // accumulated as [co][s][ci], reordered at the end
    let mut dk_osi = want_dk.then(|| vec![0.0; c_out * taps * c_in]);
    for r in 0..rows {
        for t in 0..t_out {
            let grow = &g[(r * t_out + t) * c_out..(r * t_out + t + 1) * c_out];
            let tau = t + reach;
            for s in 0..taps {
                let src = tau - dilation * s;
                let xoff = (r * t_in + src) * c_in;
                for (co, &gv) in grow.iter().enumerate() {
                    if gv == 0.0 {
                        continue;
                    }
                    let koff = (co * taps + s) * c_in;
                    if let Some(dx) = dx.as_mut() {
                        let w = &kernel_osi[koff..koff + c_in];
                        for (d, &wv) in dx[xoff..xoff + c_in].iter_mut().zip(w) {
                            *d += wv * gv;
                        }
                    }
                    if let Some(dk) = dk_osi.as_mut() {
                        let xrow = &x[xoff..xoff + c_in];
                        for (d, &xv) in dk[koff..koff + c_in].iter_mut().zip(xrow) {
                            *d += gv * xv;
                        }
                    }
                }
            }
        }
    }
    let dk = dk_osi.map(|osi| {
        let mut ois = vec![0.0; osi.len()];
        for co in 0..c_out {
            for s in 0..taps {
                for ci in 0..c_in {
                    ois[(co * c_in + ci) * taps + s] = osi[(co * taps + s) * c_in + ci];
                }
            }
        }
        ois
    });
    (dx, dk)
}
