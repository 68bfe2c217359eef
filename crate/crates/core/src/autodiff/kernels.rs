//! Forward and backward numeric kernels on raw row-major buffers.
//!
//! The graph in [`super::graph`] owns bookkeeping; everything here is plain
//! arithmetic over slices.

/// View of a row-major matrix, optionally read transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after the optional transpose.
    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Row and column strides of the logical matrix.
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out += a · b` where `out` is row-major `m × n`.
pub(crate) fn gemm_acc(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64]) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(out.len(), m * n, "gemm output size");
    assert_eq!(a.data.len(), a.rows * a.cols);
    assert_eq!(b.data.len(), b.rows * b.cols);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: buffer lengths are asserted above and the strides describe
    // in-bounds row-major (or transposed row-major) layouts of those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward(y: &[f64], dy: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut dx = vec![0.0; rows * cols];
    for r in 0..rows {
        let s = r * cols..(r + 1) * cols;
        let (yr, dyr) = (&y[s.clone()], &dy[s.clone()]);
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &g) in dx[s].iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - dot);
        }
    }
    dx
}

/// Per-row normalization statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub(crate) struct NormCache {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(
    x: &[f64],
    rows: usize,
    cols: usize,
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, NormCache) {
    let mut y = vec![0.0; rows * cols];
    let mut x_hat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    let n = cols as f64;
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[r] = is;
        for j in 0..cols {
            let h = (row[j] - mean) * is;
            x_hat[r * cols + j] = h;
            y[r * cols + j] = gamma[j] * h + beta[j];
        }
    }
    (y, NormCache { x_hat, inv_std })
}

/// Returns `(dx, dgamma, dbeta)`.
pub(crate) fn layer_norm_backward(
    dy: &[f64],
    cache: &NormCache,
    gamma: &[f64],
    rows: usize,
    cols: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; rows * cols];
    let mut dgamma = vec![0.0; cols];
    let mut dbeta = vec![0.0; cols];
    let n = cols as f64;
    let mut dxh = vec![0.0; cols];
    for r in 0..rows {
        let s = r * cols;
        let mut mean_dxh = 0.0;
        let mut mean_dxh_xh = 0.0;
        for j in 0..cols {
            let g = dy[s + j];
            let h = cache.x_hat[s + j];
            dgamma[j] += g * h;
            dbeta[j] += g;
            dxh[j] = g * gamma[j];
            mean_dxh += dxh[j];
            mean_dxh_xh += dxh[j] * h;
        }
        mean_dxh /= n;
        mean_dxh_xh /= n;
        for j in 0..cols {
            dx[s + j] = cache.inv_std[r] * (dxh[j] - mean_dxh - cache.x_hat[s + j] * mean_dxh_xh);
        }
    }
    (dx, dgamma, dbeta)
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// 3×3 convolution, stride 1, zero padding 1.
///
/// `x` is `n×n×d`, `kernels` is `c×3×3×d`, output is `n×n×c`.
pub(crate) fn conv3x3(x: &[f64], n: usize, d: usize, kernels: &[f64], bias: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n * c];
    for i in 0..n {
        for j in 0..n {
            let o = &mut out[(i * n + j) * c..(i * n + j + 1) * c];
            o.copy_from_slice(bias);
            for (di, ii) in neighbours(i, n) {
                for (dj, jj) in neighbours(j, n) {
                    let px = &x[(ii * n + jj) * d..(ii * n + jj + 1) * d];
                    for (ch, acc) in o.iter_mut().enumerate() {
                        let k = &kernels[((ch * 3 + di) * 3 + dj) * d..][..d];
                        *acc += dot(k, px);
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dkernels, dbias)`.
pub(crate) fn conv3x3_backward(
    dy: &[f64],
    x: &[f64],
    n: usize,
    d: usize,
    kernels: &[f64],
    c: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; n * n * d];
    let mut dk = vec![0.0; c * 9 * d];
    let mut db = vec![0.0; c];
    for i in 0..n {
        for j in 0..n {
            let g = &dy[(i * n + j) * c..(i * n + j + 1) * c];
            for (b, &gv) in db.iter_mut().zip(g) {
                *b += gv;
            }
            for (di, ii) in neighbours(i, n) {
                for (dj, jj) in neighbours(j, n) {
                    let base = (ii * n + jj) * d;
                    for (ch, &gv) in g.iter().enumerate() {
                        if gv == 0.0 {
                            continue;
                        }
                        let koff = ((ch * 3 + di) * 3 + dj) * d;
                        for t in 0..d {
                            dk[koff + t] += gv * x[base + t];
                            dx[base + t] += gv * kernels[koff + t];
                        }
                    }
                }
            }
        }
    }
    (dx, dk, db)
}

/// In-bounds `(kernel_offset, source_index)` pairs for one spatial axis.
fn neighbours(i: usize, n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..3usize).filter_map(move |k| {
        let src = i as isize + k as isize - 1;
        (src >= 0 && (src as usize) < n).then_some((k, src as usize))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `log σ(x)` without overflow.
pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..8).map(|v| (v as f64).sin()).collect(); // 4x2
        let mut out = vec![0.0; 6];
        gemm_acc(MatRef::new(&a, 3, 4), MatRef::new(&b, 4, 2), &mut out);
        let expect = naive(&a, &b, 3, 4, 2);
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        // (bᵀ)ᵀ path: store b transposed and read it back transposed.
        let bt: Vec<f64> = (0..2)
            .flat_map(|j| (0..4).map(move |i| (i, j)))
            .map(|(i, j)| b[i * 2 + j])
            .collect();
        let mut out2 = vec![0.0; 6];
        gemm_acc(MatRef::new(&a, 3, 4), MatRef::new(&bt, 2, 4).t(), &mut out2);
        assert_eq!(out, out2);
    }

    #[test]
    fn log_sigmoid_is_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(800.0).abs() < 1e-300);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-9);
    }
}
