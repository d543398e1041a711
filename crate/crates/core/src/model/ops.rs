//! Dense kernels shared by the forward, backward and decoding paths.

use super::LN_EPS;

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Row-major view whose rows are `stride` apart.
    pub fn rows(data: &'a [f64], stride: usize) -> Self {
        Self { data, rs: stride, cs: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n] + beta * c`, with `c` row-major at row
/// stride `ldc`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View<'_>, b: View<'_>, beta: f64, c: &mut [f64], ldc: usize) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!((m - 1) * ldc + n <= c.len(), "output out of bounds");
    // SAFETY: every index touched by dgemm was bounds-checked above, and `c`
    // is a unique borrow that cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Gain-only layer norm over each row of `x` (`rows x d`). Returns the
/// output together with the normalized input and per-row inverse std.
pub(crate) fn layer_norm(x: &[f64], gain: &[f64], d: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let rows = x.len() / d;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = inv;
        for i in 0..d {
            let h = (row[i] - mean) * inv;
            xhat[r * d + i] = h;
            y[r * d + i] = h * gain[i];
        }
    }
    (y, xhat, rstd)
}

/// Backward of [`layer_norm`]: accumulates into `dgain` and adds the input
/// gradient into `dx`.
pub(crate) fn layer_norm_backward(dy: &[f64], xhat: &[f64], rstd: &[f64], gain: &[f64], d: usize, dgain: &mut [f64], dx: &mut [f64]) {
    let rows = rstd.len();
    let mut dxhat = vec![0.0; d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for i in 0..d {
            dgain[i] += dyr[i] * xr[i];
            dxhat[i] = dyr[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xr[i];
        }
        mean_d /= d as f64;
        mean_dx /= d as f64;
        let out = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            out[i] += rstd[r] * (dxhat[i] - mean_d - xr[i] * mean_dx);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let inner = GELU_C * (u + GELU_A * u * u * u);
    let th = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * GELU_A * u * u);
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * dinner
}

/// In-place softmax over the first `len` entries of `row`.
pub(crate) fn softmax_prefix(row: &mut [f64], len: usize) {
    let max = row[..len].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in &mut row[..len] {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in &mut row[..len] {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transpose() {
        let a: Vec<f64> = (0..6).map(|i| i as f64).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|i| (i * i) as f64 - 3.0).collect(); // 2x3
        let mut c = vec![0.0; 4];
        // a (2x3) * b^T (3x2)
        gemm(2, 3, 2, View::rows(&a, 3), View::rows(&b, 3).t(), 0.0, &mut c, 2);
        for i in 0..2 {
            for j in 0..2 {
                let naive: f64 = (0..3).map(|k| a[i * 3 + k] * b[j * 3 + k]).sum();
                assert_eq!(c[i * 2 + j], naive);
            }
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = [1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.25, 8.0];
        let (y, _, _) = layer_norm(&x, &[1.0; 4], 4);
        for r in 0..2 {
            let row = &y[r * 4..r * 4 + 4];
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }
}
