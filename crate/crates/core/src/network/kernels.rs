//! Dense row-major kernels. Matrices are `[rows, cols]`, weights `[in, out]`.

use crate::real::Real;

/// `y[rows, out] += x[rows, inn] * w[inn, out]`
pub fn matmul_acc<F: Real>(x: &[F], rows: usize, inn: usize, w: &[F], out: usize, y: &mut [F]) {
    debug_assert_eq!(x.len(), rows * inn);
    debug_assert_eq!(w.len(), inn * out);
    debug_assert_eq!(y.len(), rows * out);
    F::gemm(rows, inn, out, x, (inn as isize, 1), w, (out as isize, 1), F::one(), y, out as isize);
}

/// `x W + b` for every row.
pub fn affine<F: Real>(x: &[F], rows: usize, inn: usize, w: &[F], b: &[F]) -> Vec<F> {
    let out = b.len();
    let mut y = Vec::with_capacity(rows * out);
    for _ in 0..rows {
        y.extend_from_slice(b);
    }
    matmul_acc(x, rows, inn, w, out, &mut y);
    y
}

/// Backward of `y = x W + b`: accumulates `dW`, `db`, and `dx`.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward<F: Real>(
    x: &[F],
    rows: usize,
    inn: usize,
    w: &[F],
    dy: &[F],
    out: usize,
    dw: &mut [F],
    db: &mut [F],
    dx: Option<&mut [F]>,
) {
    for r in 0..rows {
        for (b, &g) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *b += g;
        }
    }
    // dW += x^T dy
    F::gemm(inn, rows, out, x, (1, inn as isize), dy, (out as isize, 1), F::one(), dw, out as isize);
    if let Some(dx) = dx {
        // dx += dy W^T
        F::gemm(rows, out, inn, dy, (out as isize, 1), w, (1, out as isize), F::one(), dx, inn as isize);
    }
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    // four partial sums keep the reduction vectorizable
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * c + k] * b[4 * c + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub const LN_EPS: f64 = 1e-5;

/// Per-row normalization statistics retained for the backward pass.
#[derive(Clone, Debug, Default)]
pub struct NormCache<F> {
    pub xhat: Vec<F>,
    pub rstd: Vec<F>,
}

pub fn layer_norm<F: Real>(x: &[F], rows: usize, width: usize, gain: &[F], bias: &[F]) -> (Vec<F>, NormCache<F>) {
    let eps = F::lit(LN_EPS);
    let n = F::from_usize(width).unwrap();
    let mut y = vec![F::zero(); rows * width];
    let mut xhat = vec![F::zero(); rows * width];
    let mut rstd = vec![F::zero(); rows];
    for r in 0..rows {
        let xr = &x[r * width..(r + 1) * width];
        let mean = xr.iter().copied().sum::<F>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for k in 0..width {
            let h = (xr[k] - mean) * rs;
            xhat[r * width + k] = h;
            y[r * width + k] = h * gain[k] + bias[k];
        }
    }
    (y, NormCache { xhat, rstd })
}

pub fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    rows: usize,
    width: usize,
    gain: &[F],
    dy: &[F],
    dgain: &mut [F],
    dbias: &mut [F],
    dx: &mut [F],
) {
    let n = F::from_usize(width).unwrap();
    let mut dxhat = vec![F::zero(); width];
    for r in 0..rows {
        let xh = &cache.xhat[r * width..(r + 1) * width];
        let dyr = &dy[r * width..(r + 1) * width];
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for k in 0..width {
            dgain[k] += dyr[k] * xh[k];
            dbias[k] += dyr[k];
            dxhat[k] = dyr[k] * gain[k];
            m1 += dxhat[k];
            m2 += dxhat[k] * xh[k];
        }
        m1 /= n;
        m2 /= n;
        let rs = cache.rstd[r];
        let dxr = &mut dx[r * width..(r + 1) * width];
        for k in 0..width {
            dxr[k] += rs * (dxhat[k] - m1 - xh[k] * m2);
        }
    }
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Numerically stable softmax in place.
pub fn softmax_in_place<F: Real>(v: &mut [F]) {
    let max = v.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// Sinusoidal embedding of an integer step: first half sines, second half cosines.
pub fn sinusoidal_embedding<F: Real>(t: u32, dim: usize) -> Vec<F> {
    let half = dim / 2;
    let mut out = vec![F::zero(); dim];
    for j in 0..half {
        let freq = (-(10_000f64.ln()) * j as f64 / half.max(1) as f64).exp();
        let arg = t as f64 * freq;
        out[j] = F::lit(arg.sin());
        out[half + j] = F::lit(arg.cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        // [1 2; 3 4] * [1 0 1; 0 1 1]
        let x = [1.0, 2.0, 3.0, 4.0];
        let w = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let y = affine(&x, 2, 2, &w, &[0.5, 0.0, 0.0]);
        assert_eq!(y, vec![1.5, 2.0, 3.0, 3.5, 4.0, 7.0]);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (y, _) = layer_norm(&x, 1, 4, &[1.0; 4], &[0.0; 4]);
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut v = [1.0f64, 5.0, 2.0, -3.0];
        softmax_in_place(&mut v);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v[1] > v[2] && v[2] > v[0]);
    }

    #[test]
    fn silu_grad_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 4.0] {
            let h = 1e-6;
            let fd = (silu(x + h) - silu(x - h)) / (2.0 * h);
            assert!((fd - silu_grad(x)).abs() < 1e-8);
        }
    }
}
