//! Forward and reverse passes of the individual operators. All operators act
//! on the valid rows only; everything past a sequence's valid length is
//! implicitly zero for convolutions and absent for pooling.

use super::tensor::{gemm_acc, Mat, Operand, Real};

/// Same-length 1D convolution. `weight` is laid out `[k][c_in][c_out]`.
pub(crate) fn conv_forward<F: Real>(x: &Mat<F>, weight: &[F], bias: &[F], k: usize) -> Mat<F> {
    let (t, c_in) = (x.rows, x.cols);
    let c_out = bias.len();
    debug_assert_eq!(weight.len(), k * c_in * c_out);
    let mut out = Mat::zeros(t, c_out);
    for row in out.data.chunks_exact_mut(c_out) {
        row.copy_from_slice(bias);
    }
    let pad = (k / 2) as isize;
    for j in 0..k {
        let o = j as isize - pad;
        let lo = (-o).max(0) as usize;
        let hi = (t as isize - o).min(t as isize).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let src = (lo as isize + o) as usize;
        gemm_acc(
            hi - lo,
            c_in,
            c_out,
            Operand::row_major(&x.data, src * c_in, c_in),
            Operand::row_major(weight, j * c_in * c_out, c_out),
            &mut out.data,
            lo * c_out,
            c_out,
        );
    }
    out
}

/// Accumulates weight and bias gradients and returns the input gradient.
pub(crate) fn conv_backward<F: Real>(
    x: &Mat<F>,
    weight: &[F],
    k: usize,
    dout: &Mat<F>,
    dweight: &mut [F],
    dbias: &mut [F],
    need_dx: bool,
) -> Option<Mat<F>> {
    let (t, c_in) = (x.rows, x.cols);
    let c_out = dout.cols;
    for row in dout.data.chunks_exact(c_out) {
        for (b, g) in dbias.iter_mut().zip(row) {
            *b += *g;
        }
    }
    let mut dx = need_dx.then(|| Mat::zeros(t, c_in));
    let pad = (k / 2) as isize;
    for j in 0..k {
        let o = j as isize - pad;
        let lo = (-o).max(0) as usize;
        let hi = (t as isize - o).min(t as isize).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let src = (lo as isize + o) as usize;
        let len = hi - lo;
        // dW_j += x[src..]ᵀ · dout[lo..]
        gemm_acc(
            c_in,
            len,
            c_out,
            Operand::transposed(&x.data, src * c_in, c_in),
            Operand::row_major(&dout.data, lo * c_out, c_out),
            dweight,
            j * c_in * c_out,
            c_out,
        );
        if let Some(dx) = dx.as_mut() {
            // dx[src..] += dout[lo..] · W_jᵀ
            gemm_acc(
                len,
                c_out,
                c_in,
                Operand::row_major(&dout.data, lo * c_out, c_out),
                Operand::transposed(weight, j * c_in * c_out, c_out),
                &mut dx.data,
                src * c_in,
                c_in,
            );
        }
    }
    dx
}

pub(crate) struct NormCache<F> {
    pub xhat: Mat<F>,
    pub inv_std: Vec<F>,
}

/// Layer normalisation over channels, independently per time step.
pub(crate) fn layer_norm_forward<F: Real>(x: &Mat<F>, gain: &[F], offset: &[F], eps: F) -> (Mat<F>, NormCache<F>) {
    let c = x.cols;
    let cf = F::from_usize(c).unwrap();
    let mut xhat = Mat::zeros(x.rows, c);
    let mut y = Mat::zeros(x.rows, c);
    let mut inv_std = Vec::with_capacity(x.rows);
    for t in 0..x.rows {
        let row = x.row(t);
        let mean = row.iter().copied().sum::<F>() / cf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
        let inv = F::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(t);
        for (h, &v) in xh.iter_mut().zip(row) {
            *h = (v - mean) * inv;
        }
        let yr = &mut y.data[t * c..(t + 1) * c];
        for i in 0..c {
            yr[i] = xhat.data[t * c + i] * gain[i] + offset[i];
        }
    }
    (y, NormCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward<F: Real>(
    cache: &NormCache<F>,
    gain: &[F],
    dy: &Mat<F>,
    dgain: &mut [F],
    doffset: &mut [F],
) -> Mat<F> {
    let c = dy.cols;
    let cf = F::from_usize(c).unwrap();
    let mut dx = Mat::zeros(dy.rows, c);
    let mut dxhat = vec![F::zero(); c];
    for t in 0..dy.rows {
        let g = dy.row(t);
        let xh = cache.xhat.row(t);
        let mut mean_d = F::zero();
        let mut mean_dx = F::zero();
        for i in 0..c {
            dgain[i] += g[i] * xh[i];
            doffset[i] += g[i];
            dxhat[i] = g[i] * gain[i];
            mean_d += dxhat[i];
            mean_dx += dxhat[i] * xh[i];
        }
        mean_d /= cf;
        mean_dx /= cf;
        let inv = cache.inv_std[t];
        for (i, out) in dx.row_mut(t).iter_mut().enumerate() {
            *out = inv * (dxhat[i] - mean_d - xh[i] * mean_dx);
        }
    }
    dx
}

pub(crate) fn relu_inplace<F: Real>(x: &mut Mat<F>) {
    for v in &mut x.data {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

/// Zeroes `dy` wherever the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<F: Real>(y: &Mat<F>, dy: &mut Mat<F>) {
    for (g, &v) in dy.data.iter_mut().zip(&y.data) {
        if v <= F::zero() {
            *g = F::zero();
        }
    }
}

/// Kernel-2 stride-2 max pooling over the valid rows. A trailing unpaired
/// row pools alone. Returns the pooled map and the winning source row of
/// every output element.
pub(crate) fn max_pool_forward<F: Real>(x: &Mat<F>) -> (Mat<F>, Vec<u32>) {
    let c = x.cols;
    let out_len = x.rows.div_ceil(2);
    let mut out = Mat::zeros(out_len, c);
    let mut arg = vec![0u32; out_len * c];
    for j in 0..out_len {
        let a = 2 * j;
        let b = a + 1;
        let ra = x.row(a);
        let orow = &mut out.data[j * c..(j + 1) * c];
        let arow = &mut arg[j * c..(j + 1) * c];
        if b < x.rows {
            let rb = x.row(b);
            for i in 0..c {
                if rb[i] > ra[i] {
                    orow[i] = rb[i];
                    arow[i] = b as u32;
                } else {
                    orow[i] = ra[i];
                    arow[i] = a as u32;
                }
            }
        } else {
            orow.copy_from_slice(ra);
            arow.fill(a as u32);
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward<F: Real>(in_rows: usize, arg: &[u32], dout: &Mat<F>, dx: &mut Mat<F>) {
    let c = dout.cols;
    debug_assert_eq!(dx.rows, in_rows);
    for (idx, (&g, &src)) in dout.data.iter().zip(arg).enumerate() {
        dx.data[src as usize * c + idx % c] += g;
    }
}

/// Kernel-2 stride-2 average pooling dividing by the number of valid rows in
/// each window.
pub(crate) fn avg_pool_forward<F: Real>(x: &Mat<F>) -> Mat<F> {
    let c = x.cols;
    let out_len = x.rows.div_ceil(2);
    let half = F::lit(0.5);
    let mut out = Mat::zeros(out_len, c);
    for j in 0..out_len {
        let a = 2 * j;
        let orow = &mut out.data[j * c..(j + 1) * c];
        if a + 1 < x.rows {
            let (ra, rb) = (x.row(a), x.row(a + 1));
            for i in 0..c {
                orow[i] = (ra[i] + rb[i]) * half;
            }
        } else {
            orow.copy_from_slice(x.row(a));
        }
    }
    out
}

pub(crate) fn avg_pool_backward<F: Real>(dout: &Mat<F>, dx: &mut Mat<F>) {
    let c = dout.cols;
    let half = F::lit(0.5);
    for j in 0..dout.rows {
        let a = 2 * j;
        let g = dout.row(j);
        if a + 1 < dx.rows {
            for i in 0..c {
                dx.data[a * c + i] += g[i] * half;
                dx.data[(a + 1) * c + i] += g[i] * half;
            }
        } else {
            for i in 0..c {
                dx.data[a * c + i] += g[i];
            }
        }
    }
}

pub(crate) fn softplus<F: Real>(x: F) -> F {
    // log(1 + e^x) without overflow
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Mat<f64>, w: &[f64], b: &[f64], k: usize) -> Mat<f64> {
        let c_out = b.len();
        let mut out = Mat::zeros(x.rows, c_out);
        let pad = (k / 2) as isize;
        for t in 0..x.rows {
            for co in 0..c_out {
                let mut s = b[co];
                for j in 0..k {
                    let src = t as isize + j as isize - pad;
                    if src < 0 || src >= x.rows as isize {
                        continue;
                    }
                    for ci in 0..x.cols {
                        s += x.get(src as usize, ci) * w[(j * x.cols + ci) * c_out + co];
                    }
                }
                out.data[t * c_out + co] = s;
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let x = Mat::from_vec(6, 3, (0..18).map(|i| (i as f64 * 0.7).sin()).collect());
        let w: Vec<f64> = (0..3 * 3 * 2).map(|i| (i as f64 * 0.3).cos()).collect();
        let b = vec![0.1, -0.2];
        let got = conv_forward(&x, &w, &b, 3);
        let want = naive_conv(&x, &w, &b, 3);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
        // single row: only the centre tap contributes
        let x1 = Mat::from_vec(1, 3, vec![1.0, 2.0, 3.0]);
        let got = conv_forward(&x1, &w, &b, 3);
        let want = naive_conv(&x1, &w, &b, 3);
        assert_eq!(got.rows, 1);
        for (g, w) in got.data.iter().zip(&want.data) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn avg_pool_gradient_split() {
        // 3 valid rows: first window has 2 children, second only one
        let mut dx = Mat::<f64>::zeros(3, 1);
        let dout = Mat::from_vec(2, 1, vec![1.0, 1.0]);
        avg_pool_backward(&dout, &mut dx);
        assert_eq!(dx.data, vec![0.5, 0.5, 1.0]);
    }

    #[test]
    fn pools_on_constants_agree() {
        let x = Mat::from_vec(5, 2, vec![3.0f64; 10]);
        let (m, _) = max_pool_forward(&x);
        let a = avg_pool_forward(&x);
        assert_eq!(m, a);
        assert_eq!(m.rows, 3);
    }

    #[test]
    fn max_dominates_avg() {
        let x = Mat::from_vec(7, 3, (0..21).map(|i| ((i * 37 % 11) as f64) - 5.0).collect());
        let (m, _) = max_pool_forward(&x);
        let a = avg_pool_forward(&x);
        assert!(m.data.iter().zip(&a.data).all(|(m, a)| m >= a));
    }

    #[test]
    fn softplus_and_sigmoid_are_stable() {
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(1000.0f64), 1000.0);
        assert!(softplus(-1000.0f64) >= 0.0);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert!((sigmoid(0.0f64) - 0.5).abs() < 1e-15);
    }
}
