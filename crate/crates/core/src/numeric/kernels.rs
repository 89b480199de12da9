//! Slice-level compute kernels shared by the tape and the pure forward ops.
//!
//! Feature maps are channels-last: `[batch.., H, W, C]`.

use crate::error::{Error, Result};
use crate::numeric::tensor::{Scalar, Tensor};

/// `out[m,n] = a[m,k] * b[k,n]`
pub fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `out[m,n] = a[m,k] * b[n,k]^T`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out[m,n] = a[k,m]^T * b[k,n]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], k: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Splits a channels-last map shape into `(batch, H, W, C)`.
pub fn hwc_dims(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(Error::dim(
            op,
            format!("expected [.., H, W, C], got {shape:?}"),
        ));
    }
    let r = shape.len();
    let batch = shape[..r - 3].iter().product();
    Ok((batch, shape[r - 3], shape[r - 2], shape[r - 1]))
}

pub fn depthwise3x3_forward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    bias: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let plane = h * w * c;
    for b in 0..batch {
        let xb = &x[b * plane..(b + 1) * plane];
        let ob = &mut out[b * plane..(b + 1) * plane];
        for y in 0..h {
            for xx in 0..w {
                let o = &mut ob[(y * w + xx) * c..(y * w + xx + 1) * c];
                o.copy_from_slice(bias);
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = &xb[(sy as usize * w + sx as usize) * c..][..c];
                        let k = &kernel[(ky * 3 + kx) * c..][..c];
                        for ((o, &s), &kv) in o.iter_mut().zip(src).zip(k) {
                            *o += s * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(grad_x, grad_kernel, grad_bias)`.
pub fn depthwise3x3_backward<T: Scalar>(
    x: &[T],
    kernel: &[T],
    grad: &[T],
    (batch, h, w, c): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut gx = vec![T::zero(); x.len()];
    let mut gk = vec![T::zero(); 9 * c];
    let mut gb = vec![T::zero(); c];
    let plane = h * w * c;
    for b in 0..batch {
        let xb = &x[b * plane..(b + 1) * plane];
        let gbat = &grad[b * plane..(b + 1) * plane];
        let gxb = &mut gx[b * plane..(b + 1) * plane];
        for y in 0..h {
            for xx in 0..w {
                let g = &gbat[(y * w + xx) * c..][..c];
                for (acc, &gv) in gb.iter_mut().zip(g) {
                    *acc += gv;
                }
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let off = (sy as usize * w + sx as usize) * c;
                        let k = &kernel[(ky * 3 + kx) * c..][..c];
                        let gkr = &mut gk[(ky * 3 + kx) * c..][..c];
                        let src = &xb[off..off + c];
                        for i in 0..c {
                            gkr[i] += g[i] * src[i];
                        }
                        let dst = &mut gxb[off..off + c];
                        for i in 0..c {
                            dst[i] += g[i] * k[i];
                        }
                    }
                }
            }
        }
    }
    (gx, gk, gb)
}

/// Layer norm over the last axis. Returns `(y, xhat, inv_std)`.
pub fn layer_norm_forward<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gamma.len();
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); rows];
    let nf = T::of(n as f64);
    for r in 0..rows {
        let xr = &x[r * n..(r + 1) * n];
        let mean = xr.iter().copied().sum::<T>() / nf;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let is = T::one() / (var + T::of(eps)).sqrt();
        inv_std[r] = is;
        for i in 0..n {
            let h = (xr[i] - mean) * is;
            xhat[r * n + i] = h;
            y[r * n + i] = h * gamma[i] + beta[i];
        }
    }
    (y, xhat, inv_std)
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn layer_norm_backward<T: Scalar>(
    grad: &[T],
    xhat: &[T],
    inv_std: &[T],
    gamma: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let n = gamma.len();
    let rows = grad.len() / n;
    let nf = T::of(n as f64);
    let mut gx = vec![T::zero(); grad.len()];
    let mut gg = vec![T::zero(); n];
    let mut gbeta = vec![T::zero(); n];
    let mut gxhat = vec![T::zero(); n];
    for r in 0..rows {
        let g = &grad[r * n..(r + 1) * n];
        let xh = &xhat[r * n..(r + 1) * n];
        let mut mean_g = T::zero();
        let mut mean_gx = T::zero();
        for i in 0..n {
            gg[i] += g[i] * xh[i];
            gbeta[i] += g[i];
            gxhat[i] = g[i] * gamma[i];
            mean_g += gxhat[i];
            mean_gx += gxhat[i] * xh[i];
        }
        mean_g /= nf;
        mean_gx /= nf;
        for i in 0..n {
            gx[r * n + i] = inv_std[r] * (gxhat[i] - mean_g - xh[i] * mean_gx);
        }
    }
    (gx, gg, gbeta)
}

pub fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = (v - max).exp();
            total += *o;
        }
        for o in or.iter_mut() {
            *o /= total;
        }
    }
    out
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(n).zip(out.chunks_exact_mut(n)) {
        let max = xr.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = xr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

#[inline]
pub fn leaky<T: Scalar>(v: T, slope: T) -> T {
    if v > T::zero() {
        v
    } else {
        v * slope
    }
}

// Pure tensor-level forms of the named operations.

/// Elementwise `max(x, slope * x)`.
pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: f64) -> Tensor<T> {
    let s = T::of(slope);
    x.map(|v| leaky(v, s))
}

/// Same-padded 3x3 depthwise convolution of `[.., H, W, C]` with `kernels[3,3,C]`.
pub fn depthwise_conv3x3<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let dims = hwc_dims(x.shape(), "depthwise_conv3x3")?;
    let c = dims.3;
    if kernels.shape() != [3, 3, c] || bias.shape() != [c] {
        return Err(Error::dim(
            "depthwise_conv3x3",
            format!(
                "kernels {:?} / bias {:?} do not match {c} channels",
                kernels.shape(),
                bias.shape()
            ),
        ));
    }
    let out = depthwise3x3_forward(x.data(), kernels.data(), bias.data(), dims);
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Per-pixel linear map across channels: `[.., Cin] x [Cin, Cout] + [Cout]`.
pub fn pointwise_conv<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let cin = x.last_dim();
    if weight.rank() != 2 || weight.shape()[0] != cin || x.rank() == 0 {
        return Err(Error::dim(
            "pointwise_conv",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    let cout = weight.shape()[1];
    if bias.shape() != [cout] {
        return Err(Error::dim(
            "pointwise_conv",
            format!("bias {:?}, expected [{cout}]", bias.shape()),
        ));
    }
    let rows = x.len() / cin;
    let mut out = gemm(x.data(), weight.data(), rows, cin, cout);
    for row in out.chunks_exact_mut(cout) {
        for (o, &b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Ok(Tensor::from_parts(shape, out))
}

/// Layer normalization over the last axis followed by the `gamma`/`beta` affine map.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let n = x.last_dim();
    if gamma.shape() != [n] || beta.shape() != [n] {
        return Err(Error::dim(
            "layer_norm",
            format!(
                "gamma {:?} / beta {:?} vs axis of {n}",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm", "eps must be positive"));
    }
    let (y, _, _) = layer_norm_forward(x.data(), gamma.data(), beta.data(), eps);
    Ok(Tensor::from_parts(x.shape().to_vec(), y))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn leaky_relu_fixtures() {
        let x = Tensor::<f32>::vector(&[2.0, -1.0, 0.0]);
        let y = leaky_relu(&x, 0.2);
        assert_eq!(y.data(), &[2.0, -0.2, 0.0]);
    }

    fn identity_kernel(c: usize) -> Tensor<f32> {
        let mut k = Tensor::zeros(&[3, 3, c]);
        for ch in 0..c {
            k.data_mut()[4 * c + ch] = 1.0;
        }
        k
    }

    #[test]
    fn depthwise_identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[5, 6, 3], 1.0, &mut rng);
        let y = depthwise_conv3x3(&x, &identity_kernel(3), &Tensor::zeros(&[3])).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn depthwise_all_ones_sums_window() {
        let x = Tensor::<f32>::full(&[4, 4, 2], 1.5);
        let y = depthwise_conv3x3(&x, &Tensor::ones(&[3, 3, 2]), &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.get(&[1, 2, 0]).unwrap(), 13.5);
        assert_eq!(y.get(&[2, 1, 1]).unwrap(), 13.5);
        // corner sees a 2x2 window under zero padding
        assert_eq!(y.get(&[0, 0, 0]).unwrap(), 6.0);
    }

    #[test]
    fn depthwise_matches_sliding_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (h, w, c) = (7, 5, 4);
        let x = Tensor::<f32>::randn(&[2, h, w, c], 1.0, &mut rng);
        let k = Tensor::<f32>::randn(&[3, 3, c], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[c], 1.0, &mut rng);
        let y = depthwise_conv3x3(&x, &k, &b).unwrap();
        for n in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    for ch in 0..c {
                        let mut acc = b.data()[ch] as f64;
                        for di in -1i64..=1 {
                            for dj in -1i64..=1 {
                                let (si, sj) = (i as i64 + di, j as i64 + dj);
                                if si < 0 || sj < 0 || si >= h as i64 || sj >= w as i64 {
                                    continue;
                                }
                                let xv = x.get(&[n, si as usize, sj as usize, ch]).unwrap() as f64;
                                let kv = k.get(&[(di + 1) as usize, (dj + 1) as usize, ch]).unwrap()
                                    as f64;
                                acc += xv * kv;
                            }
                        }
                        let got = y.get(&[n, i, j, ch]).unwrap() as f64;
                        assert!((got - acc).abs() < 1e-5, "{got} vs {acc}");
                    }
                }
            }
        }
    }

    #[test]
    fn depthwise_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[4, 4, 3]);
        let err = depthwise_conv3x3(&x, &Tensor::zeros(&[3, 3, 2]), &Tensor::zeros(&[3]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
        let err = depthwise_conv3x3(&x, &Tensor::zeros(&[3, 3, 3]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn pointwise_identity_and_channel_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[3, 3, 4], 1.0, &mut rng);
        let mut eye = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            eye.data_mut()[i * 5] = 1.0;
        }
        assert_eq!(pointwise_conv(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        let sum = pointwise_conv(&x, &Tensor::ones(&[4, 1]), &Tensor::zeros(&[1])).unwrap();
        assert_eq!(sum.shape(), &[3, 3, 1]);
        for p in 0..9 {
            let expect: f32 = x.data()[p * 4..p * 4 + 4].iter().sum();
            assert!((sum.data()[p] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn pointwise_matches_matvec_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[4, 2, 5], 1.0, &mut rng);
        let w = Tensor::<f32>::randn(&[5, 3], 1.0, &mut rng);
        let b = Tensor::<f32>::randn(&[3], 1.0, &mut rng);
        let y = pointwise_conv(&x, &w, &b).unwrap();
        for p in 0..8 {
            for o in 0..3 {
                let mut acc = b.data()[o] as f64;
                for i in 0..5 {
                    acc += x.data()[p * 5 + i] as f64 * w.data()[i * 3 + o] as f64;
                }
                assert!((y.data()[p * 3 + o] as f64 - acc).abs() < 1e-5);
            }
        }
        assert!(pointwise_conv(&x, &Tensor::zeros(&[4, 3]), &b).is_err());
    }

    #[test]
    fn layer_norm_fixtures() {
        let ones = Tensor::<f32>::ones(&[2]);
        let zeros = Tensor::<f32>::zeros(&[2]);
        let c = Tensor::<f32>::full(&[3, 2], 7.0);
        assert!(layer_norm(&c, &ones, &zeros, 1e-5).unwrap().max_abs() == 0.0);

        let x = Tensor::<f64>::vector(&[1.0, 3.0]);
        let y = layer_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9 && (y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(&[6, 16], 3.0, &mut rng);
        let y = layer_norm(&x, &Tensor::ones(&[16]), &Tensor::zeros(&[16]), 1e-5).unwrap();
        for row in y.data().chunks(16) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn gemm_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = Tensor::<f64>::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng);
        let ab = gemm(a.data(), b.data(), 3, 4, 5);
        // b^T stored row-major as [5,4]
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b.data()[i * 5 + j];
            }
        }
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.data()[i * 4 + j];
            }
        }
        let nt = gemm_nt(a.data(), &bt, 3, 4, 5);
        let tn = gemm_tn(&at, b.data(), 4, 3, 5);
        for i in 0..15 {
            assert!((ab[i] - nt[i]).abs() < 1e-12);
            assert!((ab[i] - tn[i]).abs() < 1e-12);
        }
    }
}
