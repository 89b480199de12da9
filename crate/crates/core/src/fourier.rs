//! Orthonormal 2D discrete Fourier transform.
//!
//! `X(u,v) = 1/sqrt(H*W) * sum_{h,w} x(h,w) * exp(-2*pi*j*(h*u/H + w*v/W))`
//!
//! Rank-2 inputs are a single `[H, W]` plane. Higher ranks are read as
//! channels-last maps `[.., H, W, C]` and every channel plane is transformed
//! independently. Power-of-two axes use an iterative radix-2 FFT; other
//! lengths fall back to a direct O(n^2) DFT along that axis.

use std::f64::consts::PI;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::numeric::{Scalar, Tensor};

/// Largest `H*W` accepted by [`naive_dft_oracle`].
pub const ORACLE_MAX_POINTS: usize = 4096;

/// Real and imaginary parts of a frequency-domain signal.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexPair<T: Scalar = f32> {
    pub real: Tensor<T>,
    pub imag: Tensor<T>,
}

impl<T: Scalar> ComplexPair<T> {
    pub fn new(real: Tensor<T>, imag: Tensor<T>) -> Result<Self> {
        if real.shape() != imag.shape() {
            return Err(Error::dim(
                "ComplexPair::new",
                format!("real {:?} vs imag {:?}", real.shape(), imag.shape()),
            ));
        }
        Ok(Self { real, imag })
    }

    pub fn shape(&self) -> &[usize] {
        self.real.shape()
    }

    pub fn cast<U: Scalar>(&self) -> ComplexPair<U> {
        ComplexPair {
            real: self.real.cast(),
            imag: self.imag.cast(),
        }
    }
}

/// `(batch, H, W, C)` view of a shape.
pub(crate) fn plane_dims(
    shape: &[usize],
    op: &'static str,
) -> Result<(usize, usize, usize, usize)> {
    match shape.len() {
        2 if shape[0] >= 1 && shape[1] >= 1 => Ok((1, shape[0], shape[1], 1)),
        r if r >= 3 => {
            let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
            if h == 0 || w == 0 {
                return Err(Error::dim(op, format!("empty spatial axes in {shape:?}")));
            }
            Ok((shape[..r - 3].iter().product(), h, w, c))
        }
        _ => Err(Error::dim(
            op,
            format!("expected [H, W] or [.., H, W, C], got {shape:?}"),
        )),
    }
}

/// Precomputed 1D transform of one length.
struct Plan<T> {
    n: usize,
    /// `exp(-2*pi*j*k/n)` for `k < n`.
    twiddles: Vec<Complex<T>>,
    bitrev: Option<Vec<usize>>,
}

impl<T: Scalar> Plan<T> {
    fn new(n: usize) -> Self {
        let twiddles = (0..n)
            .map(|k| {
                let a = -2.0 * PI * k as f64 / n as f64;
                Complex::new(T::of(a.cos()), T::of(a.sin()))
            })
            .collect();
        let bitrev = n.is_power_of_two().then(|| {
            let bits = n.trailing_zeros();
            (0..n)
                .map(|i| {
                    if bits == 0 {
                        0
                    } else {
                        i.reverse_bits() >> (usize::BITS - bits)
                    }
                })
                .collect()
        });
        Self {
            n,
            twiddles,
            bitrev,
        }
    }

    /// Unnormalized transform in place. `inverse` flips the exponent sign.
    fn run(&self, buf: &mut [Complex<T>], scratch: &mut Vec<Complex<T>>, inverse: bool) {
        let n = self.n;
        if n == 1 {
            return;
        }
        let tw = |k: usize| {
            let t = self.twiddles[k];
            if inverse {
                t.conj()
            } else {
                t
            }
        };
        match &self.bitrev {
            Some(rev) => {
                for i in 0..n {
                    let j = rev[i];
                    if j > i {
                        buf.swap(i, j);
                    }
                }
                let mut len = 2;
                while len <= n {
                    let half = len / 2;
                    let step = n / len;
                    for start in (0..n).step_by(len) {
                        for k in 0..half {
                            let w = tw(k * step);
                            let a = buf[start + k];
                            let b = buf[start + k + half] * w;
                            buf[start + k] = a + b;
                            buf[start + k + half] = a - b;
                        }
                    }
                    len <<= 1;
                }
            }
            None => {
                scratch.clear();
                scratch.extend_from_slice(buf);
                for (k, out) in buf.iter_mut().enumerate() {
                    let mut acc = Complex::new(T::zero(), T::zero());
                    for (j, &x) in scratch.iter().enumerate() {
                        acc = acc + x * tw((j * k) % n);
                    }
                    *out = acc;
                }
            }
        }
    }
}

/// Orthonormal 2D transform of every channel plane.
///
/// `imag` may be omitted for real input. Returns `(real, imag)` in the same
/// channels-last layout.
pub(crate) fn transform_planes<T: Scalar>(
    re: &[T],
    im: Option<&[T]>,
    (batch, h, w, c): (usize, usize, usize, usize),
    inverse: bool,
) -> (Vec<T>, Vec<T>) {
    let row_plan = Plan::<T>::new(w);
    let col_plan = if h == w {
        None
    } else {
        Some(Plan::<T>::new(h))
    };
    let col_plan = col_plan.as_ref().unwrap_or(&row_plan);
    let norm = T::of(1.0 / ((h * w) as f64).sqrt());

    let mut out_re = vec![T::zero(); re.len()];
    let mut out_im = vec![T::zero(); re.len()];
    let mut plane = vec![Complex::new(T::zero(), T::zero()); h * w];
    let mut column = vec![Complex::new(T::zero(), T::zero()); h];
    let mut scratch = Vec::new();
    let stride = h * w * c;

    for b in 0..batch {
        let base = b * stride;
        for ch in 0..c {
            for (p, slot) in plane.iter_mut().enumerate() {
                let idx = base + p * c + ch;
                *slot = Complex::new(re[idx], im.map_or(T::zero(), |im| im[idx]));
            }
            for row in plane.chunks_exact_mut(w) {
                row_plan.run(row, &mut scratch, inverse);
            }
            if h > 1 {
                for x in 0..w {
                    for y in 0..h {
                        column[y] = plane[y * w + x];
                    }
                    col_plan.run(&mut column, &mut scratch, inverse);
                    for y in 0..h {
                        plane[y * w + x] = column[y];
                    }
                }
            }
            for (p, v) in plane.iter().enumerate() {
                let idx = base + p * c + ch;
                out_re[idx] = v.re * norm;
                out_im[idx] = v.im * norm;
            }
        }
    }
    (out_re, out_im)
}

/// Forward orthonormal DFT of a real input.
pub fn dft2d<T: Scalar>(x: &Tensor<T>) -> Result<ComplexPair<T>> {
    let dims = plane_dims(x.shape(), "dft2d")?;
    let (re, im) = transform_planes(x.data(), None, dims, false);
    Ok(ComplexPair {
        real: Tensor::from_parts(x.shape().to_vec(), re),
        imag: Tensor::from_parts(x.shape().to_vec(), im),
    })
}

/// Forward orthonormal DFT of a complex input.
pub fn dft2d_complex<T: Scalar>(f: &ComplexPair<T>) -> Result<ComplexPair<T>> {
    let dims = plane_dims(f.shape(), "dft2d")?;
    let (re, im) = transform_planes(f.real.data(), Some(f.imag.data()), dims, false);
    Ok(ComplexPair {
        real: Tensor::from_parts(f.shape().to_vec(), re),
        imag: Tensor::from_parts(f.shape().to_vec(), im),
    })
}

/// Full complex inverse transform.
pub fn idft2d_complex<T: Scalar>(f: &ComplexPair<T>) -> Result<ComplexPair<T>> {
    if f.real.shape() != f.imag.shape() {
        return Err(Error::dim("idft2d", "real/imag shapes differ"));
    }
    let dims = plane_dims(f.shape(), "idft2d")?;
    let (re, im) = transform_planes(f.real.data(), Some(f.imag.data()), dims, true);
    Ok(ComplexPair {
        real: Tensor::from_parts(f.shape().to_vec(), re),
        imag: Tensor::from_parts(f.shape().to_vec(), im),
    })
}

/// Inverse orthonormal DFT, keeping the real component.
pub fn idft2d<T: Scalar>(f: &ComplexPair<T>) -> Result<Tensor<T>> {
    Ok(idft2d_complex(f)?.real)
}

/// Amplitude `sqrt(R^2 + I^2)` and full-quadrant phase `atan2(I, R)` in radians.
pub fn amplitude_phase<T: Scalar>(f: &ComplexPair<T>) -> (Tensor<T>, Tensor<T>) {
    let amp = f
        .real
        .zip_map(&f.imag, |r, i| r.hypot(i))
        .expect("ComplexPair shapes agree");
    let phase = f
        .real
        .zip_map(&f.imag, |r, i| i.atan2(r))
        .expect("ComplexPair shapes agree");
    (amp, phase)
}

/// Literal double-loop evaluation of the orthonormal 2D DFT in `f64`.
///
/// Quadratic in `H*W` per plane, so planes larger than
/// [`ORACLE_MAX_POINTS`] are refused.
pub fn naive_dft_oracle(input: &ComplexPair<f64>, inverse: bool) -> Result<ComplexPair<f64>> {
    let (batch, h, w, c) = plane_dims(input.shape(), "naive_dft_oracle")?;
    if h * w > ORACLE_MAX_POINTS {
        return Err(Error::OracleRefused(format!(
            "{h}x{w} plane exceeds {ORACLE_MAX_POINTS} points"
        )));
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let xr = input.real.data();
    let xi = input.imag.data();
    let mut re = vec![0.0; xr.len()];
    let mut im = vec![0.0; xr.len()];
    for b in 0..batch {
        for ch in 0..c {
            let at = |y: usize, x: usize| b * h * w * c + (y * w + x) * c + ch;
            for u in 0..h {
                for v in 0..w {
                    let (mut sr, mut si) = (0.0, 0.0);
                    for y in 0..h {
                        for x in 0..w {
                            let ang = sign
                                * 2.0
                                * PI
                                * ((y * u) as f64 / h as f64 + (x * v) as f64 / w as f64);
                            let (s, co) = ang.sin_cos();
                            let (a, bi) = (xr[at(y, x)], xi[at(y, x)]);
                            sr += a * co - bi * s;
                            si += a * s + bi * co;
                        }
                    }
                    re[at(u, v)] = sr * norm;
                    im[at(u, v)] = si * norm;
                }
            }
        }
    }
    Ok(ComplexPair {
        real: Tensor::from_parts(input.shape().to_vec(), re),
        imag: Tensor::from_parts(input.shape().to_vec(), im),
    })
}

/// Oracle forward transform of a real tensor.
pub fn naive_dft_real<T: Scalar>(x: &Tensor<T>) -> Result<ComplexPair<f64>> {
    let pair = ComplexPair {
        real: x.cast::<f64>(),
        imag: Tensor::zeros(x.shape()),
    };
    naive_dft_oracle(&pair, false)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn close(a: &Tensor<f32>, b: &Tensor<f64>, tol: f64) -> bool {
        a.cast::<f64>().max_abs_diff(b) < tol
    }

    #[test]
    fn constant_image_is_dc_only() {
        let (h, w) = (4usize, 8usize);
        let x = Tensor::<f32>::full(&[h, w], 2.5);
        let f = dft2d(&x).unwrap();
        let dc = 2.5 * ((h * w) as f64).sqrt();
        assert!((f.real.data()[0] as f64 - dc).abs() < 1e-5);
        for i in 1..h * w {
            assert!(f.real.data()[i].abs() < 1e-5 && f.imag.data()[i].abs() < 1e-5);
        }
        assert!(f.imag.data()[0].abs() < 1e-5);
    }

    #[test]
    fn delta_image_is_flat_spectrum() {
        let mut x = Tensor::<f32>::zeros(&[8, 8]);
        x.data_mut()[0] = 1.0;
        let f = dft2d(&x).unwrap();
        for (r, i) in f.real.data().iter().zip(f.imag.data()) {
            assert!((r - 0.125).abs() < 1e-6 && i.abs() < 1e-6);
        }
    }

    #[test]
    fn matches_oracle_on_power_of_two_and_odd_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for shape in [
            vec![8, 8],
            vec![16, 4],
            vec![6, 5],
            vec![2, 8, 8, 3],
            vec![3, 7, 2],
        ] {
            let x = Tensor::<f32>::randn(&shape, 1.0, &mut rng);
            let fast = dft2d(&x).unwrap();
            let slow = naive_dft_real(&x).unwrap();
            assert!(close(&fast.real, &slow.real, 1e-4), "{shape:?}");
            assert!(close(&fast.imag, &slow.imag, 1e-4), "{shape:?}");
        }
    }

    #[test]
    fn inverse_matches_oracle_on_asymmetric_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for shape in [vec![8, 8], vec![4, 6, 2]] {
            let f = ComplexPair::new(
                Tensor::<f32>::randn(&shape, 1.0, &mut rng),
                Tensor::<f32>::randn(&shape, 1.0, &mut rng),
            )
            .unwrap();
            let fast = idft2d(&f).unwrap();
            let slow = naive_dft_oracle(&f.cast(), true).unwrap();
            assert!(close(&fast, &slow.real, 1e-4));
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let mut re = Tensor::<f32>::zeros(&[4, 4]);
        re.data_mut()[0] = 8.0;
        let x = idft2d(&ComplexPair::new(re, Tensor::zeros(&[4, 4])).unwrap()).unwrap();
        for v in x.data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn amplitude_phase_fixtures() {
        let f = ComplexPair::new(
            Tensor::<f64>::vector(&[3.0, 1.0, -1.0]),
            Tensor::<f64>::vector(&[4.0, 0.0, -1.0]),
        )
        .unwrap();
        let (a, p) = amplitude_phase(&f);
        assert!((a.data()[0] - 5.0).abs() < 1e-12);
        assert!((p.data()[0] - 0.927295218).abs() < 1e-5);
        assert_eq!((a.data()[1], p.data()[1]), (1.0, 0.0));
        // third quadrant keeps its sign under atan2
        assert!((p.data()[2] + 3.0 * PI / 4.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_refuses_large_planes() {
        let x = Tensor::<f32>::zeros(&[128, 64]);
        assert!(matches!(naive_dft_real(&x), Err(Error::OracleRefused(_))));
    }

    #[test]
    fn rank_one_input_is_rejected() {
        assert!(dft2d(&Tensor::<f32>::zeros(&[8])).is_err());
    }

    #[test]
    fn oracle_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[8, 8], 1.0, &mut rng);
        let (a, b) = (1.7, -0.4);
        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = naive_dft_real(&mix).unwrap();
        let fx = naive_dft_real(&x).unwrap();
        let fy = naive_dft_real(&y).unwrap();
        let rhs_re = fx.real.scale(a).add(&fy.real.scale(b)).unwrap();
        let rhs_im = fx.imag.scale(a).add(&fy.imag.scale(b)).unwrap();
        assert!(lhs.real.max_abs_diff(&rhs_re) < 1e-6);
        assert!(lhs.imag.max_abs_diff(&rhs_im) < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn round_trip_parseval_and_symmetry(
            seed in any::<u64>(),
            hp in 0u32..5,
            wp in 0u32..5,
        ) {
            let (h, w) = (1usize << hp, 1usize << wp);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f32>::randn(&[h, w], 1.0, &mut rng);
            let f = dft2d(&x).unwrap();

            let back = idft2d(&f).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-5);

            let energy_x: f64 = x.data().iter().map(|&v| (v as f64).powi(2)).sum();
            let energy_f: f64 = f.real.data().iter().zip(f.imag.data())
                .map(|(&r, &i)| (r as f64).powi(2) + (i as f64).powi(2)).sum();
            prop_assert!((energy_x - energy_f).abs() <= 1e-5 * energy_x.max(1e-12));

            for u in 0..h {
                for v in 0..w {
                    let (cu, cv) = ((h - u) % h, (w - v) % w);
                    let a = u * w + v;
                    let b = cu * w + cv;
                    prop_assert!((f.real.data()[a] - f.real.data()[b]).abs() < 1e-5);
                    prop_assert!((f.imag.data()[a] + f.imag.data()[b]).abs() < 1e-5);
                }
            }
        }

        #[test]
        fn polar_round_trip(r in -100.0f64..100.0, i in -100.0f64..100.0) {
            let f = ComplexPair::new(Tensor::vector(&[r]), Tensor::vector(&[i])).unwrap();
            let (a, p) = amplitude_phase(&f);
            let (a, p) = (a.data()[0], p.data()[0]);
            prop_assert!((a * p.cos() - r).abs() < 1e-5);
            prop_assert!((a * p.sin() - i).abs() < 1e-5);
        }
    }
}
