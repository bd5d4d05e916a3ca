//! Real and 2D FFT helpers over power-of-two lengths.
//!
//! Transforms are unnormalized forward, `1/N`-scaled inverse.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_pow2(n: usize) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("FFT length {n} is not a power of two")));
    }
    Ok(())
}

/// Half spectrum (`n/2 + 1` bins) of a real signal.
pub fn rfft(x: &[f64]) -> Result<Vec<Complex64>> {
    let n = x.len();
    check_pow2(n)?;
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.truncate(n / 2 + 1);
    Ok(buf)
}

/// Inverse of [`rfft`] for a real signal of length `n`.
pub fn irfft(spec: &[Complex64], n: usize) -> Result<Vec<f64>> {
    check_pow2(n)?;
    if spec.len() != n / 2 + 1 {
        return Err(Error::InvalidArgument(format!("half spectrum of length {} for n = {n}", spec.len())));
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    buf[..spec.len()].copy_from_slice(spec);
    for k in 1..n / 2 {
        buf[n - k] = spec[k].conj();
    }
    let fft = FftPlanner::new().plan_fft_inverse(n);
    fft.process(&mut buf);
    Ok(buf.iter().map(|c| c.re / n as f64).collect())
}

/// Row-wise half spectra of a tensor along its last axis.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Leading shape, followed by `n/2 + 1` bins.
    pub shape: Vec<usize>,
    pub n: usize,
    pub bins: Vec<Complex64>,
}

pub fn fft_real(x: &Tensor) -> Result<Spectrum> {
    let n = *x.shape().last().ok_or_else(|| Error::InvalidArgument("fft of a rank-0 tensor".into()))?;
    check_pow2(n)?;
    let data = x.data();
    let mut bins = Vec::with_capacity(data.len() / n * (n / 2 + 1));
    for row in data.chunks_exact(n) {
        bins.extend(rfft(row)?);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = n / 2 + 1;
    Ok(Spectrum { shape, n, bins })
}

pub fn ifft_real(spec: &Spectrum) -> Result<Tensor> {
    let h = spec.n / 2 + 1;
    let mut out = Vec::with_capacity(spec.bins.len() / h * spec.n);
    for row in spec.bins.chunks_exact(h) {
        out.extend(irfft(row, spec.n)?);
    }
    let mut shape = spec.shape.clone();
    *shape.last_mut().expect("rank >= 1") = spec.n;
    Tensor::from_vec(out, &shape)
}

/// Cached plans for in-place complex transforms of `n`×`n` row-major fields.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    pub fn new(n: usize) -> Result<Self> {
        check_pow2(n)?;
        let mut planner = FftPlanner::new();
        Ok(Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n), scratch: vec![Complex64::default(); n] })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn apply(&mut self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        assert_eq!(data.len(), n * n);
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process(data);
        for j in 0..n {
            for i in 0..n {
                self.scratch[i] = data[i * n + j];
            }
            plan.process(&mut self.scratch);
            for i in 0..n {
                data[i * n + j] = self.scratch[i];
            }
        }
    }

    pub fn forward(&mut self, data: &mut [Complex64]) {
        self.apply(data, false);
    }

    /// Inverse transform including the `1/n²` factor.
    pub fn inverse(&mut self, data: &mut [Complex64]) {
        self.apply(data, true);
        let s = 1.0 / (self.n * self.n) as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn forward_real(&mut self, x: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    pub fn inverse_real(&mut self, spec: &[Complex64]) -> Vec<f64> {
        let mut buf = spec.to_vec();
        self.inverse(&mut buf);
        buf.iter().map(|c| c.re).collect()
    }
}

/// Signed integer wavenumber of FFT index `i` for length `n`.
pub fn wavenumber(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                x.iter()
                    .enumerate()
                    .map(|(j, &v)| Complex64::from_polar(v, -2.0 * PI * (k * j) as f64 / n as f64))
                    .sum()
            })
            .collect()
    }

    #[test]
    fn constant_signal_is_pure_dc() {
        let s = rfft(&[2.0; 16]).unwrap();
        assert!((s[0].re - 32.0).abs() < 1e-12);
        assert!(s[1..].iter().all(|c| c.norm() < 1e-12));
    }

    #[test]
    fn cosine_peaks_at_its_wavenumber() {
        let n = 32;
        let x: Vec<f64> = (0..n).map(|i| (2.0 * PI * 3.0 * i as f64 / n as f64).cos()).collect();
        let s = rfft(&x).unwrap();
        let peak = s.iter().enumerate().max_by(|a, b| a.1.norm().total_cmp(&b.1.norm())).unwrap().0;
        assert_eq!(peak, 3);
    }

    #[test]
    fn matches_naive_dft_and_round_trips() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = rfft(&x).unwrap();
        let oracle = naive_dft(&x);
        for k in 0..=32 {
            assert!((s[k] - oracle[k]).norm() < 1e-10);
        }
        let back = irfft(&s, 64).unwrap();
        let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn parseval_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let full = naive_dft(&x);
        let lhs: f64 = x.iter().map(|v| v * v).sum();
        let rhs: f64 = full.iter().map(|c| c.norm_sqr()).sum::<f64>() / 128.0;
        assert!((lhs - rhs).abs() <= 1e-9 * lhs);
        // same identity from the half spectrum via conjugate symmetry
        let h = rfft(&x).unwrap();
        let half: f64 = h[0].norm_sqr() + h[64].norm_sqr() + 2.0 * h[1..64].iter().map(|c| c.norm_sqr()).sum::<f64>();
        assert!((lhs - half / 128.0).abs() <= 1e-9 * lhs);
    }

    #[test]
    fn non_power_of_two_is_rejected() {
        assert!(rfft(&[0.0; 12]).is_err());
        assert!(fft_real(&Tensor::zeros(&[2, 10])).is_err());
    }

    #[test]
    fn tensor_round_trip_along_last_axis() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[3, 16], &mut rng);
        let s = fft_real(&x).unwrap();
        assert_eq!(s.shape, vec![3, 9]);
        let y = ifft_real(&s).unwrap();
        for (a, b) in x.data().iter().zip(y.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft2_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let n = 8;
        let x: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut f = Fft2::new(n).unwrap();
        let s = f.forward_real(&x);
        let y = f.inverse_real(&s);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
