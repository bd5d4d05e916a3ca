//! Toy PDE trajectories from pseudo-spectral reference solvers, scattered-mesh
//! resampling, and dataset persistence.

use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{invalid, Error, Result};
use crate::fft::{wavenumber, Fft2};
use crate::meshcodec::{Domain, PointCloud, PointCloudField};
use crate::tensor::Tensor;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    Heat2d,
    Burgers1d,
    Vorticity2d,
}

impl FromStr for Problem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "heat2d" => Ok(Self::Heat2d),
            "burgers1d" => Ok(Self::Burgers1d),
            "vorticity2d" => Ok(Self::Vorticity2d),
            _ => Err(Error::InvalidArgument(format!("unknown problem {s:?} (heat2d, burgers1d, vorticity2d)"))),
        }
    }
}

impl Problem {
    pub fn dim(self) -> usize {
        match self {
            Self::Burgers1d => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Forcing {
    /// `sin(4y)` body force with linear drag `0.1·ω`.
    Kolmogorov,
    None,
}

/// Field snapshots on a periodic uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Row-major `T × extents × channels`.
    pub frames: Vec<f64>,
    pub extents: Vec<usize>,
    pub channels: usize,
    pub dt: f64,
    pub xi: Vec<f64>,
    pub domain: Domain,
}

impl Trajectory {
    pub fn frame_len(&self) -> usize {
        self.extents.iter().product::<usize>() * self.channels
    }

    pub fn len(&self) -> usize {
        if self.frame_len() == 0 {
            0
        } else {
            self.frames.len() / self.frame_len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        let f = self.frame_len();
        &self.frames[m * f..(m + 1) * f]
    }

    /// Frames `start..start+count` as `(count, n, C)`.
    pub fn window(&self, start: usize, count: usize) -> Result<Tensor> {
        if start + count > self.len() {
            return invalid(format!("window {start}..{} exceeds {} frames", start + count, self.len()));
        }
        let f = self.frame_len();
        Tensor::from_vec(self.frames[start * f..(start + count) * f].to_vec(), &[count, f / self.channels, self.channels])
    }

    pub fn validate(&self, history: usize) -> Result<()> {
        if self.len() < history + 2 {
            return invalid(format!("trajectory has {} frames, needs at least {}", self.len(), history + 2));
        }
        if !(self.dt > 0.0) {
            return invalid("trajectory dt must be positive");
        }
        if let Some(i) = self.frames.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("trajectory frame {}", i / self.frame_len())));
        }
        Ok(())
    }
}

fn check_grid(n: usize) -> Result<()> {
    if n < 4 || !n.is_power_of_two() {
        return invalid(format!("grid size {n} must be a power of two >= 4"));
    }
    Ok(())
}

fn periodic(dim: usize) -> Domain {
    Domain::periodic_box(dim, TWO_PI)
}

fn dealias(k: i64, n: usize) -> bool {
    3 * k.unsigned_abs() as usize <= n
}

/// Random real field on an `n^dim` grid with Gaussian Fourier amplitudes
/// damped by `exp(−|k|²/(2 k0²))` for `1 ≤ |k|_∞ ≤ kmax`, scaled to unit RMS.
fn random_band_field(rng: &mut ChaCha8Rng, n: usize, dim: usize, kmax: i64, k0: f64) -> Vec<f64> {
    let total = n.pow(dim as u32);
    let mut out = vec![0.0; total];
    let modes: Vec<Vec<i64>> = match dim {
        1 => (1..=kmax).map(|k| vec![k]).collect(),
        _ => {
            let mut m = Vec::new();
            for kx in -kmax..=kmax {
                for ky in 0..=kmax {
                    if ky > 0 || kx > 0 {
                        m.push(vec![kx, ky]);
                    }
                }
            }
            m
        }
    };
    for k in modes {
        let k2: f64 = k.iter().map(|&v| (v * v) as f64).sum();
        let amp = (-k2 / (2.0 * k0 * k0)).exp();
        let a: f64 = rng.sample::<f64, _>(StandardNormal) * amp;
        let b: f64 = rng.sample::<f64, _>(StandardNormal) * amp;
        for (idx, v) in out.iter_mut().enumerate() {
            let mut phase = 0.0;
            let mut rem = idx;
            for d in (0..dim).rev() {
                phase += k[d] as f64 * TWO_PI * (rem % n) as f64 / n as f64;
                rem /= n;
            }
            *v += a * phase.cos() + b * phase.sin();
        }
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / total as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v /= rms);
    }
    out
}

fn k_squared(n: usize) -> Vec<f64> {
    let mut k2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (kx, ky) = (wavenumber(i, n) as f64, wavenumber(j, n) as f64);
            k2[i * n + j] = kx * kx + ky * ky;
        }
    }
    k2
}

/// Heat equation `u_t = ν Δu` on `[0, 2π)²`, integrated exactly per Fourier mode.
pub fn gen_heat2d(nu: f64, n: usize, frames: usize, dt: f64, seed: u64) -> Result<Trajectory> {
    if !(nu >= 0.0) {
        return invalid(format!("viscosity must be non-negative, got {nu}"));
    }
    check_grid(n)?;
    if !(dt > 0.0) {
        return invalid("dt must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u0 = random_band_field(&mut rng, n, 2, 6, 3.0);
    let mean: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
    u0.iter_mut().for_each(|v| *v += mean);
    let mut fft = Fft2::new(n)?;
    let spec = fft.forward_real(&u0);
    let k2 = k_squared(n);
    let mut out = Vec::with_capacity(frames * n * n);
    for m in 0..frames {
        let t = m as f64 * dt;
        let s: Vec<Complex64> = spec.iter().zip(&k2).map(|(c, k)| c * (-nu * k * t).exp()).collect();
        out.extend(if m == 0 { u0.clone() } else { fft.inverse_real(&s) });
    }
    Ok(Trajectory { frames: out, extents: vec![n, n], channels: 1, dt, xi: vec![nu], domain: periodic(2) })
}

struct Fft1 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft1 {
    fn new(n: usize) -> Self {
        let mut p = FftPlanner::new();
        Self { n, fwd: p.plan_fft_forward(n), inv: p.plan_fft_inverse(n) }
    }

    fn forward(&self, x: &[f64]) -> Vec<Complex64> {
        let mut b: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fwd.process(&mut b);
        b
    }

    fn inverse(&self, s: &[Complex64]) -> Vec<f64> {
        let mut b = s.to_vec();
        self.inv.process(&mut b);
        b.iter().map(|c| c.re / self.n as f64).collect()
    }
}

struct Burgers {
    fft: Fft1,
    nu: f64,
    k: Vec<f64>,
    keep: Vec<bool>,
}

impl Burgers {
    /// `−½ ∂x(u²) + ν ∂xx u` in spectral space, mean mode exactly zero.
    fn rhs(&self, s: &[Complex64]) -> Vec<Complex64> {
        let n = self.fft.n;
        let filtered: Vec<Complex64> = s.iter().zip(&self.keep).map(|(c, &k)| if k { *c } else { Complex64::default() }).collect();
        let u = self.fft.inverse(&filtered);
        let sq: Vec<f64> = u.iter().map(|v| v * v).collect();
        let nl = self.fft.forward(&sq);
        let mut out = vec![Complex64::default(); n];
        for i in 1..n {
            let k = self.k[i];
            let adv = if self.keep[i] { Complex64::new(0.0, -0.5 * k) * nl[i] } else { Complex64::default() };
            out[i] = adv - s[i] * (self.nu * k * k);
        }
        out
    }
}

fn axpy(a: &[Complex64], h: f64, b: &[Complex64]) -> Vec<Complex64> {
    a.iter().zip(b).map(|(x, y)| x + y * h).collect()
}

/// Viscous Burgers `u_t + u u_x = ν u_xx` on `[0, 2π)`: pseudo-spectral with 2/3
/// dealiasing and RK4, `substeps` steps per frame interval `dt`.
pub fn gen_burgers1d(nu: f64, n: usize, frames: usize, dt: f64, substeps: usize, seed: u64) -> Result<Trajectory> {
    if !(nu >= 0.0) {
        return invalid(format!("viscosity must be non-negative, got {nu}"));
    }
    check_grid(n)?;
    if !(dt > 0.0) || substeps == 0 {
        return invalid("dt must be positive and substeps at least one");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u0 = random_band_field(&mut rng, n, 1, 4, 2.5);
    let mean: f64 = rng.sample::<f64, _>(StandardNormal) * 0.3;
    u0.iter_mut().for_each(|v| *v += mean);
    let fft = Fft1::new(n);
    let k: Vec<f64> = (0..n).map(|i| wavenumber(i, n) as f64).collect();
    let keep: Vec<bool> = (0..n).map(|i| dealias(wavenumber(i, n), n) && 2 * i != n).collect();
    let sys = Burgers { fft, nu, k, keep };
    let h = dt / substeps as f64;
    let dx = TWO_PI / n as f64;
    let mut s = sys.fft.forward(&u0);
    let mut out = Vec::with_capacity(frames * n);
    out.extend_from_slice(&u0);
    for _ in 1..frames {
        for _ in 0..substeps {
            let u = sys.fft.inverse(&s);
            let courant = u.iter().fold(0.0f64, |m, v| m.max(v.abs())) * h / dx;
            if !(courant <= 1.0) {
                return Err(Error::Cfl { courant });
            }
            let k1 = sys.rhs(&s);
            let k2 = sys.rhs(&axpy(&s, 0.5 * h, &k1));
            let k3 = sys.rhs(&axpy(&s, 0.5 * h, &k2));
            let k4 = sys.rhs(&axpy(&s, h, &k3));
            for i in 0..n {
                s[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * (h / 6.0);
            }
        }
        out.extend(sys.fft.inverse(&s));
    }
    Ok(Trajectory { frames: out, extents: vec![n], channels: 1, dt, xi: vec![nu], domain: periodic(1) })
}

struct Vorticity {
    fft: Fft2,
    n: usize,
    nu: f64,
    k2: Vec<f64>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    keep: Vec<bool>,
    force: Vec<Complex64>,
    drag: f64,
}

/// `(u, v) = (∂ψ/∂y, −∂ψ/∂x)` with `Δψ = −ω`, in spectral space.
fn velocity_spectra(w: &[Complex64], kx: &[f64], ky: &[f64], k2: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
    let mut u = vec![Complex64::default(); w.len()];
    let mut v = vec![Complex64::default(); w.len()];
    for i in 0..w.len() {
        if k2[i] > 0.0 {
            let psi = w[i] / k2[i];
            u[i] = Complex64::new(0.0, ky[i]) * psi;
            v[i] = Complex64::new(0.0, -kx[i]) * psi;
        }
    }
    (u, v)
}

impl Vorticity {
    fn new(n: usize, nu: f64, forcing: Forcing) -> Result<Self> {
        let mut kx = vec![0.0; n * n];
        let mut ky = vec![0.0; n * n];
        let mut keep = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (wavenumber(i, n), wavenumber(j, n));
                kx[i * n + j] = a as f64;
                ky[i * n + j] = b as f64;
                keep[i * n + j] = dealias(a, n) && dealias(b, n) && 2 * i != n && 2 * j != n;
            }
        }
        let mut fft = Fft2::new(n)?;
        let (force, drag) = match forcing {
            Forcing::Kolmogorov => {
                let f: Vec<f64> = (0..n * n).map(|idx| (4.0 * TWO_PI * (idx % n) as f64 / n as f64).sin()).collect();
                (fft.forward_real(&f), 0.1)
            }
            Forcing::None => (vec![Complex64::default(); n * n], 0.0),
        };
        Ok(Self { fft, n, nu, k2: k_squared(n), kx, ky, keep, force, drag })
    }

    fn max_speed(&mut self, w: &[Complex64]) -> f64 {
        let (u, v) = velocity_spectra(w, &self.kx, &self.ky, &self.k2);
        let (u, v) = (self.fft.inverse_real(&u), self.fft.inverse_real(&v));
        u.iter().zip(&v).fold(0.0f64, |m, (a, b)| m.max(a.abs()).max(b.abs()))
    }

    /// Explicit part: `−u·∇ω + f − drag·ω`, dealiased.
    fn explicit(&mut self, w: &[Complex64]) -> Vec<Complex64> {
        let n2 = self.n * self.n;
        let wf: Vec<Complex64> = w.iter().zip(&self.keep).map(|(c, &k)| if k { *c } else { Complex64::default() }).collect();
        let (u, v) = velocity_spectra(&wf, &self.kx, &self.ky, &self.k2);
        let wx: Vec<Complex64> = (0..n2).map(|i| Complex64::new(0.0, self.kx[i]) * wf[i]).collect();
        let wy: Vec<Complex64> = (0..n2).map(|i| Complex64::new(0.0, self.ky[i]) * wf[i]).collect();
        let (u, v, wx, wy) = (self.fft.inverse_real(&u), self.fft.inverse_real(&v), self.fft.inverse_real(&wx), self.fft.inverse_real(&wy));
        let adv: Vec<f64> = (0..n2).map(|i| u[i] * wx[i] + v[i] * wy[i]).collect();
        let a = self.fft.forward_real(&adv);
        (0..n2)
            .map(|i| {
                let nl = if self.keep[i] { -a[i] } else { Complex64::default() };
                nl + self.force[i] - w[i] * self.drag
            })
            .collect()
    }

    /// Crank–Nicolson diffusion with Heun (RK2) treatment of the explicit part.
    fn step(&mut self, w: &[Complex64], h: f64) -> Vec<Complex64> {
        let n0 = self.explicit(w);
        let lhs: Vec<f64> = self.k2.iter().map(|k| 1.0 + 0.5 * h * self.nu * k).collect();
        let rhs: Vec<f64> = self.k2.iter().map(|k| 1.0 - 0.5 * h * self.nu * k).collect();
        let star: Vec<Complex64> = (0..w.len()).map(|i| (w[i] * rhs[i] + n0[i] * h) / lhs[i]).collect();
        let n1 = self.explicit(&star);
        (0..w.len()).map(|i| (w[i] * rhs[i] + (n0[i] + n1[i]) * (0.5 * h)) / lhs[i]).collect()
    }
}

/// 2D incompressible vorticity on `[0, 2π)²` at Reynolds number `re` (`ν = 1/re`).
pub fn gen_vorticity2d(re: f64, n: usize, frames: usize, dt: f64, substeps: usize, forcing: Forcing, seed: u64) -> Result<Trajectory> {
    if !(re > 0.0) {
        return invalid(format!("Reynolds number must be positive, got {re}"));
    }
    check_grid(n)?;
    if !(dt > 0.0) || substeps == 0 {
        return invalid("dt must be positive and substeps at least one");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w0 = random_band_field(&mut rng, n, 2, 5, 3.0);
    let mean = w0.iter().sum::<f64>() / w0.len() as f64;
    w0.iter_mut().for_each(|v| *v -= mean);
    let mut sys = Vorticity::new(n, 1.0 / re, forcing)?;
    let h = dt / substeps as f64;
    let dx = TWO_PI / n as f64;
    let mut w = sys.fft.forward_real(&w0);
    let mut out = Vec::with_capacity(frames * n * n);
    out.extend_from_slice(&w0);
    for _ in 1..frames {
        for _ in 0..substeps {
            let courant = sys.max_speed(&w) * h / dx;
            if !(courant <= 1.0) {
                return Err(Error::Cfl { courant });
            }
            w = sys.step(&w, h);
        }
        out.extend(sys.fft.inverse_real(&w));
    }
    Ok(Trajectory { frames: out, extents: vec![n, n], channels: 1, dt, xi: vec![re], domain: periodic(2) })
}

/// Velocity components of a vorticity frame on an `n×n` grid.
pub fn velocity_from_vorticity(w: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let sys = Vorticity::new(n, 0.0, Forcing::None)?;
    let mut fft = Fft2::new(n)?;
    let (u, v) = velocity_spectra(&fft.forward_real(w), &sys.kx, &sys.ky, &sys.k2);
    Ok((fft.inverse_real(&u), fft.inverse_real(&v)))
}

/// Spectral divergence `∂x u + ∂y v`.
pub fn divergence(u: &[f64], v: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut fft = Fft2::new(n)?;
    let (us, vs) = (fft.forward_real(u), fft.forward_real(v));
    let d: Vec<Complex64> = (0..n * n)
        .map(|idx| {
            let (kx, ky) = (wavenumber(idx / n, n) as f64, wavenumber(idx % n, n) as f64);
            Complex64::new(0.0, kx) * us[idx] + Complex64::new(0.0, ky) * vs[idx]
        })
        .collect();
    Ok(fft.inverse_real(&d))
}

/// Multilinear periodic interpolation of one frame at arbitrary points.
pub fn interpolate(frame: &[f64], extents: &[usize], channels: usize, domain: &Domain, points: &[f64]) -> Vec<f64> {
    let d = extents.len();
    let mut out = Vec::with_capacity(points.len() / d * channels);
    for p in points.chunks(d) {
        let mut base = vec![0usize; d];
        let mut frac = vec![0.0; d];
        for a in 0..d {
            let s = extents[a] as f64;
            let x = (p[a] - domain.lo[a]) / (domain.hi[a] - domain.lo[a]) * s;
            let f = x.floor();
            base[a] = (f as i64).rem_euclid(extents[a] as i64) as usize;
            frac[a] = x - f;
        }
        let mut acc = vec![0.0; channels];
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut flat = 0;
            for a in 0..d {
                let bit = (corner >> a) & 1;
                w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                flat = flat * extents[a] + (base[a] + bit) % extents[a];
            }
            if w != 0.0 {
                for c in 0..channels {
                    acc[c] += w * frame[flat * channels + c];
                }
            }
        }
        out.extend(acc);
    }
    out
}

/// Uniformly scattered points, fixed per trajectory, with interpolated frame values.
pub fn sample_scatter(traj: &Trajectory, n_points: usize, seed: u64) -> Result<Vec<PointCloudField>> {
    if n_points < 16 {
        return invalid(format!("scatter needs at least 16 points, got {n_points}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dom = &traj.domain;
    let d = dom.dim();
    let mut coords = Vec::with_capacity(n_points * d);
    for _ in 0..n_points {
        for a in 0..d {
            let x = rng.gen_range(dom.lo[a]..dom.hi[a]);
            coords.push(x);
        }
    }
    let cloud = PointCloud::uniform(dom.clone(), coords)?;
    (0..traj.len())
        .map(|m| {
            let vals = interpolate(traj.frame(m), &traj.extents, traj.channels, dom, &cloud.coords);
            Ok(PointCloudField { cloud: cloud.clone(), values: Tensor::from_vec(vals, &[n_points, traj.channels])? })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Per-channel standardization and per-parameter min-max range, from the train split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub xi_min: Vec<f64>,
    pub xi_max: Vec<f64>,
}

impl Normalization {
    pub fn fit<'a>(train: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut sum = Vec::new();
        let mut sq = Vec::new();
        let mut count = 0usize;
        let mut xi_min: Vec<f64> = Vec::new();
        let mut xi_max: Vec<f64> = Vec::new();
        for t in train {
            let c = t.channels;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
                xi_min = t.xi.clone();
                xi_max = t.xi.clone();
            }
            for chunk in t.frames.chunks(c) {
                for (k, v) in chunk.iter().enumerate() {
                    sum[k] += v;
                    sq[k] += v * v;
                }
            }
            count += t.frames.len() / c;
            for (k, &x) in t.xi.iter().enumerate() {
                xi_min[k] = xi_min[k].min(x);
                xi_max[k] = xi_max[k].max(x);
            }
        }
        if count == 0 {
            return Self::default();
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let var = (s / count as f64 - m * m).max(0.0);
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std, xi_min, xi_max }
    }

    /// Standardize `(.., C)`-interleaved values in place.
    pub fn normalize(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for chunk in values.chunks_mut(c) {
            for k in 0..c {
                chunk[k] = (chunk[k] - self.mean[k]) / self.std[k];
            }
        }
    }

    pub fn denormalize(&self, values: &mut [f64]) {
        let c = self.mean.len();
        for chunk in values.chunks_mut(c) {
            for k in 0..c {
                chunk[k] = chunk[k] * self.std[k] + self.mean[k];
            }
        }
    }

    /// Parameters mapped to `[0, 1]`; degenerate ranges map to 0.
    pub fn xi(&self, xi: &[f64]) -> Vec<f64> {
        xi.iter()
            .enumerate()
            .map(|(k, &x)| {
                let span = self.xi_max[k] - self.xi_min[k];
                if span > 0.0 {
                    (x - self.xi_min[k]) / span
                } else {
                    0.0
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub problem: Option<Problem>,
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub norm: Normalization,
}

pub const DATASET_MAGIC: &[u8; 8] = b"LFMDATA1";
pub const DATASET_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct TrajHeader {
    frames: usize,
    extents: Vec<usize>,
    channels: usize,
    dt: f64,
    xi: Vec<f64>,
    domain: Domain,
    split: Split,
}

impl Dataset {
    /// Assemble a dataset and fit normalization on its train split.
    pub fn new(problem: Option<Problem>, trajectories: Vec<Trajectory>, splits: Vec<Split>) -> Result<Self> {
        if trajectories.len() != splits.len() {
            return invalid("one split label per trajectory");
        }
        let norm = Normalization::fit(trajectories.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(t, _)| t));
        Ok(Self { problem, trajectories, splits, norm })
    }

    pub fn split(&self, which: Split) -> Vec<&Trajectory> {
        self.trajectories.iter().zip(&self.splits).filter(|(_, s)| **s == which).map(|(t, _)| t).collect()
    }

    /// Normalized frames `start..start+count` of a trajectory as `(count, n, C)`.
    pub fn normalized_window(&self, traj: &Trajectory, start: usize, count: usize) -> Result<Tensor> {
        let w = traj.window(start, count)?;
        w.update_data(|d| self.norm.normalize(d));
        Ok(w)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let trajs: Vec<TrajHeader> = self
            .trajectories
            .iter()
            .zip(&self.splits)
            .map(|(t, &split)| TrajHeader {
                frames: t.len(),
                extents: t.extents.clone(),
                channels: t.channels,
                dt: t.dt,
                xi: t.xi.clone(),
                domain: t.domain.clone(),
                split,
            })
            .collect();
        let header = json!({
            "version": DATASET_VERSION,
            "problem": self.problem,
            "normalization": self.norm,
            "trajectories": trajs,
        });
        let shapes: Vec<Vec<usize>> = self
            .trajectories
            .iter()
            .map(|t| {
                let mut s = vec![t.len()];
                s.extend_from_slice(&t.extents);
                s.push(t.channels);
                s
            })
            .collect();
        let blocks: Vec<(&[usize], &[f64])> = shapes.iter().zip(&self.trajectories).map(|(s, t)| (s.as_slice(), t.frames.as_slice())).collect();
        container::encode(DATASET_MAGIC, &header, &blocks)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = container::decode(DATASET_MAGIC, bytes, |h| {
            let version = h["version"].as_u64().unwrap_or(0);
            if version != DATASET_VERSION {
                return Err(Error::Format(format!("dataset version {version}, this build reads {DATASET_VERSION}")));
            }
            Ok(h["trajectories"].as_array().map_or(0, |a| a.len()))
        })?;
        let h = decoded.header;
        let problem: Option<Problem> = serde_json::from_value(h["problem"].clone())?;
        let norm: Normalization = serde_json::from_value(h["normalization"].clone())?;
        let heads: Vec<TrajHeader> = serde_json::from_value(h["trajectories"].clone())?;
        let mut trajectories = Vec::with_capacity(heads.len());
        let mut splits = Vec::with_capacity(heads.len());
        for (th, (shape, data)) in heads.into_iter().zip(decoded.blocks) {
            let mut expect = vec![th.frames];
            expect.extend_from_slice(&th.extents);
            expect.push(th.channels);
            if shape != expect {
                return Err(Error::Format(format!("trajectory block shape {shape:?} vs header {expect:?}")));
            }
            splits.push(th.split);
            trajectories.push(Trajectory { frames: data, extents: th.extents, channels: th.channels, dt: th.dt, xi: th.xi, domain: th.domain });
        }
        Ok(Self { problem, trajectories, splits, norm })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Generation settings for one problem family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub problem: Problem,
    pub n: usize,
    pub frames: usize,
    pub dt: f64,
    pub substeps: usize,
    /// Range of ν (heat2d, burgers1d) or Re (vorticity2d), drawn uniformly per trajectory.
    pub param_range: [f64; 2],
    pub forcing: Forcing,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self::for_problem(Problem::Heat2d)
    }
}

impl DataConfig {
    pub fn for_problem(problem: Problem) -> Self {
        let base = Self {
            problem,
            n: 64,
            frames: 120,
            dt: 0.05,
            substeps: 1,
            param_range: [0.005, 0.02],
            forcing: Forcing::Kolmogorov,
            train: 64,
            valid: 8,
            test: 8,
            seed: 0,
        };
        match problem {
            Problem::Heat2d => base,
            Problem::Burgers1d => Self { dt: 0.05, substeps: 10, param_range: [0.02, 0.1], ..base },
            Problem::Vorticity2d => Self { dt: 0.2, substeps: 10, param_range: [500.0, 1000.0], ..base },
        }
    }

    /// Defaults for `problem` overlaid with the fields present in `overrides`.
    pub fn with_overrides(problem: Problem, overrides: &serde_json::Value) -> Result<Self> {
        let mut v = serde_json::to_value(Self::for_problem(problem))?;
        if let (Some(base), Some(o)) = (v.as_object_mut(), overrides.as_object()) {
            for (k, val) in o {
                base.insert(k.clone(), val.clone());
            }
        }
        let cfg: Self = serde_json::from_value(v)?;
        if cfg.problem != problem {
            return invalid(format!("config problem {:?} disagrees with requested {problem:?}", cfg.problem));
        }
        Ok(cfg)
    }

    pub fn generate_one(&self, param: f64, seed: u64) -> Result<Trajectory> {
        match self.problem {
            Problem::Heat2d => gen_heat2d(param, self.n, self.frames, self.dt, seed),
            Problem::Burgers1d => gen_burgers1d(param, self.n, self.frames, self.dt, self.substeps, seed),
            Problem::Vorticity2d => gen_vorticity2d(param, self.n, self.frames, self.dt, self.substeps, self.forcing, seed),
        }
    }
}

/// Per-item seed derived from a base seed and an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut r = ChaCha8Rng::seed_from_u64(base);
    r.set_stream(index);
    r.next_u64()
}

/// Generate all splits in parallel; each trajectory depends only on `(cfg, index)`.
pub fn generate(cfg: &DataConfig) -> Result<Dataset> {
    let total = cfg.train + cfg.valid + cfg.test;
    let [lo, hi] = cfg.param_range;
    if !(lo <= hi) {
        return invalid("param_range must be ordered");
    }
    let trajectories: Vec<Trajectory> = (0..total)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let param = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            cfg.generate_one(param, rng.next_u64())
        })
        .collect::<Result<_>>()?;
    let splits = (0..total)
        .map(|i| if i < cfg.train { Split::Train } else if i < cfg.train + cfg.valid { Split::Valid } else { Split::Test })
        .collect();
    Dataset::new(Some(cfg.problem), trajectories, splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn energy(f: &[f64]) -> f64 {
        f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64
    }

    #[test]
    fn heat_single_mode_decay() {
        let n = 16;
        let (nu, dt) = (0.1, 0.3);
        let mut fft = Fft2::new(n).unwrap();
        // cos(3x) evolved exactly
        let u0: Vec<f64> = (0..n * n).map(|idx| (3.0 * TWO_PI * (idx / n) as f64 / n as f64).cos()).collect();
        let s0 = fft.forward_real(&u0);
        let k2 = k_squared(n);
        let s1: Vec<Complex64> = s0.iter().zip(&k2).map(|(c, k)| c * (-nu * k * dt).exp()).collect();
        let u1 = fft.inverse_real(&s1);
        let amp = u1[0];
        assert!((amp - (-9.0 * nu * dt).exp()).abs() < 1e-12);
    }

    #[test]
    fn heat_trajectory_is_per_mode_exact() {
        let (nu, dt, n) = (0.02, 0.1, 32);
        let t = gen_heat2d(nu, n, 6, dt, 3).unwrap();
        let mut fft = Fft2::new(n).unwrap();
        let k2 = k_squared(n);
        let scale = fft.forward_real(t.frame(0)).iter().fold(0.0f64, |m, c| m.max(c.norm()));
        for m in 0..5 {
            let a = fft.forward_real(t.frame(m));
            let b = fft.forward_real(t.frame(m + 1));
            for i in 0..n * n {
                let want = a[i] * (-nu * k2[i] * dt).exp();
                assert!((b[i] - want).norm() / scale < 1e-12);
            }
        }
        let means: Vec<f64> = (0..6).map(|m| t.frame(m).iter().sum::<f64>()).collect();
        for m in &means {
            assert!((m - means[0]).abs() < 1e-9 * means[0].abs().max(1.0));
        }
        for m in 0..5 {
            assert!(energy(t.frame(m + 1)) <= energy(t.frame(m)) + 1e-15);
        }
        assert!(gen_heat2d(-1.0, n, 3, dt, 0).is_err());
        assert!(gen_heat2d(0.1, 30, 3, dt, 0).is_err());
    }

    #[test]
    fn burgers_conserves_momentum() {
        let t = gen_burgers1d(0.05, 128, 201, 0.05, 10, 4).unwrap();
        let mom: Vec<f64> = (0..t.len()).map(|m| t.frame(m).iter().sum::<f64>()).collect();
        let l1: f64 = t.frame(0).iter().map(|v| v.abs()).sum();
        for m in &mom {
            assert!((m - mom[0]).abs() / l1 <= 1e-8);
        }
    }

    #[test]
    fn burgers_large_viscosity_decays_to_mean() {
        let t = gen_burgers1d(1.0, 64, 30, 0.05, 40, 5).unwrap();
        let dev = |m: usize| {
            let f = t.frame(m);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            f.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt()
        };
        for m in 0..t.len() - 1 {
            assert!(dev(m + 1) < dev(m));
        }
        // slowest mode k=1 decays like exp(−ν t)
        assert!(dev(t.len() - 1) < 1.05 * (-1.45f64).exp() * dev(0));
    }

    #[test]
    fn burgers_rk4_step_halving() {
        let run = |s| gen_burgers1d(0.05, 64, 3, 0.2, s, 6).unwrap().frame(2).to_vec();
        let (a, b, c) = (run(16), run(32), run(64));
        let e1: f64 = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        let e2: f64 = b.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        // fourth order against the finest run: (1 - 1/256)/(1/16 - 1/256) = 17
        let ratio = e1 / e2;
        assert!(ratio > 12.0 && ratio < 22.0, "ratio {ratio}");
    }

    #[test]
    fn burgers_cfl_violation() {
        let err = gen_burgers1d(0.01, 64, 3, 1.0, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Cfl { .. }));
        assert!(err.to_string().contains("dt"));
    }

    #[test]
    fn vorticity_divergence_free_and_reproducible() {
        let t = gen_vorticity2d(500.0, 32, 4, 0.1, 5, Forcing::Kolmogorov, 7).unwrap();
        for m in 0..t.len() {
            let (u, v) = velocity_from_vorticity(t.frame(m), 32).unwrap();
            let d = divergence(&u, &v, 32).unwrap();
            assert!(d.iter().fold(0.0f64, |a, x| a.max(x.abs())) <= 1e-8);
        }
        let again = gen_vorticity2d(500.0, 32, 4, 0.1, 5, Forcing::Kolmogorov, 7).unwrap();
        assert!(t.frames.iter().zip(&again.frames).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(matches!(gen_vorticity2d(500.0, 32, 3, 50.0, 1, Forcing::None, 7), Err(Error::Cfl { .. })));
    }

    #[test]
    fn unforced_enstrophy_non_increasing() {
        let t = gen_vorticity2d(200.0, 32, 20, 0.1, 10, Forcing::None, 8).unwrap();
        for m in 0..t.len() - 1 {
            assert!(energy(t.frame(m + 1)) <= energy(t.frame(m)) * (1.0 + 1e-12), "frame {m}");
        }
    }

    #[test]
    fn interpolation_contracts() {
        let t = gen_heat2d(0.01, 16, 2, 0.1, 1).unwrap();
        let nodes = t.domain.lattice(&t.extents);
        let vals = interpolate(t.frame(1), &t.extents, 1, &t.domain, &nodes);
        for (a, b) in vals.iter().zip(t.frame(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = Trajectory { frames: vec![2.5; 2 * 64], extents: vec![8, 8], channels: 1, dt: 1.0, xi: vec![], domain: periodic(2) };
        let s = sample_scatter(&c, 40, 3).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s[0].values.data().iter().all(|v| (v - 2.5).abs() < 1e-12));
        assert!(s[0].cloud.weights.iter().all(|w| (w - TWO_PI * TWO_PI / 40.0).abs() < 1e-12));
        let other = sample_scatter(&c, 40, 4).unwrap();
        assert_ne!(s[0].cloud.coords, other[0].cloud.coords);
        assert_eq!(s[0].cloud.coords, s[1].cloud.coords);
        assert!(sample_scatter(&c, 8, 3).is_err());
        // 1D linear interpolation midway between nodes
        let l = Trajectory { frames: vec![0.0, 1.0, 2.0, 3.0], extents: vec![4], channels: 1, dt: 1.0, xi: vec![], domain: periodic(1) };
        let mid = interpolate(&l.frames, &l.extents, 1, &l.domain, &[TWO_PI * 3.5 / 4.0]);
        assert!((mid[0] - 1.5).abs() < 1e-12);
    }

    fn small_config() -> DataConfig {
        DataConfig { n: 16, frames: 5, train: 3, valid: 1, test: 1, ..DataConfig::for_problem(Problem::Heat2d) }
    }

    #[test]
    fn dataset_round_trip_and_normalization() {
        let ds = generate(&small_config()).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 3);
        let bytes = ds.to_bytes().unwrap();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 0x40;
        assert!(matches!(Dataset::from_bytes(&bad), Err(Error::Digest { .. })));
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 40]).is_err());

        // statistics come from the train split only
        let train: Vec<f64> = ds.split(Split::Train).iter().flat_map(|t| t.frames.clone()).collect();
        let mean = train.iter().sum::<f64>() / train.len() as f64;
        assert!((ds.norm.mean[0] - mean).abs() < 1e-12);
        let mut normed = train.clone();
        ds.norm.normalize(&mut normed);
        let m2 = normed.iter().sum::<f64>() / normed.len() as f64;
        let v2 = normed.iter().map(|v| (v - m2).powi(2)).sum::<f64>() / normed.len() as f64;
        assert!(m2.abs() < 1e-10 && (v2 - 1.0).abs() < 1e-10);
        for t in ds.split(Split::Train) {
            assert!(ds.norm.xi(&t.xi).iter().all(|x| (0.0..=1.0).contains(x)));
        }
        ds.norm.denormalize(&mut normed);
        assert!(normed.iter().zip(&train).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn empty_dataset_and_version() {
        let ds = Dataset::new(None, vec![], vec![]).unwrap();
        let bytes = ds.to_bytes().unwrap();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
        let header = json!({"version": 99, "trajectories": []});
        let other = container::encode(DATASET_MAGIC, &header, &[]).unwrap();
        assert!(matches!(Dataset::from_bytes(&other), Err(Error::Format(_))));
    }

    #[test]
    fn generation_is_pure_in_seed() {
        let cfg = small_config();
        let a = generate(&cfg).unwrap();
        assert_eq!(a, generate(&cfg).unwrap());
        let b = generate(&DataConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.trajectories[0].frames, b.trajectories[0].frames);
        for t in &a.trajectories {
            t.validate(2).unwrap();
        }
    }

    #[test]
    fn overrides_merge_onto_problem_defaults() {
        let cfg = DataConfig::with_overrides(Problem::Burgers1d, &json!({"n": 32, "train": 2})).unwrap();
        assert_eq!((cfg.n, cfg.train, cfg.substeps), (32, 2, 10));
        assert!(DataConfig::with_overrides(Problem::Burgers1d, &json!({"problem": "heat2d"})).is_err());
        assert_eq!("vorticity2d".parse::<Problem>().unwrap(), Problem::Vorticity2d);
        assert!("wave".parse::<Problem>().is_err());
    }
}
