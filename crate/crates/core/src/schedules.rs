//! Diffusion paths `x_t = α(t)·x0 + σ(t)·ε` on `t ∈ [0, 1]`, with `t = 0`
//! the clean data and `t = 1` the noise end, plus the discretization grids
//! used for training and sampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Continuous-time β range equivalent to a 1000-step linear DDPM schedule
/// over `[1e-4, 2e-2]`.
pub const DDPM_BETA_RANGE: (f64, f64) = (0.1, 20.0);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiffusionPath {
    /// `α = 1 − t`, `σ = t`.
    FlowLinear,
    /// Geometric noise levels `σ(t) = σ_min^(1−t)` for `t > 0`, `σ(0) = 0`.
    /// With `variance_preserving`, `α = √(1 − σ²)`; otherwise `α = 1`.
    ExponentialRefiner { sigma_min: f64, variance_preserving: bool },
    /// Variance-preserving SDE with linear `β(t) = β0 + (β1 − β0)·t`.
    VpDdpm { beta_min: f64, beta_max: f64 },
}

/// `f = d log α/dt`, `g² = dσ²/dt − 2 f σ²`.
pub fn sde_coefficients(alpha: f64, d_alpha: f64, sigma: f64, d_sigma: f64) -> (f64, f64) {
    let f = d_alpha / alpha;
    let d_sigma2 = 2.0 * sigma * d_sigma;
    (f, d_sigma2 - 2.0 * f * sigma * sigma)
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::InvalidArgument(format!("diffusion time {t} outside [0, 1]")));
    }
    Ok(())
}

impl DiffusionPath {
    pub fn exponential(sigma_min: f64) -> Self {
        DiffusionPath::ExponentialRefiner { sigma_min, variance_preserving: true }
    }

    pub fn vp_ddpm() -> Self {
        DiffusionPath::VpDdpm { beta_min: DDPM_BETA_RANGE.0, beta_max: DDPM_BETA_RANGE.1 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DiffusionPath::FlowLinear => Ok(()),
            DiffusionPath::ExponentialRefiner { sigma_min, .. } => {
                if sigma_min > 0.0 && sigma_min < 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("sigma_min {sigma_min} must lie in (0, 1)")))
                }
            }
            DiffusionPath::VpDdpm { beta_min, beta_max } => {
                if beta_min > 0.0 && beta_max >= beta_min {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!("beta range [{beta_min}, {beta_max}] invalid")))
                }
            }
        }
    }

    /// Lowest nonzero noise level reached as `t → 0⁺`.
    pub fn min_noise_level(&self) -> f64 {
        match *self {
            DiffusionPath::ExponentialRefiner { sigma_min, .. } => sigma_min,
            _ => 0.0,
        }
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        check_unit(t)?;
        Ok(match *self {
            DiffusionPath::FlowLinear => (1.0 - t, t),
            DiffusionPath::ExponentialRefiner { sigma_min, variance_preserving } => {
                let sigma = if t == 0.0 { 0.0 } else { sigma_min.powf(1.0 - t) };
                let alpha = if variance_preserving { (1.0 - sigma * sigma).max(0.0).sqrt() } else { 1.0 };
                (alpha, sigma)
            }
            DiffusionPath::VpDdpm { beta_min, beta_max } => {
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                ((-0.5 * integral).exp(), (-(-integral).exp_m1()).sqrt())
            }
        })
    }

    /// `(dα/dt, dσ/dt)`; used for the SDE coefficients.
    fn derivatives(&self, t: f64) -> (f64, f64) {
        match *self {
            DiffusionPath::FlowLinear => (-1.0, 1.0),
            DiffusionPath::ExponentialRefiner { sigma_min, variance_preserving } => {
                let sigma = sigma_min.powf(1.0 - t);
                let d_sigma = -sigma_min.ln() * sigma;
                let d_alpha = if variance_preserving { -sigma * d_sigma / (1.0 - sigma * sigma).sqrt() } else { 0.0 };
                (d_alpha, d_sigma)
            }
            DiffusionPath::VpDdpm { beta_min, beta_max } => {
                let beta = beta_min + (beta_max - beta_min) * t;
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                let alpha = (-0.5 * integral).exp();
                let sigma = (-(-integral).exp_m1()).sqrt();
                // dσ²/dt = α²β
                (-0.5 * beta * alpha, alpha * alpha * beta / (2.0 * sigma))
            }
        }
    }

    /// Forward-SDE drift and squared diffusion `(f(t), g²(t))`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        check_unit(t)?;
        if t <= 0.0 || t >= 1.0 {
            return Err(Error::InvalidArgument(format!("drift/diffusion needs interior t, got {t}")));
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("alpha vanishes at t = {t}")));
        }
        let (d_alpha, d_sigma) = self.derivatives(t);
        Ok(sde_coefficients(alpha, d_alpha, sigma, d_sigma))
    }

    /// Noise-to-signal ratio `λ = σ/α`.
    pub fn lambda_of(&self, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        if alpha <= 0.0 {
            return Err(Error::InvalidArgument(format!("lambda undefined where alpha = 0 (t = {t})")));
        }
        Ok(sigma / alpha)
    }

    /// `x_t = α(t)·x0 + σ(t)·ε`.
    pub fn perturb(&self, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::ShapeMismatch { op: "perturb", lhs: x0.shape().to_vec(), rhs: eps.shape().to_vec() });
        }
        let (alpha, sigma) = self.alpha_sigma(t)?;
        x0.mul_scalar(alpha).add(&eps.mul_scalar(sigma))
    }

    pub fn make_grid(&self, steps: usize, spacing: Spacing) -> Result<TimeGrid> {
        if steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        let uniform = || TimeGrid::new((0..=steps).map(|i| i as f64 / steps as f64).collect());
        match spacing {
            Spacing::UniformT => uniform(),
            Spacing::UniformLogLambda => {
                if steps < 3 {
                    return uniform();
                }
                // interior knots equispaced in log λ between λ(1/K) and λ(1 − 1/K)
                let lo = 1.0 / steps as f64;
                let hi = 1.0 - lo;
                let (l_lo, l_hi) = (self.lambda_of(lo)?.ln(), self.lambda_of(hi)?.ln());
                let mut knots = vec![0.0];
                for i in 1..steps {
                    let target = l_lo + (i - 1) as f64 / (steps - 2) as f64 * (l_hi - l_lo);
                    knots.push(self.invert_log_lambda(target, lo, hi)?);
                }
                knots.push(1.0);
                TimeGrid::new(knots)
            }
        }
    }

    fn invert_log_lambda(&self, target: f64, mut lo: f64, mut hi: f64) -> Result<f64> {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.lambda_of(mid)?.ln() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    #[default]
    UniformT,
    UniformLogLambda,
}

/// Strictly increasing knots `0 = t_0 < … < t_K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    knots: Vec<f64>,
}

impl TimeGrid {
    pub fn new(knots: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 || *knots.last().unwrap() != 1.0 {
            return Err(Error::InvalidArgument(format!("time grid must run from 0 to 1, got {knots:?}")));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("time grid knots must be strictly increasing".into()));
        }
        Ok(Self { knots })
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Noisy training times `t_1..t_K`; `t_0 = 0` carries no noise.
    pub fn training_knots(&self) -> &[f64] {
        &self.knots[1..]
    }
}

/// Serialized form `{kind, sigma_min?, beta_range?, variance_preserving?, K, spacing}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub kind: PathKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variance_preserving: Option<bool>,
    #[serde(rename = "K")]
    pub steps: usize,
    #[serde(default)]
    pub spacing: Spacing,
    /// Sampling steps when they differ from the training discretization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_steps: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathKind {
    FlowLinear,
    ExponentialRefiner,
    VpDdpm,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self::flow(10)
    }
}

impl PathConfig {
    pub fn flow(steps: usize) -> Self {
        Self {
            kind: PathKind::FlowLinear,
            sigma_min: None,
            beta_range: None,
            variance_preserving: None,
            steps,
            spacing: Spacing::UniformT,
            sample_steps: None,
        }
    }

    pub fn exponential(sigma_min: f64, steps: usize) -> Self {
        Self { kind: PathKind::ExponentialRefiner, sigma_min: Some(sigma_min), ..Self::flow(steps) }
    }

    pub fn path(&self) -> Result<DiffusionPath> {
        let path = match self.kind {
            PathKind::FlowLinear => DiffusionPath::FlowLinear,
            PathKind::ExponentialRefiner => DiffusionPath::ExponentialRefiner {
                sigma_min: self
                    .sigma_min
                    .ok_or_else(|| Error::InvalidArgument("exponential path requires sigma_min".into()))?,
                variance_preserving: self.variance_preserving.unwrap_or(true),
            },
            PathKind::VpDdpm => {
                let [beta_min, beta_max] = self.beta_range.unwrap_or([DDPM_BETA_RANGE.0, DDPM_BETA_RANGE.1]);
                DiffusionPath::VpDdpm { beta_min, beta_max }
            }
        };
        path.validate()?;
        Ok(path)
    }

    pub fn train_grid(&self) -> Result<TimeGrid> {
        self.path()?.make_grid(self.steps, self.spacing)
    }

    pub fn sample_grid(&self) -> Result<TimeGrid> {
        self.path()?.make_grid(self.sample_steps.unwrap_or(self.steps), self.spacing)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    const SIGMA_MINS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-6];

    fn all_paths() -> Vec<DiffusionPath> {
        let mut v = vec![DiffusionPath::FlowLinear, DiffusionPath::vp_ddpm()];
        for s in SIGMA_MINS {
            v.push(DiffusionPath::exponential(s));
            v.push(DiffusionPath::ExponentialRefiner { sigma_min: s, variance_preserving: false });
        }
        v
    }

    #[test]
    fn flow_linear_endpoints() {
        let p = DiffusionPath::FlowLinear;
        assert_eq!(p.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        assert_eq!(p.alpha_sigma(1.0).unwrap(), (0.0, 1.0));
        assert_eq!(p.alpha_sigma(0.3).unwrap(), (0.7, 0.3));
    }

    #[test]
    fn out_of_range_time_errors() {
        assert!(DiffusionPath::FlowLinear.alpha_sigma(1.5).is_err());
        assert!(DiffusionPath::FlowLinear.alpha_sigma(-0.1).is_err());
    }

    #[test]
    fn exponential_knot_closed_form() {
        // σ_min = 1e-2, K = 10: knot 5 sits at noise level 1e-2^(1/2)
        let p = DiffusionPath::exponential(1e-2);
        let grid = p.make_grid(10, Spacing::UniformT).unwrap();
        let (_, sigma) = p.alpha_sigma(grid.knots()[5]).unwrap();
        assert!((sigma - 1e-1).abs() < 1e-15);
    }

    #[test]
    fn exponential_min_noise_level_is_sigma_min() {
        for s in SIGMA_MINS {
            let p = DiffusionPath::exponential(s);
            assert_eq!(p.min_noise_level(), s);
            let (_, near_zero) = p.alpha_sigma(1e-12).unwrap();
            assert!((near_zero / s - 1.0).abs() < 1e-9);
            assert_eq!(p.alpha_sigma(1.0).unwrap().1, 1.0);
        }
    }

    #[test]
    fn path_invariants_on_dense_grid() {
        for p in all_paths() {
            assert_eq!(p.alpha_sigma(0.0).unwrap(), (1.0, 0.0), "{p:?}");
            let mut prev = p.alpha_sigma(0.0).unwrap();
            let mut prev_lambda = 0.0;
            for i in 1..=1000 {
                let t = i as f64 / 1000.0;
                let (a, s) = p.alpha_sigma(t).unwrap();
                assert!(a <= prev.0 + 1e-15 && s >= prev.1 - 1e-15, "{p:?} at {t}");
                if a > 0.0 {
                    let l = p.lambda_of(t).unwrap();
                    assert!(l > prev_lambda, "{p:?} lambda not increasing at {t}");
                    prev_lambda = l;
                }
                prev = (a, s);
            }
        }
    }

    #[test]
    fn flow_linear_coefficients_at_half() {
        // symbolic: α = 1 − t, σ = t ⇒ f = −1/(1−t) = −2, g² = 2t + 2t²/(1−t) = 2
        let (f, g2) = DiffusionPath::FlowLinear.drift_diffusion(0.5).unwrap();
        assert!((f + 2.0).abs() < 1e-15);
        assert!((g2 - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_schedule_has_zero_coefficients() {
        assert_eq!(sde_coefficients(0.8, 0.0, 0.6, 0.0), (0.0, 0.0));
    }

    #[test]
    fn vp_ddpm_diffusion_nonnegative() {
        let p = DiffusionPath::vp_ddpm();
        for i in 1..1000 {
            let (_, g2) = p.drift_diffusion(i as f64 / 1000.0).unwrap();
            assert!(g2 >= 0.0);
        }
    }

    #[test]
    fn coefficients_match_finite_differences() {
        for p in all_paths() {
            for &t in &[0.2, 0.5, 0.8] {
                let h = 1e-6;
                let (ap, sp) = p.alpha_sigma(t + h).unwrap();
                let (am, sm) = p.alpha_sigma(t - h).unwrap();
                let (a, s) = p.alpha_sigma(t).unwrap();
                let f_fd = (ap.ln() - am.ln()) / (2.0 * h);
                let ds2 = (sp * sp - sm * sm) / (2.0 * h);
                let g2_fd = ds2 - 2.0 * f_fd * s * s;
                let (f, g2) = p.drift_diffusion(t).unwrap();
                assert!((f - f_fd).abs() < 1e-6 * (1.0 + f.abs()), "{p:?} f at {t}");
                assert!((g2 - g2_fd).abs() < 1e-6 * (1.0 + g2.abs()), "{p:?} g2 at {t}");
                assert!(a > 0.0);
            }
        }
    }

    #[test]
    fn drift_at_vanishing_alpha_errors() {
        assert!(DiffusionPath::FlowLinear.drift_diffusion(1.0).is_err());
        assert!(DiffusionPath::FlowLinear.lambda_of(1.0).is_err());
    }

    #[test]
    fn lambda_examples() {
        let p = DiffusionPath::FlowLinear;
        assert_eq!(p.lambda_of(0.5).unwrap(), 1.0);
        assert_eq!(p.lambda_of(0.0).unwrap(), 0.0);
        assert!(p.lambda_of(1e-9).unwrap() < 1e-8);
    }

    #[test]
    fn perturb_endpoints_and_linearity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x0 = Tensor::randn(&[2, 3], &mut rng);
        let eps = Tensor::randn(&[2, 3], &mut rng);
        let p = DiffusionPath::FlowLinear;
        assert_eq!(p.perturb(&x0, 0.0, &eps).unwrap().to_vec(), x0.to_vec());
        assert_eq!(p.perturb(&x0, 1.0, &eps).unwrap().to_vec(), eps.to_vec());
        let zero = Tensor::zeros(&[2, 3]);
        for path in all_paths() {
            let (a, s) = path.alpha_sigma(0.37).unwrap();
            let out = path.perturb(&zero, 0.37, &eps).unwrap().to_vec();
            for (o, e) in out.iter().zip(eps.data().iter()) {
                assert_eq!(*o, s * e);
            }
            let clean = path.perturb(&x0, 0.37, &zero).unwrap().to_vec();
            for (c, x) in clean.iter().zip(x0.data().iter()) {
                assert_eq!(*c, a * x);
            }
        }
        assert!(p.perturb(&x0, 0.5, &Tensor::zeros(&[3, 2])).is_err());
    }

    #[test]
    fn grids() {
        let p = DiffusionPath::FlowLinear;
        let g = p.make_grid(10, Spacing::UniformT).unwrap();
        for (i, k) in g.knots().iter().enumerate() {
            assert!((k - i as f64 / 10.0).abs() < 1e-15);
        }
        assert_eq!(p.make_grid(1, Spacing::UniformT).unwrap().knots(), &[0.0, 1.0]);
        assert!(p.make_grid(0, Spacing::UniformT).is_err());
        let dense = p.make_grid(1000, Spacing::UniformT).unwrap();
        assert_eq!(dense.steps(), 1000);
        assert_eq!(dense.training_knots().len(), 1000);
        let logl = p.make_grid(8, Spacing::UniformLogLambda).unwrap();
        assert_eq!(logl.knots().len(), 9);
        let lam: Vec<f64> = logl.knots()[1..8].iter().map(|&t| p.lambda_of(t).unwrap().ln()).collect();
        let d0 = lam[1] - lam[0];
        for w in lam.windows(2) {
            assert!((w[1] - w[0] - d0).abs() < 1e-9);
        }
    }

    #[test]
    fn time_grid_rejects_bad_knots() {
        assert!(TimeGrid::new(vec![0.0, 0.5, 0.5, 1.0]).is_err());
        assert!(TimeGrid::new(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn config_round_trip() {
        let cfg = PathConfig::exponential(1e-3, 10);
        let json = serde_json::to_string(&cfg).unwrap();
        assert!(json.contains("\"kind\":\"exponential_refiner\"") && json.contains("\"K\":10"));
        let back: PathConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.path().unwrap(), DiffusionPath::exponential(1e-3));
        let vp: PathConfig = serde_json::from_str(r#"{"kind":"vp_ddpm","beta_range":[0.1,20.0],"K":10}"#).unwrap();
        assert_eq!(vp.path().unwrap(), DiffusionPath::vp_ddpm());
    }

    /// Probability-flow ODE `dx = [f x − ½ g² ∇log q_t] dt` with the exact
    /// Gaussian score, integrated by forward Euler on `[t0, t1]`.
    fn pf_ode_euler(x_start: f64, m: f64, s: f64, t0: f64, t1: f64, n: usize) -> f64 {
        let p = DiffusionPath::FlowLinear;
        let dt = (t1 - t0) / n as f64;
        let mut x = x_start;
        for i in 0..n {
            let t = t0 + i as f64 * dt;
            let (a, sg) = p.alpha_sigma(t).unwrap();
            let (f, g2) = p.drift_diffusion(t).unwrap();
            let var = a * a * s * s + sg * sg;
            let score = -(x - a * m) / var;
            x += dt * (f * x - 0.5 * g2 * score);
        }
        x
    }

    #[test]
    fn probability_flow_ode_tracks_linear_interpolant_first_order() {
        // Point-mass data: the trajectory is the straight line (1−t)x0 + tε,
        // which Euler follows exactly.
        let (x0, eps, t0, t1) = (0.7, -1.3, 0.1, 0.9);
        let start = (1.0 - t0) * x0 + t0 * eps;
        let exact = (1.0 - t1) * x0 + t1 * eps;
        assert!((pf_ode_euler(start, x0, 0.0, t0, t1, 20) - exact).abs() < 1e-12);
        // Gaussian data N(m, s²): x_t = α m + √(α²s² + σ²)(x0 − m)/s
        let (m, s, z) = (0.3, 0.5, 0.8);
        let traj = |t: f64| {
            let (a, sg) = DiffusionPath::FlowLinear.alpha_sigma(t).unwrap();
            a * m + (a * a * s * s + sg * sg).sqrt() * z
        };
        let g1 = (pf_ode_euler(traj(t0), m, s, t0, t1, 200) - traj(t1)).abs();
        let g2 = (pf_ode_euler(traj(t0), m, s, t0, t1, 400) - traj(t1)).abs();
        assert!(((g1 / g2) - 2.0).abs() < 0.15, "ratio {}", g1 / g2);
    }
}
