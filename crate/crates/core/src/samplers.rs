//! Reverse-process integrators: DDIM, ancestral, and flow-ODE Euler, plus the
//! telescoped multi-step form of a DDIM run.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::schedules::{DiffusionPath, TimeGrid};
use crate::tensor::Tensor;

/// What a network output represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Prediction {
    Noise,
    Velocity,
    Data,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Ddim,
    Ancestral,
    #[default]
    FlowEuler,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ddim" => Ok(SamplerMode::Ddim),
            "ancestral" => Ok(SamplerMode::Ancestral),
            "flow-euler" => Ok(SamplerMode::FlowEuler),
            other => invalid(format!("unknown sampler mode {other}")),
        }
    }
}

/// A network queried at `(x_t, t)`; any conditioning is bound inside.
pub trait Denoise {
    fn prediction(&self) -> Prediction;
    fn predict(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Adapter turning a closure into a [`Denoise`] implementation.
pub struct FnDenoiser<F> {
    pub prediction: Prediction,
    pub f: F,
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> Denoise for FnDenoiser<F> {
    fn prediction(&self) -> Prediction {
        self.prediction
    }

    fn predict(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        (self.f)(x, t)
    }
}

/// Noise-predicting models cannot express the clean estimate where `α = 0`;
/// there they are expected to output `x0` directly.
pub fn effective_prediction(declared: Prediction, path: &DiffusionPath, t: f64) -> Result<Prediction> {
    let (alpha, _) = path.alpha_sigma(t)?;
    Ok(if declared == Prediction::Noise && alpha == 0.0 { Prediction::Data } else { declared })
}

/// Recover `(x̂0, ε̂)` from a prediction at `(x_t, t)`.
pub fn split(pred: &Tensor, param: Prediction, x_t: &Tensor, t: f64, path: &DiffusionPath) -> Result<(Tensor, Tensor)> {
    if pred.shape() != x_t.shape() {
        return Err(Error::ShapeMismatch { op: "convert", lhs: pred.shape().to_vec(), rhs: x_t.shape().to_vec() });
    }
    let (alpha, sigma) = path.alpha_sigma(t)?;
    match param {
        Prediction::Noise => {
            if alpha == 0.0 {
                return invalid(format!("noise prediction gives no clean estimate where alpha = 0 (t = {t})"));
            }
            let x0 = x_t.sub(&pred.mul_scalar(sigma))?.mul_scalar(1.0 / alpha);
            Ok((x0, pred.clone()))
        }
        Prediction::Data => {
            if sigma == 0.0 {
                return invalid(format!("data prediction gives no noise estimate where sigma = 0 (t = {t})"));
            }
            let eps = x_t.sub(&pred.mul_scalar(alpha))?.mul_scalar(1.0 / sigma);
            Ok((pred.clone(), eps))
        }
        Prediction::Velocity => {
            if let DiffusionPath::FlowLinear = path {
                let eps = x_t.add(&pred.mul_scalar(1.0 - t))?;
                let x0 = x_t.sub(&pred.mul_scalar(t))?;
                return Ok((x0, eps));
            }
            // v = ε − x0 with x_t = α x0 + σ ε
            let x0 = x_t.sub(&pred.mul_scalar(sigma))?.mul_scalar(1.0 / (alpha + sigma));
            let eps = x0.add(pred)?;
            Ok((x0, eps))
        }
    }
}

pub fn convert(pred: &Tensor, from: Prediction, to: Prediction, x_t: &Tensor, t: f64, path: &DiffusionPath) -> Result<Tensor> {
    if from == to {
        return Ok(pred.clone());
    }
    if let (DiffusionPath::FlowLinear, Prediction::Noise, Prediction::Velocity) = (path, from, to) {
        if t < 1.0 {
            return pred.sub(x_t).map(|d| d.mul_scalar(1.0 / (1.0 - t)));
        }
    }
    let (x0, eps) = split(pred, from, x_t, t, path)?;
    Ok(match to {
        Prediction::Noise => eps,
        Prediction::Data => x0,
        Prediction::Velocity => eps.sub(&x0)?,
    })
}

fn check_pair(t_k: f64, t_s: f64) -> Result<()> {
    if !(t_s < t_k) {
        return invalid(format!("reverse step needs t_s < t_k, got {t_s} -> from {t_k}"));
    }
    Ok(())
}

/// `x_s = (α_s/α_k)·x_k − α_s·(σ_k/α_k − σ_s/α_s)·ε̂`.
pub fn ddim_step(x_k: &Tensor, eps_hat: &Tensor, t_k: f64, t_s: f64, path: &DiffusionPath) -> Result<Tensor> {
    check_pair(t_k, t_s)?;
    let (a_k, s_k) = path.alpha_sigma(t_k)?;
    let (a_s, s_s) = path.alpha_sigma(t_s)?;
    if a_k == 0.0 {
        return invalid(format!("ddim step from a knot with alpha = 0 (t = {t_k})"));
    }
    x_k.mul_scalar(a_s / a_k).sub(&eps_hat.mul_scalar(a_s * (s_k / a_k - s_s / a_s)))
}

/// Ancestral update in scaled space `x̃ = x/α`:
/// `x̃_s = x̃_k − 2(λ_k − λ_s)ε̂ + √(λ_k² − λ_s²)·n`, returned as `α_s·x̃_s`.
pub fn ancestral_step(
    x_k: &Tensor,
    eps_hat: &Tensor,
    t_k: f64,
    t_s: f64,
    path: &DiffusionPath,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let (a_k, _) = path.alpha_sigma(t_k)?;
    if a_k == 0.0 {
        return invalid(format!("ancestral step from a knot with alpha = 0 (t = {t_k})"));
    }
    let (l_k, l_s) = (path.lambda_of(t_k)?, path.lambda_of(t_s)?);
    if l_k < l_s {
        return invalid(format!("ancestral step needs lambda_k >= lambda_s, got {l_k} < {l_s}"));
    }
    let (a_s, _) = path.alpha_sigma(t_s)?;
    let noise = Tensor::randn(x_k.shape(), rng);
    let tilde = x_k
        .mul_scalar(1.0 / a_k)
        .sub(&eps_hat.mul_scalar(2.0 * (l_k - l_s)))?
        .add(&noise.mul_scalar((l_k * l_k - l_s * l_s).sqrt()))?;
    Ok(tilde.mul_scalar(a_s))
}

/// `x_{t−Δt} = x_t − Δt·v̂`.
pub fn flow_euler_step(x_t: &Tensor, v_hat: &Tensor, t: f64, dt: f64) -> Result<Tensor> {
    if !(dt > 0.0) {
        return invalid(format!("Euler step size must be positive, got {dt}"));
    }
    if t - dt < -1e-12 {
        return invalid(format!("Euler step from {t} by {dt} goes below t = 0"));
    }
    x_t.sub(&v_hat.mul_scalar(dt))
}

/// Everything a sampling run produced, in sampling order (decreasing t).
#[derive(Clone)]
pub struct SampleRecord {
    pub mode: SamplerMode,
    /// `t_K, …, t_0`.
    pub times: Vec<f64>,
    /// State at each entry of `times`.
    pub states: Vec<Tensor>,
    /// Noise estimate at each step (one fewer than `times`).
    pub eps_hat: Vec<Tensor>,
    /// Clean estimate at each step.
    pub x0_hat: Vec<Tensor>,
}

impl SampleRecord {
    pub fn steps(&self) -> usize {
        self.eps_hat.len()
    }
}

/// Integrate from `t = 1` down to `t = 0` over the grid knots.
pub fn sample(
    model: &dyn Denoise,
    x_init: &Tensor,
    path: &DiffusionPath,
    grid: &TimeGrid,
    mode: SamplerMode,
    rng: &mut dyn RngCore,
) -> Result<(Tensor, SampleRecord)> {
    if mode == SamplerMode::FlowEuler && *path != DiffusionPath::FlowLinear {
        return invalid("flow-euler sampling requires the flow-linear path");
    }
    let knots = grid.knots();
    let mut x = x_init.detach();
    let mut rec = SampleRecord {
        mode,
        times: knots.iter().rev().copied().collect(),
        states: vec![x.clone()],
        eps_hat: Vec::new(),
        x0_hat: Vec::new(),
    };
    for i in (1..knots.len()).rev() {
        let (t_k, t_s) = (knots[i], knots[i - 1]);
        let raw = model.predict(&x, t_k)?.detach();
        if raw.shape() != x.shape() {
            return Err(Error::ShapeMismatch { op: "sample", lhs: raw.shape().to_vec(), rhs: x.shape().to_vec() });
        }
        let param = effective_prediction(model.prediction(), path, t_k)?;
        let (x0, eps) = split(&raw, param, &x, t_k, path)?;
        let (a_k, _) = path.alpha_sigma(t_k)?;
        x = match mode {
            SamplerMode::FlowEuler => {
                let v = convert(&raw, param, Prediction::Velocity, &x, t_k, path)?;
                flow_euler_step(&x, &v, t_k, t_k - t_s)?
            }
            SamplerMode::Ancestral if a_k > 0.0 => ancestral_step(&x, &eps, t_k, t_s, path, rng)?,
            // DDIM, and the ancestral sampler's first step off an α = 0 knot
            _ => {
                let (a_s, s_s) = path.alpha_sigma(t_s)?;
                x0.mul_scalar(a_s).add(&eps.mul_scalar(s_s))?
            }
        };
        x.check_finite("sampler state")?;
        rec.eps_hat.push(eps);
        rec.x0_hat.push(x0);
        rec.states.push(x.clone());
    }
    Ok((x, rec))
}

/// `x̃_0 = x̃_{λ_K} − Σ_i ε̂_{λ_i}(λ_i − λ_{i−1})`, rescaled by `α(t_0)`.
/// When the first knot has `α = 0` the leading terms `x̃_K − λ_K ε̂_K` are
/// replaced by their finite limit `x̂0_K`.
pub fn multistep_decompose(record: &SampleRecord, path: &DiffusionPath) -> Result<Tensor> {
    if record.mode != SamplerMode::Ddim {
        return invalid("multistep decomposition needs a ddim record");
    }
    let k = record.steps();
    if k == 0 || record.times.len() != k + 1 || record.states.len() != k + 1 {
        return invalid("inconsistent sample record");
    }
    // times run t_K..t_0; map to λ_K..λ_0 with λ_K possibly undefined
    let lam = |t: f64| -> Result<Option<f64>> {
        let (a, s) = path.alpha_sigma(t)?;
        Ok(if a > 0.0 { Some(s / a) } else { None })
    };
    let t_first = record.times[0];
    let mut acc = match lam(t_first)? {
        Some(l_k) => {
            let (a_k, _) = path.alpha_sigma(t_first)?;
            let l_next = lam(record.times[1])?.unwrap();
            record.states[0].mul_scalar(1.0 / a_k).sub(&record.eps_hat[0].mul_scalar(l_k - l_next))?
        }
        None => {
            let l_next = lam(record.times[1])?.ok_or_else(|| Error::InvalidArgument("two knots with alpha = 0".into()))?;
            record.x0_hat[0].add(&record.eps_hat[0].mul_scalar(l_next))?
        }
    };
    for j in 1..k {
        let l_i = lam(record.times[j])?.unwrap();
        let l_prev = lam(record.times[j + 1])?.unwrap();
        acc = acc.sub(&record.eps_hat[j].mul_scalar(l_i - l_prev))?;
    }
    let (a_0, _) = path.alpha_sigma(*record.times.last().unwrap())?;
    Ok(acc.mul_scalar(a_0))
}
