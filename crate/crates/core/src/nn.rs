//! Trainable layers, the Adam optimizer, and named-parameter checkpoints.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container;
use crate::error::{invalid, Error, Result};
use crate::tensor::{ConvSpec, Padding, Tensor};

/// Anything that owns trainable tensors, enumerated under stable names.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor));

    fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn uniform_param<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::rand_uniform(shape, -bound, bound, rng).requires_grad()
}

/// `y = x·W + b` over the last axis; `W` is stored `(in, out)`.
#[derive(Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Self { weight: uniform_param(&[input, output], input, rng), bias: Tensor::zeros(&[output]).requires_grad() }
    }

    pub fn zeroed(input: usize, output: usize) -> Self {
        Self { weight: Tensor::zeros(&[input, output]).requires_grad(), bias: Tensor::zeros(&[output]).requires_grad() }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn output_dim(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Stack of linear maps with GELU between them.
#[derive(Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Self {
        Self { layers: widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect() }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.gelu();
            }
        }
        Ok(h)
    }
}

impl Module for Mlp {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &i.to_string()), f);
        }
    }
}

/// 1D or 2D convolution with "same"-style padding `K/2`.
#[derive(Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        mode: Padding,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(kernel, dims));
        let fan_in = cin * kernel.pow(dims as u32);
        Self {
            weight: uniform_param(&shape, fan_in, rng),
            bias: Tensor::zeros(&[cout]).requires_grad(),
            spec: ConvSpec::new(stride, kernel / 2, mode),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.conv(&self.weight, Some(&self.bias), self.spec)
    }
}

impl Module for Conv {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Transposed convolution; weight stored `(Cin, Cout, K..)`.
#[derive(Clone)]
pub struct ConvTranspose {
    pub weight: Tensor,
    pub bias: Tensor,
    pub spec: ConvSpec,
}

impl ConvTranspose {
    pub fn new<R: Rng + ?Sized>(
        dims: usize,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        mode: Padding,
        rng: &mut R,
    ) -> Self {
        let mut shape = vec![cin, cout];
        shape.extend(std::iter::repeat_n(kernel, dims));
        // each output sees about cin·K^d/stride^d inputs
        let fan_in = (cin * kernel.pow(dims as u32) / stride.pow(dims as u32)).max(1);
        Self {
            weight: uniform_param(&shape, fan_in, rng),
            bias: Tensor::zeros(&[cout]).requires_grad(),
            spec: ConvSpec::new(stride, kernel / 2, mode),
        }
    }

    pub fn forward(&self, x: &Tensor, target: &[usize]) -> Result<Tensor> {
        x.conv_transpose(&self.weight, Some(&self.bias), self.spec, target)
    }
}

impl Module for ConvTranspose {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Cosine decay of the learning rate to zero over this many steps.
    pub cosine_steps: Option<usize>,
    pub grad_clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, cosine_steps: None, grad_clip: Some(1.0) }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return invalid(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return invalid("Adam betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay, optional cosine decay and global-norm clipping.
pub struct Adam {
    pub cfg: AdamConfig,
    params: Vec<(String, Tensor)>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect::<Vec<_>>();
        let v = m.clone();
        Ok(Self { cfg, params, m, v, step: 0 })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        match self.cfg.cosine_steps {
            Some(total) if total > 0 => {
                let frac = (self.step as f64 / total as f64).min(1.0);
                self.cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
            _ => self.cfg.lr,
        }
    }

    pub fn zero_grad(&self) {
        for (_, p) in &self.params {
            p.zero_grad();
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    pub fn step(&mut self) -> Result<()> {
        let grads: Vec<Vec<f64>> = self.params.iter().map(|(_, p)| p.grad()).collect();
        for ((name, _), g) in self.params.iter().zip(&grads) {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
        }
        let scale = match self.cfg.grad_clip {
            Some(c) => {
                let norm = grads.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let lr = self.current_lr();
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, p)) in self.params.iter().enumerate() {
            let (m, v, g) = (&mut self.m[i], &mut self.v[i], &grads[i]);
            let (eps, wd) = (self.cfg.eps, self.cfg.weight_decay);
            p.update_data(|d| {
                for k in 0..d.len() {
                    let gk = g[k] * scale;
                    m[k] = b1 * m[k] + (1.0 - b1) * gk;
                    v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                    let update = (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    d[k] -= lr * (update + wd * d[k]);
                }
            });
            p.zero_grad();
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"LFMCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialize every parameter of `module` together with its configuration.
pub fn checkpoint_bytes<C: Serialize>(kind: &str, config: &C, module: &dyn Module) -> Result<Vec<u8>> {
    let params = module.named_params();
    let header = json!({
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config_digest": container::json_digest(config)?,
        "config": serde_json::to_value(config)?,
        "tensors": params.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
    });
    let datas: Vec<Vec<f64>> = params.iter().map(|(_, t)| t.to_vec()).collect();
    let blocks: Vec<(&[usize], &[f64])> = params.iter().zip(&datas).map(|((_, t), d)| (t.shape(), d.as_slice())).collect();
    container::encode(CKPT_MAGIC, &header, &blocks)
}

pub fn save_checkpoint<C: Serialize>(path: &Path, kind: &str, config: &C, module: &dyn Module) -> Result<()> {
    container::write_file(path, &checkpoint_bytes(kind, config, module)?)
}

pub struct Checkpoint {
    pub kind: String,
    pub config_digest: String,
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let decoded = container::decode(CKPT_MAGIC, bytes, |h| {
            h["tensors"].as_array().map(|a| a.len()).ok_or_else(|| Error::Format("checkpoint header lacks tensor list".into()))
        })?;
        let h = &decoded.header;
        if h["version"].as_u64() != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Format(format!("unsupported checkpoint version {}", h["version"])));
        }
        let names = h["tensors"].as_array().unwrap();
        let tensors = names
            .iter()
            .zip(decoded.blocks)
            .map(|(n, (shape, data))| (n.as_str().unwrap_or_default().to_string(), shape, data))
            .collect();
        Ok(Self {
            kind: h["kind"].as_str().unwrap_or_default().to_string(),
            config_digest: h["config_digest"].as_str().unwrap_or_default().to_string(),
            config: h["config"].clone(),
            tensors,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn config_as<C: for<'de> Deserialize<'de>>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    /// Copy stored tensors into `module`, refusing on kind, digest or shape mismatch.
    pub fn load_into<C: Serialize>(&self, kind: &str, config: &C, module: &dyn Module) -> Result<()> {
        if self.kind != kind {
            return invalid(format!("checkpoint holds a {} model, expected {kind}", self.kind));
        }
        let digest = container::json_digest(config)?;
        if digest != self.config_digest {
            return Err(Error::Digest { expected: digest, found: self.config_digest.clone() });
        }
        let params = module.named_params();
        if params.len() != self.tensors.len() {
            return invalid(format!("checkpoint has {} tensors, model has {}", self.tensors.len(), params.len()));
        }
        for ((name, p), (stored, shape, data)) in params.iter().zip(&self.tensors) {
            if name != stored || p.shape() != shape.as_slice() {
                return Err(Error::Shape { op: "load_checkpoint", msg: format!("{name}{:?} vs stored {stored}{shape:?}", p.shape()) });
            }
            p.set_data(data)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::max_rel_error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe(t: &Tensor, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        t.mul(&Tensor::rand_uniform(t.shape(), -1.0, 1.0, &mut rng)).unwrap().sum_all()
    }

    #[test]
    fn layer_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng);
        let x = Tensor::rand_uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let params: Vec<Tensor> = mlp.named_params().into_iter().map(|(_, t)| t).collect();
        // random non-zero biases so every path is exercised
        for p in &params {
            p.update_data(|d| d.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3)));
        }
        let err = max_rel_error(&params, |_| probe(&mlp.forward(&x).unwrap(), 1), 1e-5);
        assert!(err < 1e-4, "{err}");

        let conv = Conv::new(2, 2, 3, 3, 2, Padding::Periodic, &mut rng);
        let up = ConvTranspose::new(2, 3, 2, 3, 2, Padding::Periodic, &mut rng);
        let img = Tensor::rand_uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut rng);
        let ps: Vec<Tensor> = conv.named_params().into_iter().chain(up.named_params()).map(|(_, t)| t).collect();
        let err = max_rel_error(&ps, |_| probe(&up.forward(&conv.forward(&img).unwrap().gelu(), &[8, 8]).unwrap(), 2), 1e-5);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn names_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new(&[3, 5, 2], &mut rng);
        let names: Vec<String> = mlp.named_params().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, ["0.weight", "0.bias", "1.weight", "1.bias"]);
        assert_eq!(mlp.param_count(), 3 * 5 + 5 + 5 * 2 + 2);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let x = Tensor::from_vec(vec![3.0, -2.0], &[2]).unwrap().requires_grad();
        let mut opt = Adam::new(AdamConfig { lr: 0.1, grad_clip: None, ..Default::default() }, vec![("x".into(), x.clone())]).unwrap();
        for _ in 0..500 {
            x.square().sum_all().backward().unwrap();
            opt.step().unwrap();
        }
        assert!(x.to_vec().iter().all(|v| v.abs() < 1e-2), "{:?}", x.to_vec());
        assert!(!x.has_grad() || x.grad().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        // bias-corrected first step moves each coordinate by lr·sign(g)
        let x = Tensor::from_vec(vec![1.0, -4.0], &[2]).unwrap().requires_grad();
        let mut opt = Adam::new(AdamConfig { lr: 0.01, grad_clip: None, ..Default::default() }, vec![("x".into(), x.clone())]).unwrap();
        x.square().sum_all().backward().unwrap();
        opt.step().unwrap();
        let v = x.to_vec();
        assert!((v[0] - 0.99).abs() < 1e-9 && (v[1] + 3.99).abs() < 1e-9);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let mut opt = Adam::new(AdamConfig { lr: 1.0, cosine_steps: Some(10), ..Default::default() }, vec![]).unwrap();
        assert_eq!(opt.current_lr(), 1.0);
        for _ in 0..5 {
            opt.step().unwrap();
        }
        assert!((opt.current_lr() - 0.5).abs() < 1e-12);
        assert!(Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, vec![]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Mlp::new(&[2, 4, 1], &mut rng);
        let b = Mlp::new(&[2, 4, 1], &mut rng);
        let cfg = json!({"widths": [2, 4, 1]});
        let bytes = checkpoint_bytes("mlp", &cfg, &a).unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        ck.load_into("mlp", &cfg, &b).unwrap();
        let x = Tensor::rand_uniform(&[3, 2], -1.0, 1.0, &mut rng);
        assert_eq!(a.forward(&x).unwrap().to_vec(), b.forward(&x).unwrap().to_vec());
        assert_eq!(checkpoint_bytes("mlp", &cfg, &b).unwrap(), bytes);
        assert!(matches!(ck.load_into("mlp", &json!({"widths": [2, 5, 1]}), &b), Err(Error::Digest { .. })));
        assert!(ck.load_into("codec", &cfg, &b).is_err());
        let c = Mlp::new(&[2, 3, 1], &mut rng);
        assert!(ck.load_into("mlp", &cfg, &c).is_err());
    }
}
