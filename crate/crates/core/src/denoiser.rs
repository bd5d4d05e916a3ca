//! Conditional velocity network on the latent grid: a transformer over grid
//! tokens with axial factorized and full attention blocks, adaLN conditioning on
//! diffusion time and system parameters, and history frames stacked as channels.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{join, Linear, Mlp, Module};
use crate::samplers::{Denoise, Prediction};
use crate::schedules::{DiffusionPath, TimeGrid};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Factorized,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    /// `(C, S_1, .., S_n)` of one latent frame.
    pub latent_shape: Vec<usize>,
    pub history: usize,
    pub params_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub depth: usize,
    /// Per-block attention kind; empty means alternate, ending with a full block.
    pub pattern: Vec<AttentionKind>,
    pub mlp_ratio: usize,
    /// Diffusion-time conditioning and a noisy-state input; off for the
    /// deterministic next-step baseline.
    pub diffusion: bool,
    pub prediction: Prediction,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_shape: vec![8, 16, 16],
            history: 2,
            params_dim: 1,
            width: 64,
            heads: 4,
            depth: 4,
            pattern: Vec::new(),
            mlp_ratio: 2,
            diffusion: true,
            prediction: Prediction::Velocity,
        }
    }
}

impl DenoiserConfig {
    pub fn extents(&self) -> &[usize] {
        &self.latent_shape[1..]
    }

    pub fn channels(&self) -> usize {
        self.latent_shape[0]
    }

    pub fn tokens(&self) -> usize {
        self.extents().iter().product()
    }

    pub fn blocks(&self) -> Vec<AttentionKind> {
        if !self.pattern.is_empty() {
            return self.pattern.clone();
        }
        (0..self.depth)
            .map(|i| if (self.depth - 1 - i).is_multiple_of(2) { AttentionKind::Full } else { AttentionKind::Factorized })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_shape.len() < 2 || self.latent_shape.len() > 3 {
            return invalid("latent shape must be (C, S) or (C, S1, S2)");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return invalid(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if !self.width.is_multiple_of(2) {
            return invalid("width must be even for the sinusoidal time embedding");
        }
        if self.history == 0 {
            return invalid("history length must be at least one frame");
        }
        if !self.pattern.is_empty() && self.pattern.len() != self.depth {
            return invalid("attention pattern length must equal depth");
        }
        Ok(())
    }
}

/// Sinusoidal features of `1000·k`, `width` entries (sin half, cos half).
pub fn timestep_embed(k: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let arg = 1000.0 * k;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        out[i] = (arg * freq).sin();
        out[half + i] = (arg * freq).cos();
    }
    out
}

fn batch_embed(ts: &[f64], width: usize) -> Result<Tensor> {
    let data: Vec<f64> = ts.iter().flat_map(|&t| timestep_embed(t, width)).collect();
    Tensor::from_vec(data, &[ts.len(), width])
}

/// Row-stochastic axial kernels `softmax(q̄_m k̄_mᵀ/√d)` from axis-mean-pooled
/// queries and keys. `q, k: (B, H, S_1..S_n, d)` → one `(B, H, S_m, S_m)` per axis.
pub fn axial_kernels(q: &Tensor, k: &Tensor, extents: &[usize]) -> Result<Vec<Tensor>> {
    let n = extents.len();
    let d = q.dim(q.rank() - 1);
    let scale = 1.0 / (d as f64).sqrt();
    (0..n)
        .map(|m| {
            let pool = |t: &Tensor| -> Result<Tensor> { move_axis_front(t, m, n)?.mean_axis(3, false) };
            let (qm, km) = (pool(q)?, pool(k)?);
            Ok(qm.matmul(&km.transpose(2, 3)?)?.mul_scalar(scale).softmax_last())
        })
        .collect()
}

/// `(B, H, S_1..S_n, d)` → `(B, H, S_m, rest, d)` with the other axes merged.
fn move_axis_front(t: &Tensor, m: usize, n: usize) -> Result<Tensor> {
    let mut perm = vec![0, 1, 2 + m];
    perm.extend((0..n).filter(|&a| a != m).map(|a| 2 + a));
    perm.push(2 + n);
    let p = t.permute(&perm)?;
    let s = p.shape().to_vec();
    let rest: usize = s[3..3 + n - 1].iter().product();
    p.reshape(&[s[0], s[1], s[2], rest, s[2 + n]])
}

/// Contract `v: (B, H, S_1..S_n, d)` against each axial kernel in turn.
fn apply_axial(v: &Tensor, kernels: &[Tensor], extents: &[usize]) -> Result<Tensor> {
    let n = extents.len();
    let mut out = v.clone();
    for (m, a) in kernels.iter().enumerate() {
        let mut perm = vec![0, 1, 2 + m];
        perm.extend((0..n).filter(|&x| x != m).map(|x| 2 + x));
        perm.push(2 + n);
        let moved = out.permute(&perm)?;
        let ms = moved.shape().to_vec();
        let flat = moved.reshape(&[ms[0], ms[1], ms[2], ms[3..].iter().product()])?;
        let mixed = a.matmul(&flat)?.reshape(&ms)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        out = mixed.permute(&inv)?;
    }
    Ok(out)
}

struct Attention {
    kind: AttentionKind,
    qkv: Linear,
    proj: Linear,
}

impl Attention {
    fn forward(&self, x: &Tensor, heads: usize, extents: &[usize]) -> Result<Tensor> {
        let (b, n, w) = (x.dim(0), x.dim(1), x.dim(2));
        let dh = w / heads;
        let qkv = self.qkv.forward(x)?;
        let split = |i: usize| -> Result<Tensor> { qkv.narrow(2, i * w, w)?.reshape(&[b, n, heads, dh])?.permute(&[0, 2, 1, 3]) };
        let (q, k, v) = (split(0)?, split(1)?, split(2)?);
        let out = match self.kind {
            AttentionKind::Full => {
                let a = q.matmul(&k.transpose(2, 3)?)?.mul_scalar(1.0 / (dh as f64).sqrt()).softmax_last();
                a.matmul(&v)?
            }
            AttentionKind::Factorized => {
                let mut grid = vec![b, heads];
                grid.extend_from_slice(extents);
                grid.push(dh);
                let (q, k, v) = (q.reshape(&grid)?, k.reshape(&grid)?, v.reshape(&grid)?);
                let kernels = axial_kernels(&q, &k, extents)?;
                apply_axial(&v, &kernels, extents)?.reshape(&[b, heads, n, dh])?
            }
        };
        self.proj.forward(&out.permute(&[0, 2, 1, 3])?.reshape(&[b, n, w])?)
    }
}

struct Block {
    attn: Attention,
    mlp: Mlp,
    /// Conditioning → (shift, scale, gate) for attention and MLP sub-layers.
    modulation: Linear,
}

/// `x·(1 + scale) + shift` with per-sample `(B, 1, W)` modulation.
fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    x.mul(&scale.add_scalar(1.0))?.add(shift)
}

fn chunk(m: &Tensor, i: usize, w: usize) -> Result<Tensor> {
    let b = m.dim(0);
    m.narrow(1, i * w, w)?.reshape(&[b, 1, w])
}

impl Block {
    fn forward(&self, x: &Tensor, c: &Tensor, heads: usize, extents: &[usize]) -> Result<Tensor> {
        let w = x.dim(2);
        let m = self.modulation.forward(c)?;
        let h = modulate(&x.layer_norm(1e-6), &chunk(&m, 0, w)?, &chunk(&m, 1, w)?)?;
        let x = x.add(&self.attn.forward(&h, heads, extents)?.mul(&chunk(&m, 2, w)?.add_scalar(1.0))?)?;
        let h = modulate(&x.layer_norm(1e-6), &chunk(&m, 3, w)?, &chunk(&m, 4, w)?)?;
        x.add(&self.mlp.forward(&h)?.mul(&chunk(&m, 5, w)?.add_scalar(1.0))?)
    }
}

/// History frames `(B, h·C, S..)` (oldest first) and normalized parameters `(B, P)`.
#[derive(Clone)]
pub struct ConditioningPack {
    pub history: Tensor,
    pub xi: Tensor,
}

impl ConditioningPack {
    /// Stack `h` frames `(B, C, S..)`, oldest first, along channels.
    pub fn new(frames: &[Tensor], xi: Tensor) -> Result<Self> {
        Ok(Self { history: Tensor::concat(frames, 1)?, xi })
    }

    pub fn batch(&self) -> usize {
        self.history.dim(0)
    }
}

pub struct Denoiser {
    pub cfg: DenoiserConfig,
    embed: Linear,
    pos: Tensor,
    time_mlp: Option<Mlp>,
    xi_proj: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    head: Linear,
}

impl Denoiser {
    pub fn new<R: Rng + ?Sized>(cfg: DenoiserConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let (c, w, h) = (cfg.channels(), cfg.width, cfg.history);
        let input = if cfg.diffusion { (h + 1) * c } else { h * c };
        let blocks = cfg
            .blocks()
            .into_iter()
            .map(|kind| Block {
                attn: Attention { kind, qkv: Linear::new(w, 3 * w, rng), proj: Linear::new(w, w, rng) },
                mlp: Mlp::new(&[w, cfg.mlp_ratio * w, w], rng),
                modulation: Linear::zeroed(w, 6 * w),
            })
            .collect();
        Ok(Self {
            embed: Linear::new(input, w, rng),
            pos: Tensor::randn(&[cfg.tokens(), w], rng).mul_scalar(0.02).requires_grad(),
            time_mlp: cfg.diffusion.then(|| Mlp::new(&[w, w, w], rng)),
            xi_proj: Linear::new(cfg.params_dim.max(1), w, rng),
            blocks,
            final_mod: Linear::zeroed(w, 2 * w),
            head: Linear::zeroed(w, c),
            cfg,
        })
    }

    /// Replace the zero-initialized output head with random weights.
    pub fn randomize_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.head = Linear::new(self.cfg.width, self.cfg.channels(), rng);
    }

    /// Randomize every zero-initialized modulation map as well.
    pub fn randomize_modulation<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let w = self.cfg.width;
        for b in &mut self.blocks {
            b.modulation = Linear::new(w, 6 * w, rng);
        }
        self.final_mod = Linear::new(w, 2 * w, rng);
    }

    fn conditioning(&self, ts: Option<&[f64]>, pack: &ConditioningPack) -> Result<Tensor> {
        let b = pack.batch();
        let xi = if pack.xi.numel() == 0 { Tensor::zeros(&[b, 1]) } else { pack.xi.clone() };
        if xi.shape() != [b, self.cfg.params_dim.max(1)] {
            return Err(Error::Shape { op: "denoiser", msg: format!("xi shape {:?}, expected ({b}, {})", xi.shape(), self.cfg.params_dim) });
        }
        let mut c = self.xi_proj.forward(&xi)?;
        if let (Some(mlp), Some(ts)) = (&self.time_mlp, ts) {
            if ts.len() != b {
                return invalid(format!("{} diffusion times for batch {b}", ts.len()));
            }
            c = c.add(&mlp.forward(&batch_embed(ts, self.cfg.width)?)?)?;
        }
        Ok(c.silu())
    }

    fn check_frame(&self, x: &Tensor, what: &str, channels: usize) -> Result<()> {
        let ok = x.rank() == self.cfg.latent_shape.len() + 1 && x.dim(1) == channels && x.shape()[2..] == *self.cfg.extents();
        if ok {
            Ok(())
        } else {
            Err(Error::Shape { op: "denoiser", msg: format!("{what} has shape {:?}", x.shape()) })
        }
    }

    fn backbone(&self, input: &Tensor, c: &Tensor) -> Result<Tensor> {
        let b = input.dim(0);
        let (n, w) = (self.cfg.tokens(), self.cfg.width);
        let ch = input.dim(1);
        // (B, C, S..) → (B, N, C)
        let tokens = input.reshape(&[b, ch, n])?.transpose(1, 2)?;
        let mut h = self.embed.forward(&tokens)?.add(&self.pos)?;
        for block in &self.blocks {
            h = block.forward(&h, c, self.cfg.heads, self.cfg.extents())?;
        }
        let m = self.final_mod.forward(c)?;
        let h = modulate(&h.layer_norm(1e-6), &chunk(&m, 0, w)?, &chunk(&m, 1, w)?)?;
        let out = self.head.forward(&h)?.transpose(1, 2)?;
        let mut shape = vec![b];
        shape.extend_from_slice(&self.cfg.latent_shape);
        out.reshape(&shape)
    }

    /// Network output at noisy state `x (B, C, S..)` and per-sample times `ts`.
    pub fn forward(&self, x: &Tensor, ts: &[f64], pack: &ConditioningPack) -> Result<Tensor> {
        if !self.cfg.diffusion {
            return invalid("deterministic backbone takes no noisy state; use predict_next");
        }
        let c = self.cfg.channels();
        self.check_frame(x, "state", c)?;
        self.check_frame(&pack.history, "history", self.cfg.history * c)?;
        let input = Tensor::concat(&[pack.history.clone(), x.clone()], 1)?;
        self.backbone(&input, &self.conditioning(Some(ts), pack)?)
    }

    /// Velocity estimate `v̂(x_k, k, c)`.
    pub fn predict_velocity(&self, x: &Tensor, k: f64, pack: &ConditioningPack) -> Result<Tensor> {
        self.forward(x, &vec![k; x.dim(0)], pack)
    }

    /// Deterministic next frame `z^{m+1} = z^m + net(history, ξ)`.
    pub fn predict_next(&self, pack: &ConditioningPack) -> Result<Tensor> {
        if self.cfg.diffusion {
            return invalid("predict_next is for the deterministic backbone");
        }
        let c = self.cfg.channels();
        self.check_frame(&pack.history, "history", self.cfg.history * c)?;
        let last = pack.history.narrow(1, (self.cfg.history - 1) * c, c)?;
        last.add(&self.backbone(&pack.history, &self.conditioning(None, pack)?)?)
    }

    pub fn conditioned<'a>(&'a self, pack: &'a ConditioningPack) -> Conditioned<'a> {
        Conditioned { net: self, pack }
    }
}

impl Module for Denoiser {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        let p = |n: &str| join(prefix, n);
        self.embed.visit(&p("embed"), f);
        f(p("pos"), &self.pos);
        if let Some(m) = &self.time_mlp {
            m.visit(&p("time_mlp"), f);
        }
        self.xi_proj.visit(&p("xi_proj"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            let bp = p(&format!("block{i}"));
            b.attn.qkv.visit(&join(&bp, "qkv"), f);
            b.attn.proj.visit(&join(&bp, "proj"), f);
            b.mlp.visit(&join(&bp, "mlp"), f);
            b.modulation.visit(&join(&bp, "modulation"), f);
        }
        self.final_mod.visit(&p("final_mod"), f);
        self.head.visit(&p("head"), f);
    }
}

/// A denoiser with its conditioning bound, usable by the samplers.
pub struct Conditioned<'a> {
    net: &'a Denoiser,
    pack: &'a ConditioningPack,
}

impl Denoise for Conditioned<'_> {
    fn prediction(&self) -> Prediction {
        self.net.cfg.prediction
    }

    fn predict(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.net.predict_velocity(x, t, self.pack)
    }
}

/// Per-sample `(B, 1, .., 1)` column from scalars, broadcastable over a frame batch.
fn column(values: &[f64], rank: usize) -> Result<Tensor> {
    let mut shape = vec![values.len()];
    shape.extend(std::iter::repeat_n(1, rank - 1));
    Tensor::from_vec(values.to_vec(), &shape)
}

/// Training times drawn uniformly from the grid's noisy knots.
pub fn draw_times(grid: &TimeGrid, batch: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let knots = grid.training_knots();
    (0..batch).map(|_| knots[rng.gen_range(0..knots.len())]).collect()
}

/// Mean-squared regression of the network output on its target at `x_k = α x0 + σ ε`.
/// Velocity models regress `ε − x0`; noise models regress `ε` (or `x0` where `α = 0`).
pub fn fm_loss_at(
    model: &dyn Fn(&Tensor, &[f64]) -> Result<Tensor>,
    prediction: Prediction,
    x0: &Tensor,
    ts: &[f64],
    eps: &Tensor,
    path: &DiffusionPath,
) -> Result<Tensor> {
    let mut alphas = Vec::with_capacity(ts.len());
    let mut sigmas = Vec::with_capacity(ts.len());
    for &t in ts {
        let (a, s) = path.alpha_sigma(t)?;
        alphas.push(a);
        sigmas.push(s);
    }
    let r = x0.rank();
    let x_k = x0.mul(&column(&alphas, r)?)?.add(&eps.mul(&column(&sigmas, r)?)?)?;
    let target = match prediction {
        Prediction::Velocity => eps.sub(x0)?,
        Prediction::Data => x0.clone(),
        Prediction::Noise => {
            // x0 target on samples whose knot has α = 0
            let mask: Vec<f64> = alphas.iter().map(|&a| if a == 0.0 { 1.0 } else { 0.0 }).collect();
            let m = column(&mask, r)?;
            eps.add(&x0.sub(eps)?.mul(&m)?)?
        }
    };
    let pred = model(&x_k, ts)?;
    Ok(pred.sub(&target)?.square().mean_all())
}

/// Flow-matching loss with knots and noise drawn from `rng`.
pub fn fm_loss(
    net: &Denoiser,
    x0: &Tensor,
    pack: &ConditioningPack,
    path: &DiffusionPath,
    grid: &TimeGrid,
    rng: &mut dyn RngCore,
) -> Result<Tensor> {
    let ts = draw_times(grid, x0.dim(0), rng);
    let eps = Tensor::randn(x0.shape(), rng);
    fm_loss_at(&|x, t| net.forward(x, t, pack), net.cfg.prediction, x0, &ts, &eps, path)
}

/// Multiply-add counts (×2) of one attention layer's mixing on `extents` at width `w`.
pub fn attention_flops(kind: AttentionKind, extents: &[usize], width: usize) -> u64 {
    let n: u64 = extents.iter().map(|&s| s as u64).product();
    let w = width as u64;
    match kind {
        AttentionKind::Full => 2 * n * n * w * 2,
        AttentionKind::Factorized => {
            let mut f = 0;
            for &s in extents {
                let s = s as u64;
                // pooling q and k, the S_m×S_m kernel, and contracting v along the axis
                f += 2 * n * w + 2 * s * s * w + 2 * n * s * w;
            }
            f
        }
    }
}
