//! Training stages (autoencoder, flow matching, deterministic latent baseline),
//! latent-space autoregressive rollout, and ensemble aggregation.

use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::{self, json_digest, DIGEST_LEN};
use crate::denoiser::{fm_loss, ConditioningPack, Denoiser, DenoiserConfig};
use crate::error::{invalid, Error, Result};
use crate::meshcodec::{ae_loss, CloudGeometry, Codec, CodecConfig, Domain, PointCloud};
use crate::nn::{checkpoint_bytes, Adam, AdamConfig, Checkpoint, Module};
use crate::pdelab::{DataConfig, Dataset, Normalization, Problem, Split, Trajectory};
use crate::samplers::{sample, Prediction, SamplerMode};
use crate::schedules::{PathConfig, PathKind};
use crate::tensor::{no_grad, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences (autoencoder) or frame windows (latent stages) per step.
    pub batch: usize,
    /// Frames per autoencoder sequence; four or more enable the jerk penalty.
    pub window: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Cosine decay over `steps` unless the optimizer sets its own horizon.
    pub cosine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 8, window: 4, seed: 0, optimizer: AdamConfig::default(), cosine: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch == 0 {
            return invalid("training needs at least one step and a non-empty batch");
        }
        self.optimizer.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        let mut a = self.optimizer.clone();
        if self.cosine && a.cosine_steps.is_none() {
            a.cosine_steps = Some(self.steps);
        }
        a
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RolloutMode {
    FlowEuler,
    Ddim,
    Ancestral,
    Ar,
}

impl FromStr for RolloutMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow-euler" => Ok(Self::FlowEuler),
            "ddim" => Ok(Self::Ddim),
            "ancestral" => Ok(Self::Ancestral),
            "ar" => Ok(Self::Ar),
            _ => Err(Error::InvalidArgument(format!("unknown rollout mode {s:?} (flow-euler, ddim, ancestral, ar)"))),
        }
    }
}

impl RolloutMode {
    fn sampler(self) -> Option<SamplerMode> {
        match self {
            Self::FlowEuler => Some(SamplerMode::FlowEuler),
            Self::Ddim => Some(SamplerMode::Ddim),
            Self::Ancestral => Some(SamplerMode::Ancestral),
            Self::Ar => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub ensemble: usize,
    pub mode: RolloutMode,
    pub seed: u64,
    /// First frame of the conditioning history within each test trajectory.
    pub start: usize,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { horizon: 30, ensemble: 1, mode: RolloutMode::FlowEuler, seed: 0, start: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Rollout horizons (in steps) at which NRMSE is reported.
    pub horizons: Vec<usize>,
    pub spectrum_center: usize,
    pub spectrum_half_width: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { horizons: vec![10, 30], spectrum_center: 10, spectrum_half_width: 2 }
    }
}

/// The single JSON document every subcommand reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub path: PathConfig,
    pub ae: TrainConfig,
    pub fm: TrainConfig,
    pub ar: TrainConfig,
    pub rollout: RolloutConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_problem(Problem::Heat2d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Ae,
    Fm,
    Ar,
}

impl ExperimentConfig {
    pub fn for_problem(problem: Problem) -> Self {
        let dim = problem.dim();
        let codec = CodecConfig {
            domain: Domain::periodic_box(dim, 2.0 * std::f64::consts::PI),
            fine_extents: if dim == 1 { vec![64] } else { vec![32, 32] },
            ..CodecConfig::default()
        };
        let mut cfg = Self {
            data: DataConfig::for_problem(problem),
            denoiser: DenoiserConfig { width: if dim == 1 { 32 } else { 64 }, ..DenoiserConfig::default() },
            codec,
            path: PathConfig::flow(10),
            ae: TrainConfig { steps: 2000, batch: 2, optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() },
            fm: TrainConfig { steps: 5000, batch: 16, optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() },
            ar: TrainConfig { steps: 5000, batch: 16, optimizer: AdamConfig { lr: 1e-3, ..AdamConfig::default() }, ..TrainConfig::default() },
            rollout: RolloutConfig::default(),
            eval: EvalConfig::default(),
        };
        cfg.resolve();
        cfg
    }

    /// Derive dependent fields: latent shape, parameter width, and the
    /// network output convention for the chosen path.
    pub fn resolve(&mut self) {
        self.codec.in_channels = 1;
        self.denoiser.latent_shape = self.codec.latent_shape();
        self.denoiser.params_dim = 1;
        self.denoiser.diffusion = true;
        self.denoiser.prediction = match self.path.kind {
            PathKind::FlowLinear => Prediction::Velocity,
            _ => Prediction::Noise,
        };
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Parse, overlaying the given fields on the defaults of the named problem.
    pub fn from_json(text: &str) -> Result<Self> {
        let v: serde_json::Value = serde_json::from_str(text)?;
        let problem: Problem = match v.pointer("/data/problem") {
            Some(p) => serde_json::from_value(p.clone())?,
            None => Problem::Heat2d,
        };
        let mut base = serde_json::to_value(Self::for_problem(problem))?;
        merge(&mut base, &v);
        let mut cfg: Self = serde_json::from_value(base)?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.codec.validate()?;
        self.denoiser.validate()?;
        self.path.path()?;
        if self.codec.dim() != self.data.problem.dim() {
            return invalid("codec dimension differs from the problem dimension");
        }
        for t in [&self.ae, &self.fm, &self.ar] {
            t.validate()?;
        }
        Ok(())
    }

    pub fn ar_denoiser(&self) -> DenoiserConfig {
        DenoiserConfig { diffusion: false, ..self.denoiser.clone() }
    }

    /// Digest of the configuration a stage's output depends on. Seeds are
    /// excluded so `--seed` overrides keep a checkpoint chain consistent; the
    /// chain itself is pinned by content digests of upstream checkpoints.
    pub fn stage_digest(&self, stage: Stage) -> Result<String> {
        let unseeded = |t: &TrainConfig| TrainConfig { seed: 0, ..t.clone() };
        let data = DataConfig { seed: 0, ..self.data.clone() };
        let ae = json_digest(&json!({"data": data, "codec": self.codec, "train": unseeded(&self.ae)}))?;
        match stage {
            Stage::Ae => Ok(ae),
            Stage::Fm => json_digest(&json!({"ae": ae, "denoiser": self.denoiser, "path": self.path, "train": unseeded(&self.fm)})),
            Stage::Ar => json_digest(&json!({"ae": ae, "denoiser": self.ar_denoiser(), "train": unseeded(&self.ar)})),
        }
    }
}

fn merge(base: &mut serde_json::Value, over: &serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// SHA-256 (hex) trailer of a container file, identifying its full contents.
pub fn content_digest(bytes: &[u8]) -> Result<String> {
    if bytes.len() < DIGEST_LEN {
        return Err(Error::Format("file too short for a digest".into()));
    }
    Ok(hex::encode(&bytes[bytes.len() - DIGEST_LEN..]))
}

pub fn write_loss_csv(path: &Path, losses: &[f64]) -> Result<()> {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        s.push_str(&format!("{i},{l:.9e}\n"));
    }
    container::write_file(path, s.as_bytes())
}

fn guard_loss(loss: &Tensor, step: usize, history: &[f64]) -> Result<f64> {
    let v = loss.item();
    if v.is_finite() {
        return Ok(v);
    }
    let last = history.last().map_or("none".to_string(), |l| format!("step {} loss {l:.6e}", history.len() - 1));
    Err(Error::NonFinite(format!("training loss at step {step}; last finite: {last}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub experiment: String,
    pub codec: CodecConfig,
    pub norm: Normalization,
}

pub struct TrainedCodec {
    pub codec: Codec,
    pub meta: CodecMeta,
}

pub const CODEC_KIND: &str = "codec";
pub const FLOW_KIND: &str = "denoiser";
pub const AR_KIND: &str = "ar";

fn grid_cloud(domain: &Domain, extents: &[usize]) -> Result<PointCloud> {
    PointCloud::lattice(domain.clone(), extents)
}

impl TrainedCodec {
    pub fn geometry(&self, extents: &[usize]) -> Result<CloudGeometry> {
        self.codec.geometry(&grid_cloud(&self.meta.codec.domain, extents)?)
    }

    /// Posterior-mean latents of normalized frames `(F, n, C)`, in chunks.
    pub fn encode_frames(&self, frames: &Tensor, geom: &CloudGeometry) -> Result<Tensor> {
        no_grad(|| {
            let f = frames.dim(0);
            let mut parts = Vec::new();
            for s in (0..f).step_by(16) {
                let x = frames.narrow(0, s, 16.min(f - s))?;
                parts.push(self.codec.encode(&x, geom, None)?.0);
            }
            Tensor::concat(&parts, 0)
        })
    }

    pub fn decode_frames(&self, z: &Tensor, geom: &CloudGeometry) -> Result<Tensor> {
        no_grad(|| {
            let f = z.dim(0);
            let mut parts = Vec::new();
            for s in (0..f).step_by(16) {
                parts.push(self.codec.decode(&z.narrow(0, s, 16.min(f - s))?, geom)?);
            }
            Tensor::concat(&parts, 0)
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(CODEC_KIND, &self.meta, &self.codec)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let meta: CodecMeta = ckpt.config_as()?;
        let codec = Codec::new(meta.codec.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        ckpt.load_into(CODEC_KIND, &meta, &codec)?;
        Ok(Self { codec, meta })
    }

    /// Relative L2 reconstruction error in field units over every `stride`-th frame.
    pub fn reconstruction_error(&self, trajs: &[&Trajectory], stride: usize) -> Result<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for t in trajs {
            let geom = self.geometry(&t.extents)?;
            let idx: Vec<usize> = (0..t.len()).step_by(stride.max(1)).collect();
            let frames: Vec<Tensor> = idx.iter().map(|&m| t.window(m, 1)).collect::<Result<_>>()?;
            let raw = Tensor::concat(&frames, 0)?;
            let x = raw.detach();
            x.update_data(|d| self.meta.norm.normalize(d));
            let rec = self.decode_frames(&self.encode_frames(&x, &geom)?, &geom)?;
            rec.update_data(|d| self.meta.norm.denormalize(d));
            for (a, b) in rec.data().iter().zip(raw.data().iter()) {
                num += (a - b) * (a - b);
                den += b * b;
            }
        }
        Ok((num / den).sqrt())
    }
}

pub struct AeOutcome {
    pub model: TrainedCodec,
    pub losses: Vec<f64>,
}

fn pick<'a, R: Rng + ?Sized>(trajs: &[&'a Trajectory], rng: &mut R) -> &'a Trajectory {
    trajs[rng.gen_range(0..trajs.len())]
}

/// Minimize the autoencoder loss on random train-split frame sequences.
pub fn train_autoencoder(cfg: &ExperimentConfig, ds: &Dataset) -> Result<AeOutcome> {
    let tc = &cfg.ae;
    tc.validate()?;
    let train = ds.split(Split::Train);
    if train.is_empty() {
        return invalid("autoencoder training needs a non-empty train split");
    }
    let window = tc.window.max(1);
    if let Some(t) = train.iter().find(|t| t.len() < window) {
        return invalid(format!("trajectory with {} frames is shorter than the window {window}", t.len()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let codec = Codec::new(cfg.codec.clone(), &mut rng)?;
    let meta = CodecMeta { experiment: cfg.stage_digest(Stage::Ae)?, codec: cfg.codec.clone(), norm: ds.norm.clone() };
    let model = TrainedCodec { codec, meta };
    let geom = model.geometry(&train[0].extents)?;
    let mut opt = Adam::new(tc.adam(), model.codec.named_params())?;
    let mut losses = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let mut seqs = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let t = pick(&train, &mut rng);
            let start = rng.gen_range(0..=t.len() - window);
            seqs.push(ds.normalized_window(t, start, window)?);
        }
        let x = Tensor::concat(&seqs, 0)?;
        let (z, stats) = model.codec.encode(&x, &geom, Some(&mut rng))?;
        let recon = model.codec.decode(&z, &geom)?;
        let mut seq_shape = vec![tc.batch, window];
        seq_shape.extend_from_slice(&z.shape()[1..]);
        let loss = ae_loss(&recon, &x, &stats, &z.reshape(&seq_shape)?, cfg.codec.beta, cfg.codec.gamma)?;
        let v = guard_loss(&loss, step, &losses)?;
        loss.backward()?;
        opt.step()?;
        losses.push(v);
    }
    Ok(AeOutcome { model, losses })
}

/// Per-channel latent standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    /// Fit on latents `(F, C, S..)`.
    pub fn fit(latents: &[Tensor]) -> Self {
        let c = latents[0].dim(1);
        let mut sum = vec![0.0; c];
        let mut sq = vec![0.0; c];
        let mut count = 0.0;
        for z in latents {
            let per = z.numel() / (z.dim(0) * c);
            for (i, v) in z.data().iter().enumerate() {
                let ch = (i / per) % c;
                sum[ch] += v;
                sq[ch] += v * v;
            }
            count += (z.dim(0) * per) as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(1e-12).sqrt()).collect();
        Self { mean, std }
    }

    fn apply(&self, z: &Tensor, inverse: bool) -> Tensor {
        let out = z.detach();
        let c = self.mean.len();
        let per = z.numel() / (z.dim(0) * c);
        out.update_data(|d| {
            for (i, v) in d.iter_mut().enumerate() {
                let ch = (i / per) % c;
                *v = if inverse { *v * self.std[ch] + self.mean[ch] } else { (*v - self.mean[ch]) / self.std[ch] };
            }
        });
        out
    }

    pub fn normalize(&self, z: &Tensor) -> Tensor {
        self.apply(z, false)
    }

    pub fn denormalize(&self, z: &Tensor) -> Tensor {
        self.apply(z, true)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentMeta {
    pub experiment: String,
    /// Content digest of the codec checkpoint this model was trained against.
    pub codec_digest: String,
    pub denoiser: DenoiserConfig,
    pub path: Option<PathConfig>,
    pub latent: LatentStats,
    pub norm: Normalization,
}

pub struct LatentModel {
    pub net: Denoiser,
    pub meta: LatentMeta,
}

impl LatentModel {
    pub fn kind(&self) -> &'static str {
        if self.meta.denoiser.diffusion {
            FLOW_KIND
        } else {
            AR_KIND
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint_bytes(self.kind(), &self.meta, &self.net)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let ckpt = Checkpoint::from_bytes(bytes)?;
        let meta: LatentMeta = ckpt.config_as()?;
        let net = Denoiser::new(meta.denoiser.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        let kind = if meta.denoiser.diffusion { FLOW_KIND } else { AR_KIND };
        ckpt.load_into(kind, &meta, &net)?;
        Ok(Self { net, meta })
    }

    fn xi_row(&self, xi: &[f64]) -> Result<Tensor> {
        let v = if xi.is_empty() { vec![0.0] } else { self.meta.norm.xi(xi) };
        let n = v.len();
        Tensor::from_vec(v, &[1, n])
    }
}

/// Normalized latent sequences `(T, C, S..)` and normalized parameters of the train split.
pub struct LatentCache {
    pub latents: Vec<Tensor>,
    pub xi: Vec<Vec<f64>>,
    pub stats: LatentStats,
}

pub fn encode_split(codec: &TrainedCodec, ds: &Dataset, split: Split) -> Result<LatentCache> {
    let trajs = ds.split(split);
    if trajs.is_empty() {
        return invalid(format!("{split:?} split is empty"));
    }
    let geom = codec.geometry(&trajs[0].extents)?;
    let raw: Vec<Tensor> = trajs.iter().map(|t| codec.encode_frames(&ds.normalized_window(t, 0, t.len())?, &geom)).collect::<Result<_>>()?;
    let stats = LatentStats::fit(&raw);
    Ok(LatentCache {
        latents: raw.iter().map(|z| stats.normalize(z)).collect(),
        xi: trajs.iter().map(|t| ds.norm.xi(&t.xi)).collect(),
        stats,
    })
}

/// A batch of `(history, target)` latent windows with parameters.
fn draw_windows(cache: &LatentCache, h: usize, batch: usize, rng: &mut ChaCha8Rng) -> Result<(ConditioningPack, Tensor)> {
    let mut hist = Vec::with_capacity(batch);
    let mut target = Vec::with_capacity(batch);
    let mut xi = Vec::with_capacity(batch);
    for _ in 0..batch {
        let i = rng.gen_range(0..cache.latents.len());
        let z = &cache.latents[i];
        let m = rng.gen_range(h - 1..=z.dim(0) - 2);
        let win = z.narrow(0, m + 1 - h, h)?;
        let mut shape = vec![1, h * z.dim(1)];
        shape.extend_from_slice(&z.shape()[2..]);
        hist.push(win.reshape(&shape)?);
        target.push(z.narrow(0, m + 1, 1)?);
        xi.extend(if cache.xi[i].is_empty() { vec![0.0] } else { cache.xi[i].clone() });
    }
    let p = xi.len() / batch;
    let pack = ConditioningPack { history: Tensor::concat(&hist, 0)?, xi: Tensor::from_vec(xi, &[batch, p])? };
    Ok((pack, Tensor::concat(&target, 0)?))
}

pub struct LatentOutcome {
    pub model: LatentModel,
    pub losses: Vec<f64>,
    /// Flow stage: `mean‖ε − x0‖²` on the first batch. Baseline stage: one-step MSE of persistence.
    pub baseline: f64,
    pub param_count: usize,
}

pub fn check_codec(cfg: &ExperimentConfig, codec: &TrainedCodec) -> Result<()> {
    let want = cfg.stage_digest(Stage::Ae)?;
    if codec.meta.experiment != want {
        return Err(Error::Digest { expected: want, found: codec.meta.experiment.clone() });
    }
    Ok(())
}

fn train_latent(cfg: &ExperimentConfig, ds: &Dataset, codec: &TrainedCodec, flow: bool) -> Result<LatentOutcome> {
    check_codec(cfg, codec)?;
    let (tc, dcfg, stage) = if flow { (&cfg.fm, cfg.denoiser.clone(), Stage::Fm) } else { (&cfg.ar, cfg.ar_denoiser(), Stage::Ar) };
    tc.validate()?;
    let h = dcfg.history;
    let cache = encode_split(codec, ds, Split::Train)?;
    if let Some(z) = cache.latents.iter().find(|z| z.dim(0) < h + 2) {
        return invalid(format!("trajectory with {} frames is shorter than history + 2", z.dim(0)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let net = Denoiser::new(dcfg.clone(), &mut rng)?;
    let param_count = net.param_count();
    let path = cfg.path.path()?;
    let grid = cfg.path.train_grid()?;
    let mut opt = Adam::new(tc.adam(), net.named_params())?;
    let mut losses = Vec::with_capacity(tc.steps);
    let mut baseline = f64::NAN;
    for step in 0..tc.steps {
        let (pack, x0) = draw_windows(&cache, h, tc.batch, &mut rng)?;
        let loss = if flow {
            if step == 0 {
                let mut brng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
                let eps = Tensor::randn(x0.shape(), &mut brng);
                baseline = eps.sub(&x0)?.square().mean_all().item();
            }
            fm_loss(&net, &x0, &pack, &path, &grid, &mut rng)?
        } else {
            if step == 0 {
                let c = dcfg.channels();
                baseline = pack.history.narrow(1, (h - 1) * c, c)?.sub(&x0)?.square().mean_all().item();
            }
            net.predict_next(&pack)?.sub(&x0)?.square().mean_all()
        };
        let v = guard_loss(&loss, step, &losses)?;
        loss.backward()?;
        opt.step()?;
        losses.push(v);
    }
    let codec_digest = content_digest(&codec.to_bytes()?)?;
    let meta = LatentMeta {
        experiment: cfg.stage_digest(stage)?,
        codec_digest,
        denoiser: dcfg,
        path: flow.then(|| cfg.path.clone()),
        latent: cache.stats,
        norm: ds.norm.clone(),
    };
    Ok(LatentOutcome { model: LatentModel { net, meta }, losses, baseline, param_count })
}

/// Flow-matching stage on latents of the frozen codec.
pub fn train_flow(cfg: &ExperimentConfig, ds: &Dataset, codec: &TrainedCodec) -> Result<LatentOutcome> {
    train_latent(cfg, ds, codec, true)
}

/// Deterministic next-step regression in latent space with the same backbone.
pub fn train_ar_baseline(cfg: &ExperimentConfig, ds: &Dataset, codec: &TrainedCodec) -> Result<LatentOutcome> {
    train_latent(cfg, ds, codec, false)
}

/// Rng stream of ensemble member `member` under a base seed.
pub fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(member as u64);
    r
}

#[derive(Clone, Debug)]
pub struct Member {
    /// Decoded predictions, `steps × n × C` in field units.
    pub frames: Vec<f64>,
    /// Normalized latents of the predictions, `steps × C × S..`.
    pub latents: Vec<f64>,
    pub steps: usize,
    /// A non-finite latent stopped this member early.
    pub truncated: bool,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// The conditioning frames after one encode/decode pass.
    pub init: Vec<f64>,
    pub members: Vec<Member>,
    pub horizon: usize,
    pub frame_len: usize,
    pub ensemble: usize,
    pub seconds: f64,
}

/// Check the latent model was trained against this codec.
pub fn check_pair(codec_bytes: &[u8], model: &LatentModel) -> Result<()> {
    let found = content_digest(codec_bytes)?;
    if found != model.meta.codec_digest {
        return Err(Error::Digest { expected: model.meta.codec_digest.clone(), found });
    }
    Ok(())
}

/// Encode `init (h, n, C)` once, autoregress `horizon` steps in latent space,
/// and decode all predictions at the end.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    codec: &TrainedCodec,
    model: &LatentModel,
    geom: &CloudGeometry,
    init: &Tensor,
    xi: &[f64],
    horizon: usize,
    ensemble: usize,
    mode: RolloutMode,
    seed: u64,
) -> Result<RolloutResult> {
    let clock = Instant::now();
    let dcfg = &model.meta.denoiser;
    let h = dcfg.history;
    if init.rank() != 3 || init.dim(0) != h {
        return invalid(format!("rollout needs {h} initial frames (h, n, C), got {:?}", init.shape()));
    }
    let sampler = mode.sampler();
    match (sampler.is_some(), dcfg.diffusion) {
        (true, false) => return invalid("stochastic rollout modes need the flow model"),
        (false, true) => return invalid("ar rollout needs the deterministic baseline model"),
        _ => {}
    }
    if ensemble == 0 {
        return invalid("ensemble size must be at least one");
    }
    let ensemble = if sampler.is_none() { 1 } else { ensemble };
    let x = init.detach();
    x.update_data(|d| codec.meta.norm.normalize(d));
    let z0 = model.meta.latent.normalize(&codec.encode_frames(&x, geom)?);
    let frame_shape: Vec<usize> = {
        let mut s = vec![1];
        s.extend_from_slice(&z0.shape()[1..]);
        s
    };
    let xi_row = model.xi_row(xi)?;
    let (path, grid) = match &model.meta.path {
        Some(p) => (Some(p.path()?), Some(p.sample_grid()?)),
        None => (None, None),
    };
    // Deterministic samplers only draw the initial noise, so members run as one
    // batch; ancestral members keep their own stream for the per-step noise.
    let groups: Vec<Vec<usize>> = if sampler == Some(SamplerMode::Ancestral) {
        (0..ensemble).map(|e| vec![e]).collect()
    } else {
        vec![(0..ensemble).collect()]
    };
    let mut members = Vec::with_capacity(ensemble);
    let mut all_latents = Vec::with_capacity(ensemble);
    for group in groups {
        let g = group.len();
        let mut rngs: Vec<ChaCha8Rng> = group.iter().map(|&e| member_rng(seed, e)).collect();
        let xi_b = Tensor::concat(&vec![xi_row.clone(); g], 0)?;
        let mut hist: Vec<Tensor> = (0..h).map(|i| Tensor::concat(&vec![z0.narrow(0, i, 1)?; g], 0)).collect::<Result<_>>()?;
        let mut stopped: Vec<Option<usize>> = vec![None; g];
        no_grad(|| -> Result<()> {
            for step in 0..horizon {
                let pack = ConditioningPack::new(&hist[hist.len() - h..], xi_b.clone())?;
                let next = match sampler {
                    None => model.net.predict_next(&pack)?,
                    Some(sm) => {
                        let inits: Vec<Tensor> = rngs.iter_mut().map(|r| Tensor::randn(&frame_shape, r)).collect();
                        let x_init = Tensor::concat(&inits, 0)?;
                        let (p, gr) = (path.as_ref().expect("flow model has a path"), grid.as_ref().expect("flow model has a grid"));
                        sample(&model.net.conditioned(&pack), &x_init, p, gr, sm, &mut rngs[0] as &mut dyn RngCore)?.0
                    }
                };
                let per = next.numel() / g;
                {
                    let d = next.data();
                    for (m, slot) in stopped.iter_mut().enumerate() {
                        if slot.is_none() && d[m * per..(m + 1) * per].iter().any(|v| !v.is_finite()) {
                            *slot = Some(step);
                        }
                    }
                }
                hist.push(next);
                if stopped.iter().all(Option::is_some) {
                    break;
                }
            }
            Ok(())
        })?;
        for (m, stop) in stopped.into_iter().enumerate() {
            let steps = stop.unwrap_or(hist.len() - h);
            let preds: Vec<Tensor> = hist[h..h + steps].iter().map(|t| t.narrow(0, m, 1)).collect::<Result<_>>()?;
            members.push((steps, stop.is_some()));
            all_latents.push(preds);
        }
    }
    // decode init and every member's predictions
    let init_dec = codec.decode_frames(&model.meta.latent.denormalize(&z0), geom)?;
    init_dec.update_data(|d| codec.meta.norm.denormalize(d));
    let frame_len = init_dec.numel() / h;
    let mut out = Vec::with_capacity(ensemble);
    for ((steps, truncated), preds) in members.into_iter().zip(all_latents) {
        let (frames, latents) = if preds.is_empty() {
            (Vec::new(), Vec::new())
        } else {
            let z = Tensor::concat(&preds, 0)?;
            let dec = codec.decode_frames(&model.meta.latent.denormalize(&z), geom)?;
            dec.update_data(|d| codec.meta.norm.denormalize(d));
            (dec.to_vec(), z.to_vec())
        };
        out.push(Member { frames, latents, steps, truncated });
    }
    Ok(RolloutResult { init: init_dec.to_vec(), members: out, horizon, frame_len, ensemble, seconds: clock.elapsed().as_secs_f64() })
}

/// Pointwise mean over the members that reached each frame (NaN where none did).
pub fn ensemble_mean(result: &RolloutResult) -> Vec<f64> {
    let f = result.frame_len;
    let mut out = vec![0.0; result.horizon * f];
    for m in 0..result.horizon {
        let alive: Vec<&Member> = result.members.iter().filter(|mem| mem.steps > m).collect();
        for j in 0..f {
            out[m * f + j] = if alive.is_empty() {
                f64::NAN
            } else {
                alive.iter().map(|mem| mem.frames[m * f + j]).sum::<f64>() / alive.len() as f64
            };
        }
    }
    out
}

/// Trained models for one experiment, loaded from their checkpoint bytes.
pub struct Bundle {
    pub codec: TrainedCodec,
    pub codec_bytes: Vec<u8>,
}

impl Bundle {
    pub fn from_bytes(codec_bytes: Vec<u8>) -> Result<Self> {
        Ok(Self { codec: TrainedCodec::from_bytes(&codec_bytes)?, codec_bytes })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(std::fs::read(path)?)
    }

    /// Load a latent model and verify it belongs to this codec and config.
    pub fn latent(&self, bytes: &[u8], cfg: &ExperimentConfig) -> Result<LatentModel> {
        let model = LatentModel::from_bytes(bytes)?;
        check_pair(&self.codec_bytes, &model)?;
        let stage = if model.meta.denoiser.diffusion { Stage::Fm } else { Stage::Ar };
        let want = cfg.stage_digest(stage)?;
        if model.meta.experiment != want {
            return Err(Error::Digest { expected: want, found: model.meta.experiment.clone() });
        }
        check_codec(cfg, &self.codec)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pdelab::generate;

    pub(crate) fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_problem(Problem::Heat2d);
        cfg.data = DataConfig { n: 16, frames: 8, train: 2, valid: 0, test: 1, ..cfg.data };
        cfg.codec = CodecConfig { fine_extents: vec![8, 8], latent_channels: 2, hidden: 4, heads: 2, kernel_hidden: 4, ..cfg.codec };
        cfg.denoiser = DenoiserConfig { width: 8, heads: 2, depth: 2, ..cfg.denoiser };
        for t in [&mut cfg.ae, &mut cfg.fm, &mut cfg.ar] {
            t.steps = 3;
            t.batch = 2;
        }
        cfg.resolve();
        cfg
    }

    fn trained() -> (ExperimentConfig, Dataset, TrainedCodec, LatentModel, LatentModel) {
        let cfg = tiny();
        let ds = generate(&cfg.data).unwrap();
        let codec = train_autoencoder(&cfg, &ds).unwrap().model;
        let fm = train_flow(&cfg, &ds, &codec).unwrap().model;
        let ar = train_ar_baseline(&cfg, &ds, &codec).unwrap().model;
        (cfg, ds, codec, fm, ar)
    }

    #[test]
    fn config_overlay_and_digests() {
        let cfg = ExperimentConfig::from_json(r#"{"data": {"problem": "burgers1d"}, "fm": {"steps": 7}}"#).unwrap();
        assert_eq!(cfg.codec.fine_extents, vec![64]);
        assert_eq!(cfg.denoiser.latent_shape, vec![8, 32]);
        assert_eq!(cfg.fm.steps, 7);
        assert_eq!(cfg.fm.batch, 16);
        let mut other = cfg.clone();
        other.fm.steps = 8;
        assert_eq!(cfg.stage_digest(Stage::Ae).unwrap(), other.stage_digest(Stage::Ae).unwrap());
        assert_ne!(cfg.stage_digest(Stage::Fm).unwrap(), other.stage_digest(Stage::Fm).unwrap());
        let heat = ExperimentConfig::default();
        assert_eq!(heat.denoiser.latent_shape, vec![8, 16, 16]);
        let exp = ExperimentConfig::from_json(r#"{"path": {"kind": "exponential_refiner", "sigma_min": 0.1, "K": 10}}"#).unwrap();
        assert_eq!(exp.denoiser.prediction, Prediction::Noise);
        assert!(ExperimentConfig::from_json(r#"{"fm": {"steps": 0}}"#).is_err());
        assert!("ar".parse::<RolloutMode>().is_ok() && "euler".parse::<RolloutMode>().is_err());
    }

    #[test]
    fn training_is_seeded_and_checkpoints_round_trip() {
        let (cfg, ds, codec, fm, ar) = trained();
        let again = train_autoencoder(&cfg, &ds).unwrap().model;
        assert_eq!(codec.to_bytes().unwrap(), again.to_bytes().unwrap());
        assert_eq!(fm.to_bytes().unwrap(), train_flow(&cfg, &ds, &again).unwrap().model.to_bytes().unwrap());

        let bundle = Bundle::from_bytes(codec.to_bytes().unwrap()).unwrap();
        let fm2 = bundle.latent(&fm.to_bytes().unwrap(), &cfg).unwrap();
        let ar2 = bundle.latent(&ar.to_bytes().unwrap(), &cfg).unwrap();
        assert_eq!(ar2.kind(), AR_KIND);
        let t = ds.split(Split::Test)[0];
        let geom = codec.geometry(&t.extents).unwrap();
        let init = t.window(0, 2).unwrap();
        let a = rollout(&codec, &fm, &geom, &init, &t.xi, 2, 1, RolloutMode::FlowEuler, 3).unwrap();
        let b = rollout(&bundle.codec, &fm2, &geom, &init, &t.xi, 2, 1, RolloutMode::FlowEuler, 3).unwrap();
        assert!(a.members[0].frames.iter().zip(&b.members[0].frames).all(|(x, y)| x.to_bits() == y.to_bits()));

        let mut changed = cfg.clone();
        changed.fm.steps = 9;
        assert!(matches!(bundle.latent(&fm.to_bytes().unwrap(), &changed), Err(Error::Digest { .. })));
        let mut reseeded = cfg.clone();
        reseeded.ae.seed = 5;
        let other = train_autoencoder(&reseeded, &ds).unwrap().model;
        assert!(check_pair(&other.to_bytes().unwrap(), &fm).is_err());
    }

    #[test]
    fn rollout_contracts() {
        let (_cfg, ds, codec, fm, ar) = trained();
        let t = ds.split(Split::Test)[0];
        let geom = codec.geometry(&t.extents).unwrap();
        let init = t.window(0, 2).unwrap();
        let before = codec.codec.encode_count();
        let r = rollout(&codec, &fm, &geom, &init, &t.xi, 4, 3, RolloutMode::Ddim, 1).unwrap();
        // one batched encode of the conditioning frames, none of the predictions
        assert_eq!(codec.codec.encode_count(), before + 1);
        assert_eq!(r.members.len(), 3);
        assert!(r.members.iter().all(|m| m.steps == 4 && m.frames.len() == 4 * r.frame_len));
        assert_ne!(r.members[0].latents, r.members[1].latents);
        let solo = rollout(&codec, &fm, &geom, &init, &t.xi, 4, 1, RolloutMode::Ddim, 1).unwrap();
        assert_eq!(solo.members[0].latents, r.members[0].latents);

        let zero = rollout(&codec, &fm, &geom, &init, &t.xi, 0, 2, RolloutMode::FlowEuler, 1).unwrap();
        assert!(zero.members.iter().all(|m| m.frames.is_empty()));
        assert_eq!(zero.init.len(), 2 * zero.frame_len);

        let d = rollout(&codec, &ar, &geom, &init, &t.xi, 3, 8, RolloutMode::Ar, 1).unwrap();
        assert_eq!(d.ensemble, 1);
        assert!(rollout(&codec, &ar, &geom, &init, &t.xi, 3, 1, RolloutMode::Ddim, 1).is_err());
        assert!(rollout(&codec, &fm, &geom, &init, &t.xi, 3, 1, RolloutMode::Ar, 1).is_err());

        // a model producing non-finite latents is truncated and flagged
        if let Some((_, p)) = ar.net.named_params().into_iter().find(|(n, _)| n.ends_with("head.bias")) {
            p.update_data(|d| d.iter_mut().for_each(|v| *v = f64::NAN));
        }
        let bad = rollout(&codec, &ar, &geom, &init, &t.xi, 3, 1, RolloutMode::Ar, 1).unwrap();
        assert!(bad.members[0].truncated && bad.members[0].steps == 0);
        assert!(ensemble_mean(&bad).iter().all(|v| v.is_nan()));
    }

    fn fake(members: Vec<Vec<f64>>) -> RolloutResult {
        let frame_len = 2;
        let horizon = members[0].len() / frame_len;
        RolloutResult {
            init: vec![],
            ensemble: members.len(),
            members: members
                .into_iter()
                .map(|frames| Member { steps: frames.len() / frame_len, frames, latents: vec![], truncated: false })
                .collect(),
            horizon,
            frame_len,
            seconds: 0.0,
        }
    }

    #[test]
    fn ensemble_mean_examples() {
        let x = vec![1.0, -2.0, 3.5, 0.25];
        assert_eq!(ensemble_mean(&fake(vec![x.clone()])), x);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(ensemble_mean(&fake(vec![x.clone(), neg])).iter().all(|v| *v == 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let members: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let mean = ensemble_mean(&fake(members.clone()));
        for j in 0..4 {
            let manual: f64 = members.iter().map(|m| m[j]).sum::<f64>() / 8.0;
            assert!((mean[j] - manual).abs() < 1e-12);
        }
    }

    #[test]
    fn nan_loss_aborts_with_last_finite_step() {
        let err = guard_loss(&Tensor::scalar(f64::NAN), 3, &[1.0, 0.5, 0.25]).unwrap_err();
        assert!(err.to_string().contains("step 2"));
        let cfg = tiny();
        let mut ds = generate(&cfg.data).unwrap();
        ds.norm.mean[0] = f64::NAN;
        let err = train_autoencoder(&cfg, &ds).err().unwrap();
        assert!(matches!(err, Error::NonFinite(_)) && err.to_string().contains("none"));
    }
}
