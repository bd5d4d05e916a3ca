//! Autoencoder between scattered point-cloud fields and a coarse uniform latent grid.
//!
//! Encoding runs a normalized kernel integral from the cloud onto a fine uniform
//! grid, then a strided conv stack down to the latent grid. Decoding mirrors it:
//! transposed convs back to the fine grid and a kernel integral from grid nodes
//! to the query points.

use std::cell::Cell;
use std::collections::HashMap;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::nn::{join, Conv, ConvTranspose, Linear, Mlp, Module};
use crate::tensor::{Csr, Padding, Tensor};

/// Axis-aligned box, optionally periodic in every axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub periodic: bool,
}

impl Domain {
    pub fn periodic_box(dim: usize, length: f64) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![length; dim], periodic: true }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn measure(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(x, (a, b))| {
            if self.periodic {
                *x >= *a && *x < *b
            } else {
                *x >= *a && *x <= *b
            }
        })
    }

    /// Displacement `a − b`, minimum image when periodic.
    pub fn displacement(&self, a: &[f64], b: &[f64], out: &mut [f64]) {
        for k in 0..a.len() {
            let mut d = a[k] - b[k];
            if self.periodic {
                let l = self.hi[k] - self.lo[k];
                d -= l * (d / l).round();
            }
            out[k] = d;
        }
    }

    /// Node coordinates of a uniform lattice, row-major over `extents`.
    /// Periodic lattices place nodes at `lo + i·L/S`; closed ones include both ends.
    pub fn lattice(&self, extents: &[usize]) -> Vec<f64> {
        let d = self.dim();
        let total: usize = extents.iter().product();
        let mut out = Vec::with_capacity(total * d);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            for k in 0..d {
                let l = self.hi[k] - self.lo[k];
                let h = if self.periodic { l / extents[k] as f64 } else { l / (extents[k].max(2) - 1) as f64 };
                out.push(self.lo[k] + idx[k] as f64 * h);
            }
            for k in (0..d).rev() {
                idx[k] += 1;
                if idx[k] < extents[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
        out
    }
}

/// Sample locations with quadrature weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub domain: Domain,
    /// Flattened `(n, dim)` coordinates.
    pub coords: Vec<f64>,
    pub weights: Vec<f64>,
}

impl PointCloud {
    /// Uniform Monte-Carlo weights `|Ω|/n`.
    pub fn uniform(domain: Domain, coords: Vec<f64>) -> Result<Self> {
        let d = domain.dim();
        if d == 0 || !coords.len().is_multiple_of(d) {
            return invalid("coordinate buffer is not a multiple of the domain dimension");
        }
        let n = coords.len() / d;
        if let Some(bad) = coords.chunks(d).position(|p| !domain.contains(p)) {
            return invalid(format!("point {bad} lies outside the domain"));
        }
        let w = domain.measure() / n as f64;
        Ok(Self { domain, coords, weights: vec![w; n] })
    }

    pub fn lattice(domain: Domain, extents: &[usize]) -> Result<Self> {
        let coords = domain.lattice(extents);
        Self::uniform(domain, coords)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.coords[i * d..(i + 1) * d]
    }
}

/// Values `(n, C)` on a point cloud.
#[derive(Clone)]
pub struct PointCloudField {
    pub cloud: PointCloud,
    pub values: Tensor,
}

/// For each target, the sources within distance `r`, via a uniform spatial hash.
pub fn build_neighborhoods(sources: &PointCloud, targets: &PointCloud, r: f64) -> Result<Csr> {
    if !(r > 0.0) {
        return invalid(format!("ball radius must be positive, got {r}"));
    }
    let dom = &sources.domain;
    let d = dom.dim();
    let cells: Vec<usize> = (0..d).map(|k| (((dom.hi[k] - dom.lo[k]) / r).floor() as usize).max(1)).collect();
    let cell_of = |p: &[f64]| -> Vec<usize> {
        (0..d)
            .map(|k| {
                let f = (p[k] - dom.lo[k]) / (dom.hi[k] - dom.lo[k]);
                ((f * cells[k] as f64).floor().max(0.0) as usize).min(cells[k] - 1)
            })
            .collect()
    };
    let mut table: HashMap<Vec<usize>, Vec<usize>> = HashMap::new();
    for j in 0..sources.len() {
        table.entry(cell_of(sources.point(j))).or_default().push(j);
    }
    let mut offsets = vec![0usize];
    let mut indices = Vec::new();
    let mut empty = Vec::new();
    let mut disp = vec![0.0; d];
    let n_off = 3usize.pow(d as u32);
    for i in 0..targets.len() {
        let y = targets.point(i);
        let home = cell_of(y);
        let mut visit: Vec<Vec<usize>> = Vec::with_capacity(n_off);
        'offsets: for o in 0..n_off {
            let mut c = home.clone();
            let mut code = o;
            for k in 0..d {
                let step = (code % 3) as i64 - 1;
                code /= 3;
                let v = c[k] as i64 + step;
                let n = cells[k] as i64;
                c[k] = if dom.periodic {
                    v.rem_euclid(n) as usize
                } else if v < 0 || v >= n {
                    continue 'offsets;
                } else {
                    v as usize
                };
            }
            visit.push(c);
        }
        visit.sort();
        visit.dedup();
        let start = indices.len();
        for c in &visit {
            if let Some(list) = table.get(c) {
                for &j in list {
                    dom.displacement(y, sources.point(j), &mut disp);
                    if disp.iter().map(|v| v * v).sum::<f64>().sqrt() <= r {
                        indices.push(j);
                    }
                }
            }
        }
        indices[start..].sort_unstable();
        if indices.len() == start {
            empty.push(i);
        }
        offsets.push(indices.len());
    }
    if !empty.is_empty() {
        return Err(Error::EmptyNeighborhood { count: empty.len(), first: empty.into_iter().take(10).collect() });
    }
    Ok(Csr { offsets, indices })
}

/// Precomputed edge data of a kernel integral between two point sets.
#[derive(Clone)]
pub struct KernelEdges {
    pub csr: Csr,
    /// `(E, dim + 1)`: `(|d|/r, d/r)` with `d = y_target − y_source`.
    pub features: Tensor,
    /// `(E, 1)`: `ln μ_j` of each edge's source.
    pub log_weights: Tensor,
    pub targets: usize,
}

impl KernelEdges {
    pub fn new(sources: &PointCloud, targets: &PointCloud, r: f64) -> Result<Self> {
        let csr = build_neighborhoods(sources, targets, r)?;
        let d = sources.dim();
        let mut feats = Vec::with_capacity(csr.edges() * (d + 1));
        let mut logw = Vec::with_capacity(csr.edges());
        let mut disp = vec![0.0; d];
        for i in 0..csr.targets() {
            for &j in csr.row(i) {
                sources.domain.displacement(targets.point(i), sources.point(j), &mut disp);
                feats.push(disp.iter().map(|v| v * v).sum::<f64>().sqrt() / r);
                feats.extend(disp.iter().map(|v| v / r));
                logw.push(sources.weights[j].ln());
            }
        }
        let e = csr.edges();
        Ok(Self {
            features: Tensor::from_vec(feats, &[e, d + 1])?,
            log_weights: Tensor::from_vec(logw, &[e, 1])?,
            targets: csr.targets(),
            csr,
        })
    }
}

/// `f(y_i) = Σ_j κ̃(y_i, y_j) u(y_j) μ_j` with `κ̃ μ` softmax-normalized over the
/// ball, one normalized kernel per output head of `kernel`.
/// `values (F, Ns, C)` → `(F, Nt, K·C)`.
pub fn kernel_integral(values: &Tensor, edges: &KernelEdges, kernel: &Mlp) -> Result<Tensor> {
    let logits = kernel.forward(&edges.features)?.add(&edges.log_weights)?;
    let w = logits.segment_softmax(&edges.csr)?;
    let out = Tensor::neighborhood_aggregate(&w, values, &edges.csr)?;
    let s = out.shape().to_vec();
    out.reshape(&[s[0], s[1], s[2] * s[3]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub domain: Domain,
    pub in_channels: usize,
    /// Fine uniform grid reached by the kernel integral.
    pub fine_extents: Vec<usize>,
    /// Number of stride-2 stages between the fine and latent grids.
    pub stages: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub heads: usize,
    pub kernel_hidden: usize,
    /// Ball radius in units of the fine-grid spacing.
    pub radius_cells: f64,
    /// Data already lives on the fine grid: skip both kernel integrals.
    pub bypass: bool,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            domain: Domain::periodic_box(2, 2.0 * std::f64::consts::PI),
            in_channels: 1,
            fine_extents: vec![32, 32],
            stages: 1,
            latent_channels: 8,
            hidden: 32,
            heads: 4,
            kernel_hidden: 16,
            radius_cells: 1.5,
            bypass: false,
            beta: 1e-6,
            gamma: 1e-3,
        }
    }
}

impl CodecConfig {
    pub fn dim(&self) -> usize {
        self.fine_extents.len()
    }

    pub fn latent_extents(&self) -> Vec<usize> {
        self.fine_extents.iter().map(|s| s >> self.stages).collect()
    }

    pub fn latent_shape(&self) -> Vec<usize> {
        let mut s = vec![self.latent_channels];
        s.extend(self.latent_extents());
        s
    }

    pub fn radius(&self) -> f64 {
        let h = (0..self.dim()).map(|k| (self.domain.hi[k] - self.domain.lo[k]) / self.fine_extents[k] as f64).fold(0.0, f64::max);
        self.radius_cells * h
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if !(1..=2).contains(&d) || self.domain.dim() != d {
            return invalid("codec supports 1D and 2D grids matching the domain dimension");
        }
        if self.fine_extents.iter().any(|&s| s % (1 << self.stages) != 0 || s >> self.stages == 0) {
            return invalid(format!("fine extents {:?} not divisible by 2^{}", self.fine_extents, self.stages));
        }
        if self.beta < 0.0 || self.gamma < 0.0 {
            return invalid("loss weights must be non-negative");
        }
        if self.in_channels == 0 || self.latent_channels == 0 || self.hidden == 0 || self.heads == 0 {
            return invalid("channel counts must be positive");
        }
        Ok(())
    }
}

/// Neighborhood structure tying one point set to the codec's fine grid.
#[derive(Clone)]
pub struct CloudGeometry {
    pub points: usize,
    encode: Option<KernelEdges>,
    decode: Option<KernelEdges>,
}

impl CloudGeometry {
    pub fn encode_edges(&self) -> Option<&KernelEdges> {
        self.encode.as_ref()
    }
}

/// Mean and log-variance of the approximate posterior.
#[derive(Clone)]
pub struct VariationalStats {
    pub mean: Tensor,
    pub logvar: Tensor,
}

impl VariationalStats {
    /// Mean over elements of `½(μ² + e^{logvar} − 1 − logvar)`.
    pub fn kl(&self) -> Result<Tensor> {
        let per = self.mean.square().add(&self.logvar.exp())?.sub(&self.logvar)?.add_scalar(-1.0).mul_scalar(0.5);
        Ok(per.mean_all())
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    enc_kernel: Mlp,
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_up: Vec<ConvTranspose>,
    dec_mid: Conv,
    dec_kernel: Mlp,
    dec_out: Linear,
    encodes: Cell<u64>,
}

fn grid_to_channels(x: &Tensor, extents: &[usize]) -> Result<Tensor> {
    // (F, N, C) → (F, C, S..)
    let (f, c) = (x.dim(0), x.dim(2));
    let mut shape = vec![f];
    shape.extend_from_slice(extents);
    shape.push(c);
    let t = x.reshape(&shape)?;
    let perm: Vec<usize> = match extents.len() {
        1 => vec![0, 2, 1],
        _ => vec![0, 3, 1, 2],
    };
    t.permute(&perm)
}

fn channels_to_grid(x: &Tensor) -> Result<Tensor> {
    // (F, C, S..) → (F, N, C)
    let perm: Vec<usize> = match x.rank() {
        3 => vec![0, 2, 1],
        _ => vec![0, 2, 3, 1],
    };
    let t = x.permute(&perm)?;
    let (f, c) = (x.dim(0), x.dim(1));
    t.reshape(&[f, x.numel() / (f * c), c])
}

impl Codec {
    pub fn new<R: Rng + ?Sized>(cfg: CodecConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim();
        let p = Padding::Periodic;
        let (h, k) = (cfg.hidden, cfg.heads);
        let ki_in = if cfg.bypass { cfg.in_channels } else { k * cfg.in_channels };
        Ok(Self {
            enc_kernel: Mlp::new(&[d + 1, cfg.kernel_hidden, k], rng),
            enc_in: Conv::new(d, ki_in, h, 3, 1, p, rng),
            enc_down: (0..cfg.stages).map(|_| Conv::new(d, h, h, 3, 2, p, rng)).collect(),
            enc_out: Conv::new(d, h, 2 * cfg.latent_channels, 3, 1, p, rng),
            dec_in: Conv::new(d, cfg.latent_channels, h, 3, 1, p, rng),
            dec_up: (0..cfg.stages).map(|_| ConvTranspose::new(d, h, h, 3, 2, p, rng)).collect(),
            dec_mid: Conv::new(d, h, if cfg.bypass { cfg.in_channels } else { h }, 3, 1, p, rng),
            dec_kernel: Mlp::new(&[d + 1, cfg.kernel_hidden, k], rng),
            dec_out: Linear::new(k * h, cfg.in_channels, rng),
            encodes: Cell::new(0),
            cfg,
        })
    }

    pub fn fine_grid(&self) -> Result<PointCloud> {
        PointCloud::lattice(self.cfg.domain.clone(), &self.cfg.fine_extents)
    }

    /// Neighborhoods for encoding from and decoding to `cloud`.
    pub fn geometry(&self, cloud: &PointCloud) -> Result<CloudGeometry> {
        if self.cfg.bypass {
            let n: usize = self.cfg.fine_extents.iter().product();
            if cloud.len() != n {
                return invalid(format!("bypass codec expects the {n}-node fine grid, got {} points", cloud.len()));
            }
            return Ok(CloudGeometry { points: n, encode: None, decode: None });
        }
        let grid = self.fine_grid()?;
        let r = self.cfg.radius();
        Ok(CloudGeometry {
            points: cloud.len(),
            encode: Some(KernelEdges::new(cloud, &grid, r)?),
            decode: Some(KernelEdges::new(&grid, cloud, r)?),
        })
    }

    /// `values (F, n, C_in)` → posterior statistics on the latent grid `(F, C, S..)`.
    /// Number of encoder invocations so far.
    pub fn encode_count(&self) -> u64 {
        self.encodes.get()
    }

    pub fn encode_stats(&self, values: &Tensor, geom: &CloudGeometry) -> Result<VariationalStats> {
        self.encodes.set(self.encodes.get() + 1);
        if values.rank() != 3 || values.dim(1) != geom.points || values.dim(2) != self.cfg.in_channels {
            return Err(Error::Shape {
                op: "encode",
                msg: format!("expected (F, {}, {}), got {:?}", geom.points, self.cfg.in_channels, values.shape()),
            });
        }
        let fine = match &geom.encode {
            Some(edges) => kernel_integral(values, edges, &self.enc_kernel)?,
            None => values.clone(),
        };
        let mut h = self.enc_in.forward(&grid_to_channels(&fine, &self.cfg.fine_extents)?)?.gelu();
        for conv in &self.enc_down {
            h = conv.forward(&h)?.gelu();
        }
        let out = self.enc_out.forward(&h)?;
        let c = self.cfg.latent_channels;
        Ok(VariationalStats { mean: out.narrow(1, 0, c)?, logvar: out.narrow(1, c, c)? })
    }

    /// Reparameterized sample when `rng` is given, posterior mean otherwise.
    pub fn encode(&self, values: &Tensor, geom: &CloudGeometry, rng: Option<&mut dyn RngCore>) -> Result<(Tensor, VariationalStats)> {
        let stats = self.encode_stats(values, geom)?;
        let z = match rng {
            Some(rng) => {
                let n = Tensor::randn(stats.mean.shape(), rng);
                stats.mean.add(&stats.logvar.mul_scalar(0.5).exp().mul(&n)?)?
            }
            None => stats.mean.clone(),
        };
        Ok((z, stats))
    }

    /// Latent `(F, C, S..)` → fine-grid features `(F, N_fine, hidden)`.
    pub fn decode_grid(&self, z: &Tensor) -> Result<Tensor> {
        let expect = self.cfg.latent_shape();
        if z.rank() != expect.len() + 1 || z.shape()[1..] != expect[..] {
            return Err(Error::Shape { op: "decode", msg: format!("latent {:?} vs expected (F, {:?})", z.shape(), expect) });
        }
        let mut h = self.dec_in.forward(z)?.gelu();
        let mut extents = self.cfg.latent_extents();
        for up in &self.dec_up {
            extents.iter_mut().for_each(|s| *s *= 2);
            h = up.forward(&h, &extents)?.gelu();
        }
        let h = self.dec_mid.forward(&h)?;
        let h = if self.cfg.bypass { h } else { h.gelu() };
        channels_to_grid(&h)
    }

    /// Latent `(F, C, S..)` → values at the geometry's points `(F, n, C_in)`.
    pub fn decode(&self, z: &Tensor, geom: &CloudGeometry) -> Result<Tensor> {
        let fine = self.decode_grid(z)?;
        match &geom.decode {
            Some(edges) => self.dec_out.forward(&kernel_integral(&fine, edges, &self.dec_kernel)?),
            None => Ok(fine),
        }
    }
}

impl Module for Codec {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        let p = |n: &str| join(prefix, n);
        if !self.cfg.bypass {
            self.enc_kernel.visit(&p("enc_kernel"), f);
        }
        self.enc_in.visit(&p("enc_in"), f);
        for (i, c) in self.enc_down.iter().enumerate() {
            c.visit(&p(&format!("enc_down{i}")), f);
        }
        self.enc_out.visit(&p("enc_out"), f);
        self.dec_in.visit(&p("dec_in"), f);
        for (i, c) in self.dec_up.iter().enumerate() {
            c.visit(&p(&format!("dec_up{i}")), f);
        }
        self.dec_mid.visit(&p("dec_mid"), f);
        if !self.cfg.bypass {
            self.dec_kernel.visit(&p("dec_kernel"), f);
            self.dec_out.visit(&p("dec_out"), f);
        }
    }
}

/// Third time-difference `z^{m+1} − 3z^m + 3z^{m−1} − z^{m−2}` along axis 1 of
/// `(B, T, ..)`, mean-squared; `None` when `T < 4`.
pub fn jerk_penalty(z: &Tensor) -> Result<Option<Tensor>> {
    if z.rank() < 2 {
        return invalid("jerk penalty needs a (B, T, ..) sequence");
    }
    let t = z.dim(1);
    if t < 4 {
        return Ok(None);
    }
    let n = t - 3;
    let a = z.narrow(1, 3, n)?;
    let b = z.narrow(1, 2, n)?.mul_scalar(3.0);
    let c = z.narrow(1, 1, n)?.mul_scalar(3.0);
    let d = z.narrow(1, 0, n)?;
    Ok(Some(a.sub(&b)?.add(&c)?.sub(&d)?.square().mean_all()))
}

/// `mean‖recon − target‖² + β·KL + γ·jerk`; `z_seq` is `(B, T, ..)`.
pub fn ae_loss(recon: &Tensor, target: &Tensor, stats: &VariationalStats, z_seq: &Tensor, beta: f64, gamma: f64) -> Result<Tensor> {
    if beta < 0.0 || gamma < 0.0 {
        return invalid(format!("loss weights must be non-negative, got beta={beta}, gamma={gamma}"));
    }
    let mut loss = recon.sub(target)?.square().mean_all();
    if beta > 0.0 {
        loss = loss.add(&stats.kl()?.mul_scalar(beta))?;
    }
    if gamma > 0.0 {
        if let Some(j) = jerk_penalty(z_seq)? {
            loss = loss.add(&j.mul_scalar(gamma))?;
        }
    }
    Ok(loss)
}
