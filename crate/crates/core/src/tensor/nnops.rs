use super::Tensor;
use crate::error::{Error, Result};

/// Compressed adjacency: the sources of target `i` are
/// `indices[offsets[i]..offsets[i + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Csr {
    pub fn targets(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn edges(&self) -> usize {
        self.indices.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }
}

impl Tensor {
    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_last(&self) -> Tensor {
        let n = *self.shape().last().unwrap_or(&1);
        let mut out = self.to_vec();
        for row in out.chunks_exact_mut(n.max(1)) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), xr) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((x, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                        *x = yv * (gv - dot);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let last = self.rank().checked_sub(1).ok_or_else(|| Error::Shape { op: "softmax", msg: "rank 0".into() })?;
        if axis == last {
            return Ok(self.softmax_last());
        }
        self.transpose(axis, last)?.softmax_last().transpose(axis, last)
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Tensor {
        let n = *self.shape().last().unwrap_or(&1);
        let mut out = self.to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / n.max(1));
        for row in out.chunks_exact_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for (((gr, yr), xr), &is) in g.chunks_exact(n).zip(y.chunks_exact(n)).zip(gx.chunks_exact_mut(n)).zip(&inv_std) {
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for ((x, &gv), &yv) in xr.iter_mut().zip(gr).zip(yr) {
                        *x = is * (gv - mg - yv * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax of per-edge logits `(E, K)` over each target's edge segment.
    pub fn segment_softmax(&self, csr: &Csr) -> Result<Tensor> {
        if self.rank() != 2 || self.dim(0) != csr.edges() {
            return Err(Error::Shape {
                op: "segment_softmax",
                msg: format!("logits {:?} for {} edges", self.shape(), csr.edges()),
            });
        }
        let k = self.dim(1);
        let offsets = csr.offsets.clone();
        let mut out = self.to_vec();
        for w in offsets.windows(2) {
            let seg = &mut out[w[0] * k..w[1] * k];
            for c in 0..k {
                let m = (0..w[1] - w[0]).map(|e| seg[e * k + c]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for e in 0..w[1] - w[0] {
                    let v = (seg[e * k + c] - m).exp();
                    seg[e * k + c] = v;
                    s += v;
                }
                for e in 0..w[1] - w[0] {
                    seg[e * k + c] /= s;
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![0.0; g.len()];
                for w in offsets.windows(2) {
                    for c in 0..k {
                        let dot: f64 = (w[0]..w[1]).map(|e| g[e * k + c] * y[e * k + c]).sum();
                        for e in w[0]..w[1] {
                            gx[e * k + c] = y[e * k + c] * (g[e * k + c] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[f, i, k, c] = Σ_{e ∈ seg(i)} weights[e, k] · values[f, src(e), c]`
    /// for weights `(E, K)` and values `(F, Ns, C)`; output `(F, Nt, K, C)`.
    pub fn neighborhood_aggregate(weights: &Tensor, values: &Tensor, csr: &Csr) -> Result<Tensor> {
        if weights.rank() != 2 || weights.dim(0) != csr.edges() || values.rank() != 3 {
            return Err(Error::ShapeMismatch {
                op: "neighborhood_aggregate",
                lhs: weights.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        let (k, frames, ns, ch) = (weights.dim(1), values.dim(0), values.dim(1), values.dim(2));
        if let Some(&bad) = csr.indices.iter().find(|&&s| s >= ns) {
            return Err(Error::Shape { op: "neighborhood_aggregate", msg: format!("source index {bad} >= {ns}") });
        }
        let nt = csr.targets();
        let csr = csr.clone();
        let mut out = vec![0.0; frames * nt * k * ch];
        {
            let (w, v) = (weights.data(), values.data());
            for f in 0..frames {
                let vf = &v[f * ns * ch..(f + 1) * ns * ch];
                for i in 0..nt {
                    let o = &mut out[(f * nt + i) * k * ch..(f * nt + i + 1) * k * ch];
                    for e in csr.offsets[i]..csr.offsets[i + 1] {
                        let src = &vf[csr.indices[e] * ch..(csr.indices[e] + 1) * ch];
                        for kk in 0..k {
                            let we = w[e * k + kk];
                            o[kk * ch..(kk + 1) * ch].iter_mut().zip(src).for_each(|(a, b)| *a += we * b);
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![frames, nt, k, ch],
            vec![weights.clone(), values.clone()],
            Box::new(move |g, _, p| {
                let (w, v) = (p[0].data(), p[1].data());
                let mut gw = p[0].is_tracked().then(|| vec![0.0; w.len()]);
                let mut gv = p[1].is_tracked().then(|| vec![0.0; v.len()]);
                for f in 0..frames {
                    for i in 0..nt {
                        let gi = &g[(f * nt + i) * k * ch..(f * nt + i + 1) * k * ch];
                        for e in csr.offsets[i]..csr.offsets[i + 1] {
                            let s = csr.indices[e];
                            let base = (f * ns + s) * ch;
                            if let Some(gw) = gw.as_mut() {
                                let src = &v[base..base + ch];
                                for kk in 0..k {
                                    gw[e * k + kk] += gi[kk * ch..(kk + 1) * ch].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                            if let Some(gv) = gv.as_mut() {
                                let dst = &mut gv[base..base + ch];
                                for kk in 0..k {
                                    let we = w[e * k + kk];
                                    dst.iter_mut().zip(&gi[kk * ch..(kk + 1) * ch]).for_each(|(a, b)| *a += we * b);
                                }
                            }
                        }
                    }
                }
                vec![gw, gv]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn uniform_logits_give_uniform_probabilities() {
        let y = Tensor::zeros(&[3]).softmax_last().to_vec();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn large_logits_do_not_overflow() {
        let y = Tensor::from_vec(vec![1000.0, 0.0], &[2]).unwrap().softmax_last().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn random_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[4, 6], &mut rng).mul_scalar(3.0);
        let y = x.softmax(1).unwrap().to_vec();
        for row in y.chunks(6) {
            // direct summation
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        let yc = x.softmax(0).unwrap().to_vec();
        for c in 0..6 {
            let s: f64 = (0..4).map(|r| yc[r * 6 + c]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 16], &mut rng).mul_scalar(4.0).add_scalar(2.0);
        let y = x.layer_norm(1e-12).to_vec();
        for row in y.chunks(16) {
            let m: f64 = row.iter().sum::<f64>() / 16.0;
            let v: f64 = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segment_softmax_partitions_unity() {
        let csr = Csr { offsets: vec![0, 2, 5, 6], indices: vec![0, 1, 0, 1, 2, 2] };
        let logits = Tensor::from_vec((0..12).map(|v| (v as f64 * 0.7).sin()).collect(), &[6, 2]).unwrap();
        let w = logits.segment_softmax(&csr).unwrap().to_vec();
        for seg in csr.offsets.windows(2) {
            for k in 0..2 {
                let s: f64 = (seg[0]..seg[1]).map(|e| w[e * 2 + k]).sum();
                assert!((s - 1.0).abs() < 1e-14);
            }
        }
    }
}
