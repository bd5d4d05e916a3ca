use serde::{Deserialize, Serialize};

use super::linalg::gemm;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Zero,
    Periodic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub mode: Padding,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, mode: Padding) -> Self {
        Self { stride, padding, mode }
    }
}

const NONE: u32 = u32::MAX;

/// Index table mapping (kernel tap, output position) to an input position.
/// Periodic padding wraps indices instead of copying a padded buffer.
struct Geometry {
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    table: Vec<u32>,
}

fn out_extent(s: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = s + 2 * pad;
    (k <= padded && stride > 0).then(|| (padded - k) / stride + 1)
}

impl Geometry {
    #[allow(clippy::too_many_arguments)]
    fn new(h: usize, w: usize, kh: usize, kw: usize, sh: usize, sw: usize, ph: usize, pw: usize, mode: Padding) -> Result<Self> {
        let (Some(ho), Some(wo)) = (out_extent(h, kh, sh, ph), out_extent(w, kw, sw, pw)) else {
            return Err(Error::Shape {
                op: "conv",
                msg: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * ph, w + 2 * pw),
            });
        };
        let p = ho * wo;
        let mut table = vec![NONE; kh * kw * p];
        for i in 0..kh {
            for j in 0..kw {
                let tap = i * kw + j;
                for oh in 0..ho {
                    let ih = (oh * sh + i) as isize - ph as isize;
                    for ow in 0..wo {
                        let iw = (ow * sw + j) as isize - pw as isize;
                        let src = match mode {
                            Padding::Zero => {
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= w as isize {
                                    continue;
                                }
                                ih as usize * w + iw as usize
                            }
                            Padding::Periodic => {
                                ih.rem_euclid(h as isize) as usize * w + iw.rem_euclid(w as isize) as usize
                            }
                        };
                        table[tap * p + oh * wo + ow] = src as u32;
                    }
                }
            }
        }
        Ok(Self { h, w, kh, kw, ho, wo, table })
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn taps(&self) -> usize {
        self.kh * self.kw
    }

    fn im2col(&self, x: &[f64], cin: usize, cols: &mut [f64]) {
        let (p, hw) = (self.positions(), self.h * self.w);
        for c in 0..cin {
            let xc = &x[c * hw..(c + 1) * hw];
            for t in 0..self.taps() {
                let row = &mut cols[(c * self.taps() + t) * p..(c * self.taps() + t + 1) * p];
                let tab = &self.table[t * p..(t + 1) * p];
                for (dst, &src) in row.iter_mut().zip(tab) {
                    *dst = if src == NONE { 0.0 } else { xc[src as usize] };
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], cin: usize, x: &mut [f64]) {
        let (p, hw) = (self.positions(), self.h * self.w);
        for c in 0..cin {
            let xc = &mut x[c * hw..(c + 1) * hw];
            for t in 0..self.taps() {
                let row = &cols[(c * self.taps() + t) * p..(c * self.taps() + t + 1) * p];
                let tab = &self.table[t * p..(t + 1) * p];
                for (v, &src) in row.iter().zip(tab) {
                    if src != NONE {
                        xc[src as usize] += v;
                    }
                }
            }
        }
    }
}

/// Normalized view of a 1D or 2D convolution problem as 2D.
struct Problem {
    batch: usize,
    geom: Geometry,
}

fn spatial_dims(shape: &[usize]) -> Option<(bool, usize, usize)> {
    match shape.len() {
        3 => Some((true, 1, shape[2])),
        4 => Some((false, shape[2], shape[3])),
        _ => None,
    }
}

fn geometry_for(one_d: bool, h: usize, w: usize, kernel: &[usize], spec: ConvSpec) -> Result<Geometry> {
    if one_d {
        Geometry::new(1, w, 1, kernel[0], 1, spec.stride, 0, spec.padding, spec.mode)
    } else {
        Geometry::new(h, w, kernel[0], kernel[1], spec.stride, spec.stride, spec.padding, spec.padding, spec.mode)
    }
}

fn check_bias(bias: Option<&Tensor>, channels: usize, op: &'static str) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::ShapeMismatch { op, lhs: b.shape().to_vec(), rhs: vec![channels] });
        }
    }
    Ok(())
}

fn add_bias(out: &mut [f64], bias: &[f64], batch: usize, chans: usize, p: usize) {
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate().take(chans) {
            out[(b * chans + c) * p..(b * chans + c + 1) * p].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn bias_grad(g: &[f64], batch: usize, chans: usize, p: usize) -> Vec<f64> {
    let mut gb = vec![0.0; chans];
    for b in 0..batch {
        for (c, acc) in gb.iter_mut().enumerate() {
            *acc += g[(b * chans + c) * p..(b * chans + c + 1) * p].iter().sum::<f64>();
        }
    }
    gb
}

impl Tensor {
    /// Cross-correlation of `(B, Cin, L)` / `(B, Cin, H, W)` input with
    /// `(Cout, Cin, K)` / `(Cout, Cin, KH, KW)` weights.
    pub fn conv(&self, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec) -> Result<Tensor> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        let mismatch = || Error::ShapeMismatch { op: "conv", lhs: xs.clone(), rhs: ws.clone() };
        let (one_d, h, w) = spatial_dims(&xs).ok_or_else(mismatch)?;
        if ws.len() != xs.len() || ws[1] != xs[1] {
            return Err(mismatch());
        }
        let (batch, cin, cout) = (xs[0], xs[1], ws[0]);
        check_bias(bias, cout, "conv")?;
        let geom = geometry_for(one_d, h, w, &ws[2..], spec)?;
        let (p, kdim) = (geom.positions(), cin * geom.taps());
        let mut out = vec![0.0; batch * cout * p];
        {
            let (x, wt) = (self.data(), weight.data());
            let mut cols = vec![0.0; kdim * p];
            for b in 0..batch {
                geom.im2col(&x[b * cin * h * w..], cin, &mut cols);
                gemm(cout, kdim, p, &wt, false, &cols, false, &mut out[b * cout * p..], 0.0);
            }
        }
        if let Some(bt) = bias {
            add_bias(&mut out, &bt.data(), batch, cout, p);
        }
        let mut shape = vec![batch, cout];
        if one_d {
            shape.push(geom.wo);
        } else {
            shape.extend([geom.ho, geom.wo]);
        }
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let prob = Problem { batch, geom };
        Ok(Tensor::from_op(
            out,
            shape,
            parents,
            Box::new(move |g, _, par| {
                let Problem { batch, geom } = &prob;
                let (x, wt) = (par[0].data(), par[1].data());
                let (p, hw) = (geom.positions(), geom.h * geom.w);
                let mut cols = vec![0.0; kdim * p];
                let mut gx = par[0].is_tracked().then(|| vec![0.0; batch * cin * hw]);
                let mut gw = par[1].is_tracked().then(|| vec![0.0; cout * kdim]);
                for b in 0..*batch {
                    let gb = &g[b * cout * p..(b + 1) * cout * p];
                    if let Some(gw) = gw.as_mut() {
                        geom.im2col(&x[b * cin * hw..], cin, &mut cols);
                        gemm(cout, p, kdim, gb, false, &cols, true, gw, 1.0);
                    }
                    if let Some(gx) = gx.as_mut() {
                        gemm(kdim, cout, p, &wt, true, gb, false, &mut cols, 0.0);
                        geom.col2im_add(&cols, cin, &mut gx[b * cin * hw..(b + 1) * cin * hw]);
                    }
                }
                let mut res = vec![gx, gw];
                if par.len() == 3 {
                    res.push(par[2].is_tracked().then(|| bias_grad(g, *batch, cout, p)));
                }
                res
            }),
        ))
    }

    /// Adjoint of [`Tensor::conv`] with respect to its input: maps
    /// `(B, Cin, out...)` back onto the spatial extents `target`.
    /// Weights are `(Cin, Cout, K...)`, sharing the layout of the forward conv.
    pub fn conv_transpose(&self, weight: &Tensor, bias: Option<&Tensor>, spec: ConvSpec, target: &[usize]) -> Result<Tensor> {
        let xs = self.shape().to_vec();
        let ws = weight.shape().to_vec();
        let mismatch = || Error::ShapeMismatch { op: "conv_transpose", lhs: xs.clone(), rhs: ws.clone() };
        let (one_d, _, _) = spatial_dims(&xs).ok_or_else(mismatch)?;
        if ws.len() != xs.len() || ws[0] != xs[1] || target.len() != xs.len() - 2 {
            return Err(mismatch());
        }
        let (h, w) = if one_d { (1, target[0]) } else { (target[0], target[1]) };
        let (batch, cin, cout) = (xs[0], xs[1], ws[1]);
        check_bias(bias, cout, "conv_transpose")?;
        let geom = geometry_for(one_d, h, w, &ws[2..], spec)?;
        let produced: Vec<usize> = if one_d { vec![geom.wo] } else { vec![geom.ho, geom.wo] };
        if produced != xs[2..] {
            return Err(Error::Shape {
                op: "conv_transpose",
                msg: format!("input extents {:?} do not map to target {target:?} (expected {produced:?})", &xs[2..]),
            });
        }
        let (p, hw, kdim) = (geom.positions(), h * w, cout * geom.taps());
        let mut out = vec![0.0; batch * cout * hw];
        {
            let (x, wt) = (self.data(), weight.data());
            let mut cols = vec![0.0; kdim * p];
            for b in 0..batch {
                gemm(kdim, cin, p, &wt, true, &x[b * cin * p..], false, &mut cols, 0.0);
                geom.col2im_add(&cols, cout, &mut out[b * cout * hw..(b + 1) * cout * hw]);
            }
        }
        if let Some(bt) = bias {
            add_bias(&mut out, &bt.data(), batch, cout, hw);
        }
        let mut shape = vec![batch, cout];
        shape.extend_from_slice(target);
        let mut parents = vec![self.clone(), weight.clone()];
        parents.extend(bias.cloned());
        let prob = Problem { batch, geom };
        Ok(Tensor::from_op(
            out,
            shape,
            parents,
            Box::new(move |g, _, par| {
                let Problem { batch, geom } = &prob;
                let (x, wt) = (par[0].data(), par[1].data());
                let mut cols = vec![0.0; kdim * p];
                let mut gx = par[0].is_tracked().then(|| vec![0.0; batch * cin * p]);
                let mut gw = par[1].is_tracked().then(|| vec![0.0; cin * kdim]);
                for b in 0..*batch {
                    geom.im2col(&g[b * cout * hw..], cout, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        gemm(cin, kdim, p, &wt, false, &cols, false, &mut gx[b * cin * p..], 0.0);
                    }
                    if let Some(gw) = gw.as_mut() {
                        gemm(cin, p, kdim, &x[b * cin * p..], false, &cols, true, gw, 1.0);
                    }
                }
                let mut res = vec![gx, gw];
                if par.len() == 3 {
                    res.push(par[2].is_tracked().then(|| bias_grad(g, *batch, cout, hw)));
                }
                res
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_kernel_is_identity() {
        let x = Tensor::from_vec((0..32).map(|v| v as f64 * 0.1).collect(), &[1, 2, 4, 4]).unwrap();
        // 2 -> 2 channels, 1x1 identity kernel
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0, 1.0], &[2, 2, 1, 1]).unwrap();
        let y = x.conv(&w, None, ConvSpec::new(1, 0, Padding::Zero)).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn delta_input_reproduces_kernel() {
        let mut xd = vec![0.0; 25];
        xd[12] = 1.0; // centre of 5x5
        let x = Tensor::from_vec(xd, &[1, 1, 5, 5]).unwrap();
        let k: Vec<f64> = (1..=9).map(f64::from).collect();
        let w = Tensor::from_vec(k.clone(), &[1, 1, 3, 3]).unwrap();
        let y = x.conv(&w, None, ConvSpec::new(1, 1, Padding::Zero)).unwrap();
        let y = y.to_vec();
        // cross-correlation: the kernel appears flipped around the delta
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y[(1 + i) * 5 + (1 + j)], k[(2 - i) * 3 + (2 - j)]);
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let x = Tensor::zeros(&[2, 3, 9, 7]);
        let w = Tensor::zeros(&[4, 3, 3, 3]);
        let y = x.conv(&w, None, ConvSpec::new(2, 1, Padding::Zero)).unwrap();
        assert_eq!(y.shape(), &[2, 4, (9 + 2 - 3) / 2 + 1, (7 + 2 - 3) / 2 + 1]);
        let x1 = Tensor::zeros(&[1, 1, 10]);
        let w1 = Tensor::zeros(&[1, 1, 4]);
        assert_eq!(x1.conv(&w1, None, ConvSpec::new(2, 0, Padding::Zero)).unwrap().shape(), &[1, 1, 4]);
    }

    #[test]
    fn kernel_larger_than_padded_input_errors() {
        let x = Tensor::zeros(&[1, 1, 3]);
        let w = Tensor::zeros(&[1, 1, 6]);
        assert!(x.conv(&w, None, ConvSpec::new(1, 1, Padding::Zero)).is_err());
    }

    #[test]
    fn periodic_padding_wraps() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 4]).unwrap();
        let w = Tensor::from_vec(vec![1.0, 0.0, 0.0], &[1, 1, 3]).unwrap();
        // picks the left neighbour, wrapping at the boundary
        let y = x.conv(&w, None, ConvSpec::new(1, 1, Padding::Periodic)).unwrap();
        assert_eq!(y.to_vec(), vec![4.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn transpose_is_adjoint() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for mode in [Padding::Zero, Padding::Periodic] {
            let spec = ConvSpec::new(2, 1, mode);
            let x = Tensor::randn(&[2, 3, 8, 8], &mut rng);
            let w = Tensor::randn(&[4, 3, 3, 3], &mut rng);
            let y = x.conv(&w, None, spec).unwrap();
            let u = Tensor::randn(y.shape(), &mut rng);
            let v = u.conv_transpose(&w, None, spec, &[8, 8]).unwrap();
            let lhs: f64 = y.data().iter().zip(u.data().iter()).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data().iter().zip(v.data().iter()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}
