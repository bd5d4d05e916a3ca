use std::borrow::Cow;

use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// True when `inner` equals the trailing dims of `outer`.
fn is_suffix(outer: &[usize], inner: &[usize]) -> bool {
    inner.len() <= outer.len() && outer[outer.len() - inner.len()..] == *inner
}

/// Source strides of a broadcast from `inp` to `out`; broadcast axes get 0.
fn broadcast_strides(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let pad = out.len() - inp.len();
    let in_strides = strides(inp);
    (0..out.len()).map(|i| if i < pad || inp[i - pad] == 1 { 0 } else { in_strides[i - pad] }).collect()
}

/// Merge adjacent axes that stay contiguous in the source, so inner loops run longer.
fn coalesce(shape: &[usize], src: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let (mut sh, mut st): (Vec<usize>, Vec<usize>) = (Vec::new(), Vec::new());
    for (&n, &s) in shape.iter().zip(src) {
        if n == 1 {
            continue;
        }
        match (sh.last_mut(), st.last_mut()) {
            (Some(pn), Some(ps)) if *ps == s * n => {
                *pn *= n;
                *ps = s;
            }
            _ => {
                sh.push(n);
                st.push(s);
            }
        }
    }
    if sh.is_empty() {
        sh.push(1);
        st.push(0);
    }
    (sh, st)
}

/// Visit each run along the last axis: `f(source offset, run length, source stride)`.
fn for_each_run(shape: &[usize], src: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    if shape.contains(&0) {
        return;
    }
    let (sh, st) = coalesce(shape, src);
    let rank = sh.len();
    let (run, step) = (sh[rank - 1], st[rank - 1]);
    let outer: usize = sh[..rank - 1].iter().product();
    let mut counter = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        f(base, run, step);
        for ax in (0..rank - 1).rev() {
            counter[ax] += 1;
            base += st[ax];
            if counter[ax] < sh[ax] {
                break;
            }
            base -= st[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

/// Row-major gather of `shape` elements read from `data` with `src` strides.
pub(crate) fn gather_strided(data: &[f64], shape: &[usize], src: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(numel(shape));
    for_each_run(shape, src, |base, run, step| match step {
        1 => out.extend_from_slice(&data[base..base + run]),
        0 => out.extend(std::iter::repeat_n(data[base], run)),
        _ => out.extend((0..run).map(|i| data[base + i * step])),
    });
    out
}

/// Adjoint of [`gather_strided`]: add row-major `grad` into `acc` at `src` strides.
fn scatter_add_strided(grad: &[f64], shape: &[usize], src: &[usize], acc: &mut [f64]) {
    let mut pos = 0;
    for_each_run(shape, src, |base, run, step| {
        let g = &grad[pos..pos + run];
        match step {
            1 => acc[base..base + run].iter_mut().zip(g).for_each(|(a, v)| *a += v),
            0 => acc[base] += g.iter().sum::<f64>(),
            _ => g.iter().enumerate().for_each(|(i, v)| acc[base + i * step] += v),
        }
        pos += run;
    });
}

pub(crate) fn expand<'a>(data: &'a [f64], inp: &[usize], out: &[usize]) -> Cow<'a, [f64]> {
    if inp == out {
        return Cow::Borrowed(data);
    }
    if is_suffix(out, inp) {
        let mut v = Vec::with_capacity(numel(out));
        for _ in 0..numel(out) / data.len().max(1) {
            v.extend_from_slice(data);
        }
        return Cow::Owned(v);
    }
    Cow::Owned(gather_strided(data, out, &broadcast_strides(out, inp)))
}

/// Sums a gradient of shape `out` down to the broadcast source shape `inp`.
pub(crate) fn reduce_to(grad: &[f64], out: &[usize], inp: &[usize]) -> Vec<f64> {
    if inp == out {
        return grad.to_vec();
    }
    let n = numel(inp);
    let mut acc = vec![0.0; n];
    if is_suffix(out, inp) {
        for chunk in grad.chunks_exact(n.max(1)) {
            acc.iter_mut().zip(chunk).for_each(|(a, g)| *a += g);
        }
        return acc;
    }
    scatter_add_strided(grad, out, &broadcast_strides(out, inp), &mut acc);
    acc
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

impl Tensor {
    pub fn elementwise(&self, op: BinaryOp, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: op.name(),
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let data = {
            let (da, db) = (self.data(), other.data());
            let ea = expand(&da, &sa, &out_shape);
            let eb = expand(&db, &sb, &out_shape);
            match op {
                BinaryOp::Add => ea.iter().zip(eb.iter()).map(|(x, y)| x + y).collect(),
                BinaryOp::Sub => ea.iter().zip(eb.iter()).map(|(x, y)| x - y).collect(),
                BinaryOp::Mul => ea.iter().zip(eb.iter()).map(|(x, y)| x * y).collect(),
                BinaryOp::Div => ea.iter().zip(eb.iter()).map(|(x, y)| x / y).collect(),
            }
        };
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _out, p| {
                let (a, b) = (&p[0], &p[1]);
                let (sa, sb) = (a.shape(), b.shape());
                let need_a = a.is_tracked();
                let need_b = b.is_tracked();
                match op {
                    BinaryOp::Add => vec![
                        need_a.then(|| reduce_to(g, &os, sa)),
                        need_b.then(|| reduce_to(g, &os, sb)),
                    ],
                    BinaryOp::Sub => vec![
                        need_a.then(|| reduce_to(g, &os, sa)),
                        need_b.then(|| {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            reduce_to(&neg, &os, sb)
                        }),
                    ],
                    BinaryOp::Mul => {
                        let (da, db) = (a.data(), b.data());
                        let ea = expand(&da, sa, &os);
                        let eb = expand(&db, sb, &os);
                        vec![
                            need_a.then(|| {
                                let t: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g * y).collect();
                                reduce_to(&t, &os, sa)
                            }),
                            need_b.then(|| {
                                let t: Vec<f64> = g.iter().zip(ea.iter()).map(|(g, x)| g * x).collect();
                                reduce_to(&t, &os, sb)
                            }),
                        ]
                    }
                    BinaryOp::Div => {
                        let (da, db) = (a.data(), b.data());
                        let ea = expand(&da, sa, &os);
                        let eb = expand(&db, sb, &os);
                        vec![
                            need_a.then(|| {
                                let t: Vec<f64> = g.iter().zip(eb.iter()).map(|(g, y)| g / y).collect();
                                reduce_to(&t, &os, sa)
                            }),
                            need_b.then(|| {
                                let t: Vec<f64> = g
                                    .iter()
                                    .zip(ea.iter().zip(eb.iter()))
                                    .map(|(g, (x, y))| -g * x / (y * y))
                                    .collect();
                                reduce_to(&t, &os, sb)
                            }),
                        ]
                    }
                }
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Add, other)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Sub, other)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Mul, other)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        self.elementwise(BinaryOp::Div, other)
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, out, p| {
                let x = p[0].data();
                vec![Some(g.iter().zip(x.iter().zip(out)).map(|(g, (&x, &y))| g * df(x, y)).collect())]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(g.iter().map(|v| v * s).collect())]),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        )
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            |x| x / (1.0 + (-x).exp()),
            |x, _| {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            },
        )
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&self) -> Tensor {
        const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        self.unary(
            |x| 0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh()),
            |x, _| {
                let u = C * (x + 0.044715 * x * x * x);
                let t = u.tanh();
                let du = C * (1.0 + 3.0 * 0.044715 * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(vec![s], vec![], vec![self.clone()], Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1) as f64;
        self.sum_all().mul_scalar(1.0 / n)
    }

    fn axis_split(&self, axis: usize) -> (usize, usize, usize) {
        let s = self.shape();
        (numel(&s[..axis]), s[axis], numel(&s[axis + 1..]))
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        if axis >= self.rank() {
            return Err(Error::Shape { op: "sum_axis", msg: format!("axis {axis} for shape {:?}", self.shape()) });
        }
        let (outer, n, inner) = self.axis_split(axis);
        let mut out = vec![0.0; outer * inner];
        {
            let d = self.data();
            for o in 0..outer {
                for k in 0..n {
                    let src = &d[(o * n + k) * inner..(o * n + k + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for k in 0..n {
                        gx[(o * n + k) * inner..(o * n + k + 1) * inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let n = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {shape:?}", self.shape()),
            });
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation; `perm[i]` is the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape { op: "permute", msg: format!("{perm:?} is not a permutation of rank {rank}") });
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = strides(&in_shape);
        let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let data = gather_strided(&self.data(), &out_shape, &src);
        // the gradient flows back through the inverse permutation
        let out_strides = strides(&out_shape);
        let mut back = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            back[p] = out_strides[i];
        }
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(gather_strided(g, &in_shape, &back))]),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Shape { op: "transpose", msg: format!("axes ({a},{b}) for rank {}", perm.len()) });
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors.first().ok_or_else(|| Error::Shape { op: "concat", msg: "no inputs".into() })?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Shape { op: "concat", msg: format!("axis {axis} for rank {rank}") });
        }
        for t in tensors {
            let ok = t.rank() == rank && (0..rank).all(|i| i == axis || t.dim(i) == first.dim(i));
            if !ok {
                return Err(Error::ShapeMismatch { op: "concat", lhs: first.shape().to_vec(), rhs: t.shape().to_vec() });
            }
        }
        let outer = numel(&first.shape()[..axis]);
        let inner = numel(&first.shape()[axis + 1..]);
        let sizes: Vec<usize> = tensors.iter().map(|t| t.dim(axis)).collect();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (t, &n) in tensors.iter().zip(&sizes) {
                let d = t.data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            out,
            shape,
            tensors.to_vec(),
            Box::new(move |g, _, p| {
                let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| Vec::with_capacity(outer * n * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gr, &n) in grads.iter_mut().zip(&sizes) {
                        gr.extend_from_slice(&g[pos..pos + n * inner]);
                        pos += n * inner;
                    }
                }
                grads.into_iter().zip(p).map(|(gr, t)| t.is_tracked().then_some(gr)).collect()
            }),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.rank() || start + len > self.dim(axis) {
            return Err(Error::Shape {
                op: "narrow",
                msg: format!("axis {axis} range {start}..{} for shape {:?}", start + len, self.shape()),
            });
        }
        let (outer, n, inner) = self.axis_split(axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let d = self.data();
            for o in 0..outer {
                out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    gx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Materializes a broadcast to `shape`.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let bs = broadcast_shape(self.shape(), shape);
        if bs.as_deref() != Some(shape) {
            return Err(Error::ShapeMismatch { op: "broadcast_to", lhs: self.shape().to_vec(), rhs: shape.to_vec() });
        }
        let src = self.shape().to_vec();
        let out_shape = shape.to_vec();
        let data = expand(&self.data(), &src, &out_shape).into_owned();
        let os = out_shape.clone();
        Ok(Tensor::from_op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(reduce_to(g, &os, &src))]),
        ))
    }
}
