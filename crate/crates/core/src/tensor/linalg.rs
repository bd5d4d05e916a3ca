use super::{numel, Tensor};
use crate::error::{Error, Result};

/// `c = beta*c + op(a) * op(b)` for row-major `op(a)`: m×k, `op(b)`: k×n.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], trans_a: bool, b: &[f64], trans_b: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe row-major m×k, k×n and m×n buffers.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

impl Tensor {
    /// Matrix product over the last two axes. `other` is either rank 2
    /// (shared across the batch) or has the same leading dims as `self`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let mismatch = || Error::ShapeMismatch { op: "matmul", lhs: sa.clone(), rhs: sb.clone() };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = &sa[..sa.len() - 2];
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *batch_a {
            return Err(mismatch());
        }
        let batch = numel(batch_a);
        let mut out = vec![0.0; batch * m * n];
        {
            let (a, b) = (self.data(), other.data());
            if shared_b {
                // fold the batch into rows
                gemm(batch * m, k, n, &a, false, &b, false, &mut out, 0.0);
            } else {
                for i in 0..batch {
                    gemm(m, k, n, &a[i * m * k..], false, &b[i * k * n..], false, &mut out[i * m * n..], 0.0);
                }
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, p| {
                let (a_t, b_t) = (&p[0], &p[1]);
                let (a, b) = (a_t.data(), b_t.data());
                let ga = a_t.is_tracked().then(|| {
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; batch * m * k];
                    if shared_b {
                        gemm(batch * m, n, k, g, false, &b, true, &mut ga, 0.0);
                    } else {
                        for i in 0..batch {
                            gemm(m, n, k, &g[i * m * n..], false, &b[i * k * n..], true, &mut ga[i * m * k..], 0.0);
                        }
                    }
                    ga
                });
                let gb = b_t.is_tracked().then(|| {
                    // dB = Aᵀ · dC
                    if shared_b {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, batch * m, n, &a, true, g, false, &mut gb, 0.0);
                        gb
                    } else {
                        let mut gb = vec![0.0; batch * k * n];
                        for i in 0..batch {
                            gemm(k, m, n, &a[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], 0.0);
                        }
                        gb
                    }
                });
                vec![ga, gb]
            }),
        ))
    }
}
