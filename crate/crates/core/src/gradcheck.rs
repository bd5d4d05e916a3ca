//! Central finite-difference oracle for unit tests.

use crate::tensor::Tensor;

/// Max relative error between backward gradients of `f` w.r.t. each input
/// and central differences with step `h`.
pub fn max_rel_error(inputs: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor, h: f64) -> f64 {
    for x in inputs {
        x.zero_grad();
    }
    f(inputs).backward().unwrap();
    let mut worst: f64 = 0.0;
    for x in inputs {
        let analytic = x.grad();
        for i in 0..x.numel() {
            let orig = x.data()[i];
            x.update_data(|d| d[i] = orig + h);
            let plus = crate::tensor::no_grad(|| f(inputs).item());
            x.update_data(|d| d[i] = orig - h);
            let minus = crate::tensor::no_grad(|| f(inputs).item());
            x.update_data(|d| d[i] = orig);
            let numeric = (plus - minus) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((analytic[i] - numeric).abs() / denom);
        }
    }
    worst
}
