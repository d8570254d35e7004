use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Below this magnitude gradient entries are compared in absolute terms.
pub const GRAD_REL_FLOOR: f64 = 1e-3;

/// Central-difference gradient `(f(x + εe_i) − f(x − εe_i)) / 2ε`, one
/// coordinate at a time.
pub fn finite_diff_grad<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> T,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = x.clone();
    let step = T::lit(eps);
    let denom = T::lit(2.0 * eps);
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / denom);
    }
    Tensor::new(x.shape(), grad)
}

/// Largest `|a − b| / max(|a|, |b|, GRAD_REL_FLOOR)` over all entries.
pub fn max_rel_err<T: Scalar>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> Result<f64> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::shape(format!(
            "gradient shapes differ: {:?} vs {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(n.abs()).max(GRAD_REL_FLOOR)
        })
        .fold(0.0, f64::max))
}
