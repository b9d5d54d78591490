//! Dense linear algebra, seeded randomness and gradient checking.

mod linalg;
mod rng;
mod tensor;

pub use linalg::{cholesky, cholesky_invert_spd, matmul};
pub use rng::Rng;
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Number of nonzeros a sparse direction of ratio `rho` gets over `n` entries.
///
/// `ceil(rho * n)`, at least one. The product is nudged down by 1e-9 first so
/// that decimal ratios such as 0.1 × 30 land on 3 rather than on the 4 that
/// binary rounding would produce.
pub fn sparse_support_size(n: usize, rho: f64) -> usize {
    let k = (rho * n as f64 - 1e-9).ceil();
    (k.max(1.0) as usize).min(n)
}

/// Random unit direction with `sparse_support_size(n, rho)` Rademacher
/// nonzeros on a support drawn uniformly without replacement.
pub fn sample_sparse_direction(rng: &mut Rng, n_params: usize, rho: f64) -> Result<Tensor> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Parameter(format!("rho must lie in (0, 1], got {rho}")));
    }
    if n_params == 0 {
        return Err(Error::Parameter("cannot sample a direction of length 0".into()));
    }
    let k = sparse_support_size(n_params, rho);
    let support = rng.sample_indices(n_params, k);
    let magnitude = 1.0 / (k as f64).sqrt();
    let mut v = vec![0.0; n_params];
    for i in support {
        v[i] = if rng.coin() { magnitude } else { -magnitude };
    }
    Ok(Tensor::vector(v))
}

/// Largest relative disagreement between central differences of `f` and an
/// analytic gradient, `max_i |fd_i − g_i| / (|g_i| + 1e-8)`.
pub fn finite_diff_grad_check<F>(mut f: F, analytic_grad: &Tensor, point: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> f64,
{
    if analytic_grad.shape() != point.shape() {
        return Err(Error::Dimension(format!(
            "gradient {:?} vs point {:?}",
            analytic_grad.shape(),
            point.shape()
        )));
    }
    let mut probe = point.clone();
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe);
        probe.data_mut()[i] = x - eps;
        let down = f(&probe);
        probe.data_mut()[i] = x;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite around coordinate {i}")));
        }
        let numeric = (up - down) / (2.0 * eps);
        let analytic = analytic_grad.data()[i];
        worst = worst.max((numeric - analytic).abs() / (analytic.abs() + 1e-8));
    }
    Ok(worst)
}
