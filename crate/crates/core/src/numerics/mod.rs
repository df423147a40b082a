//! Deterministic tensor arithmetic with reverse-mode gradients.

mod graph;
pub(crate) mod kernels;
mod rng;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use rng::{rng_normal, Rng};
pub use tensor::Tensor;

use crate::error::{config_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Row-wise softmax of a rank-2 tensor, computed with row-max subtraction.
pub fn softmax_rows<T: Scalar>(m: &Tensor<T>) -> Result<Tensor<T>> {
    if m.rank() != 2 {
        return shape_err(format!("softmax_rows expects rank 2, got {:?}", m.shape()));
    }
    m.check_finite("softmax_rows input")?;
    let mut g = Graph::inference();
    let x = g.input(m.clone(), false);
    let y = g.softmax_rows(x)?;
    Ok(g.value(y).clone())
}

/// Layer normalization over the last dimension.
pub fn layer_norm_lastdim<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let (xv, gv, bv) = (g.constant_ref(x), g.constant_ref(gamma), g.constant_ref(beta));
    let y = g.layer_norm(xv, gv, bv, eps)?;
    Ok(g.value(y).clone())
}

/// Settings for [`finite_diff_grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Central-difference step, within `[1e-4, 1e-2]`.
    pub h: f64,
    /// Coordinates sampled per tensor; every coordinate is checked when the
    /// tensor is at most this large.
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            h: 1e-4,
            coords_per_tensor: 64,
            seed: 0,
        }
    }
}

/// Compares analytic gradients with central differences.
///
/// `f` returns the scalar value and the analytic gradient of every tensor
/// in `params`. The result is the largest
/// `|analytic − central| / (|analytic| + |central| + 1e-8)` over the sampled
/// coordinates.
pub fn finite_diff_grad_check<F>(f: F, params: &[Tensor<f64>], cfg: &GradCheck) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    if !(1e-4..=1e-2).contains(&cfg.h) {
        return config_err(format!("finite-difference step {} outside [1e-4, 1e-2]", cfg.h));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("grad-check objective".into()));
    }
    if analytic.len() != params.len() {
        return shape_err("objective returned a gradient list of the wrong length");
    }
    let mut rng = Rng::new(cfg.seed);
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (ti, (p, grad)) in params.iter().zip(&analytic).enumerate() {
        p.expect_same_shape(grad)?;
        let coords: Vec<usize> = if p.numel() <= cfg.coords_per_tensor {
            (0..p.numel()).collect()
        } else {
            (0..cfg.coords_per_tensor).map(|_| rng.below(p.numel())).collect()
        };
        for i in coords {
            let orig = p.data()[i];
            work[ti].data_mut()[i] = orig + cfg.h;
            let (plus, _) = f(&work)?;
            work[ti].data_mut()[i] = orig - cfg.h;
            let (minus, _) = f(&work)?;
            work[ti].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite("grad-check objective".into()));
            }
            let central = (plus - minus) / (2.0 * cfg.h);
            let a = grad.data()[i];
            let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
