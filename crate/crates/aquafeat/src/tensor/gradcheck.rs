//! Central-finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TensorError;
use crate::params::Param;

/// A differentiable program under test: a set of 64-bit parameters plus a
/// scalar loss that also reports the analytic gradient of every parameter
/// (in the same order as [`CheckTarget::params_mut`]).
pub trait CheckTarget {
    fn params_mut(&mut self) -> Vec<&mut Param<f64>>;
    fn loss_and_grads(&self) -> Result<(f64, Vec<Vec<f64>>), TensorError>;
    /// Forward-only evaluation, used for the perturbed probes.
    fn loss_value(&self) -> Result<f64, TensorError> {
        self.loss_and_grads().map(|(v, _)| v)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base perturbation; the actual step is eps · (1 + |θ|).
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all, if a tensor is smaller).
    pub coords_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            coords_per_param: 32,
            seed: 0x5eed,
        }
    }
}

/// Compare analytic gradients against central differences on a sampled set
/// of coordinates and return the maximum relative error.
///
/// The relative error of one coordinate is |fd − analytic| divided by
/// max(|fd|, |analytic|, 1e-5); the floor keeps finite-difference roundoff
/// on near-zero gradients from registering as error.
pub fn finite_diff_check<T: CheckTarget>(
    target: &mut T,
    cfg: &GradCheckConfig,
) -> Result<f64, TensorError> {
    let (_, analytic) = target.loss_and_grads()?;
    let n_params = analytic.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut max_rel = 0.0f64;

    for p in 0..n_params {
        let numel = analytic[p].len();
        let coords: Vec<usize> = if numel <= cfg.coords_per_param {
            (0..numel).collect()
        } else {
            (0..cfg.coords_per_param)
                .map(|_| rng.gen_range(0..numel))
                .collect()
        };
        for &c in &coords {
            let theta = target.params_mut()[p].value.data()[c];
            let h = cfg.eps * (1.0 + theta.abs());

            target.params_mut()[p].value.data_mut()[c] = theta + h;
            let f_plus = target.loss_value()?;
            target.params_mut()[p].value.data_mut()[c] = theta - h;
            let f_minus = target.loss_value()?;
            target.params_mut()[p].value.data_mut()[c] = theta;

            if !f_plus.is_finite() || !f_minus.is_finite() {
                return Err(TensorError::Invalid {
                    op: "finite_diff_check",
                    msg: format!(
                        "non-finite loss under perturbation of parameter {p} coordinate {c}"
                    ),
                });
            }
            let fd = (f_plus - f_minus) / (2.0 * h);
            let an = analytic[p][c];
            let denom = fd.abs().max(an.abs()).max(1e-5);
            let rel = (fd - an).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
