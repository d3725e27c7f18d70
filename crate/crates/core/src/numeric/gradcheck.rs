//! Central finite-difference oracle for backward implementations.
//!
//! The checker perturbs one parameter coordinate at a time, re-evaluates the
//! loss, and compares `(f(p + h) - f(p - h)) / 2h` against the analytic
//! gradient. It is meant to run with the `f64` instantiation so oracle error
//! stays far below the tolerance being verified.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::{real, Real};
use crate::Error;

use super::autodiff::{backward, grads_by_name, ParamSet};
use super::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Half-width of the central difference.
    pub step: f64,
    /// Relative-error threshold a coordinate must meet.
    pub tolerance: f64,
    /// Floor for the relative-error denominator, guarding near-zero gradients.
    pub denominator_floor: f64,
    /// Cap on checked coordinates per parameter; larger tensors are sampled.
    pub max_coords_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            step: 1e-3,
            tolerance: 1e-3,
            denominator_floor: 1e-6,
            max_coords_per_param: 64,
            seed: 0,
        }
    }
}

/// One compared coordinate.
#[derive(Debug, Clone)]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Comparison summary across all sampled coordinates.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checks: Vec<CoordCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn fraction_within_tolerance(&self) -> f64 {
        if self.checks.is_empty() {
            return 1.0;
        }
        let ok = self.checks.iter().filter(|c| c.rel_error <= self.tolerance).count();
        ok as f64 / self.checks.len() as f64
    }

    /// True when every sampled coordinate meets the tolerance.
    pub fn is_pass(&self) -> bool {
        self.fraction_within_tolerance() == 1.0
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks
            .iter()
            .max_by(|a, b| a.rel_error.partial_cmp(&b.rel_error).expect("rel errors are finite"))
    }
}

fn perturbed<S: Real>(t: &Tensor<S>, index: usize, delta: f64) -> Tensor<S> {
    let mut data = t.data().to_vec();
    data[index] = data[index] + real::<S>(delta);
    Tensor::from_vec(t.shape().to_vec(), data).expect("same shape")
}

/// Checks the analytic gradient of `f` at `params` against central finite
/// differences. `f` must produce a scalar loss.
pub fn grad_check<S, F>(f: F, params: &ParamSet<S>, settings: &GradCheckSettings) -> Result<GradCheckReport, Error>
where
    S: Real,
    F: Fn(&ParamSet<S>) -> Result<Tensor<S>, Error>,
{
    let loss = f(params)?;
    loss.item().map_err(crate::numeric::NumericError::from)?;
    let grads = backward(&loss)?;
    let analytic = grads_by_name(&grads, params);

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut checks = Vec::new();
    for (name, tensor) in params.iter() {
        let numel = tensor.numel();
        if numel == 0 {
            continue;
        }
        let coords: Vec<usize> = if numel <= settings.max_coords_per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(&mut rng, numel, settings.max_coords_per_param).into_vec()
        };
        let grad = &analytic[name];
        for index in coords {
            let mut plus = params.clone();
            plus.set(name, perturbed(tensor, index, settings.step))
                .expect("perturbation keeps the shape");
            let f_plus = f(&plus)?.item().map_err(crate::numeric::NumericError::from)?.to_f64_lossy();
            let mut minus = params.clone();
            minus
                .set(name, perturbed(tensor, index, -settings.step))
                .expect("perturbation keeps the shape");
            let f_minus = f(&minus)?.item().map_err(crate::numeric::NumericError::from)?.to_f64_lossy();
            let numeric = (f_plus - f_minus) / (2.0 * settings.step);
            let a = grad.data()[index].to_f64_lossy();
            let denom = a.abs().max(numeric.abs()).max(settings.denominator_floor);
            checks.push(CoordCheck {
                name: name.to_string(),
                index,
                analytic: a,
                numeric,
                rel_error: (a - numeric).abs() / denom,
            });
        }
    }
    Ok(GradCheckReport { checks, tolerance: settings.tolerance })
}
