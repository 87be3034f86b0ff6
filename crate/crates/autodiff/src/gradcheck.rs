//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TensorError};
use crate::params::{GradientMap, ParameterStore};
use crate::tape::{Tape, Var};
use crate::params::ParamVars;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    /// Tensors with more elements than this are checked on a seeded random
    /// subset of this many coordinates.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords_per_tensor: usize::MAX,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub coords_checked: usize,
}

/// Compares the analytic gradients returned by `objective` against central
/// differences of its value.
pub fn finite_difference_check<F>(
    params: &ParameterStore,
    objective: F,
    cfg: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, GradientMap)>,
{
    let (_, analytic) = objective(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        coords_checked: 0,
    };
    let mut probe = params.clone();
    for (name, tensor) in params.iter() {
        let grad = analytic
            .get(name)
            .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
        if !grad.all_finite() {
            return Err(TensorError::NonFinite(name.clone()));
        }
        let n = tensor.numel();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, cfg.max_coords_per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for i in coords {
            let orig = tensor.data()[i];
            probe.get_mut(name).expect("present").data_mut()[i] = orig + cfg.step;
            let (plus, _) = objective(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig - cfg.step;
            let (minus, _) = objective(&probe)?;
            probe.get_mut(name).expect("present").data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite(name.clone()));
            }
            let numeric = (plus - minus) / (2.0 * cfg.step);
            let err = (grad.data()[i] - numeric).abs() / numeric.abs().max(1.0);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst_parameter.is_empty() {
                report.max_rel_error = err;
                report.worst_parameter = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}

/// Adapts a tape-building closure into an objective for
/// [`finite_difference_check`].
pub fn tape_objective<B>(build: B) -> impl Fn(&ParameterStore) -> Result<(f64, GradientMap)>
where
    B: Fn(&mut Tape, &ParamVars) -> Result<Var>,
{
    move |params: &ParameterStore| {
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let loss = build(&mut tape, &vars)?;
        let value = tape.value(loss).item();
        let grads = tape.backward(loss)?;
        Ok((value, vars.collect(&tape, &grads)))
    }
}
