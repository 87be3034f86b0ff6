use crate::error::{shape_err, Result, TensorError};
use crate::params::{GradientMap, ParameterStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParameterStore,
    pub second_moment: ParameterStore,
}

impl AdamState {
    pub fn new(params: &ParameterStore, config: AdamConfig) -> Self {
        let zeros: ParameterStore = params
            .iter()
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    /// Applies one bias-corrected Adam update in place.
    ///
    /// Every parameter must have a gradient of matching shape; a missing
    /// entry means the loss graph was disconnected from that parameter.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &GradientMap) -> Result<()> {
        for (name, p) in params.iter() {
            let Some(g) = grads.get(name) else {
                return Err(TensorError::MissingGradient(name.clone()));
            };
            if g.shape() != p.shape() {
                return shape_err(
                    "adam_step",
                    format!("gradient {:?} vs parameter `{name}` {:?}", g.shape(), p.shape()),
                );
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let g = &grads[&name];
            let m = self
                .first_moment
                .get_mut(&name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            for (mv, gv) in m.data_mut().iter_mut().zip(g.data()) {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
            }
            let v = self
                .second_moment
                .get_mut(&name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            for (vv, gv) in v.data_mut().iter_mut().zip(g.data()) {
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
            }
            let m = self.first_moment.get(&name).expect("present");
            let v = self.second_moment.get(&name).expect("present");
            let p = params.get_mut(&name).expect("present");
            for ((pv, mv), vv) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let m_hat = mv / bc1;
                let v_hat = vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::step`].
pub fn adam_step(
    mut params: ParameterStore,
    grads: &GradientMap,
    mut state: AdamState,
) -> Result<(ParameterStore, AdamState)> {
    state.step(&mut params, grads)?;
    Ok((params, state))
}
