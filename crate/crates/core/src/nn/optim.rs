use super::network::Param;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam state with a plateau-driven learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    /// Multiplier applied to `lr` whenever a plateau is reported.
    pub decay: f64,
    /// Minimum relative improvement of the epoch loss that counts as progress.
    pub plateau_tolerance: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
    last_loss: Option<f64>,
}

impl OptimizerState {
    pub fn new(lr: f64, params: &[Param]) -> Self {
        Self {
            lr,
            decay: 0.5,
            plateau_tolerance: 1e-3,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.dims()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.dims()))
                .collect(),
            step: 0,
            last_loss: None,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.v
    }

    /// Applies one Adam update to every non-frozen parameter.
    pub fn adam_step(&mut self, params: &mut [Param], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::invalid(format!(
                "optimizer tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.value.dims() != g.dims() || p.value.dims() != m.dims() {
                return Err(Error::invalid(format!(
                    "shape mismatch for {}: param {:?}, grad {:?}",
                    p.name,
                    p.value.dims(),
                    g.dims()
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.frozen {
                continue;
            }
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= self.lr * mh / (vh.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// Reports an epoch loss; decays the learning rate and returns `true` when
    /// the loss failed to improve on the previous epoch by the relative tolerance.
    pub fn end_epoch(&mut self, loss: f64) -> bool {
        match self.last_loss {
            None => {
                self.last_loss = Some(loss);
                false
            }
            Some(last) => {
                self.last_loss = Some(loss);
                let stalled = loss >= last * (1.0 - self.plateau_tolerance);
                if stalled {
                    self.lr *= self.decay;
                }
                stalled
            }
        }
    }
}
