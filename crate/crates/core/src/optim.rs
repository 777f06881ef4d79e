//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Param;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning rate {} must be finite and non-negative", self.learning_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} = {b} must lie in (0, 1)")));
            }
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::config(format!("epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

fn check_grads<T: Scalar>(params: &[&mut Param<T>], grads: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::config(format!(
            "{} gradients supplied for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::config(format!(
                "gradient for {} has shape {:?}, parameter has {:?}",
                p.name,
                g.shape(),
                p.value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::numeric(format!("gradient for {} is not finite", p.name)));
        }
    }
    Ok(())
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    first_moment: Vec<Tensor<T>>,
    second_moment: Vec<Tensor<T>>,
    step_count: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Adam {
            config,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
            step_count: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Tensor<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Tensor<T>] {
        &self.second_moment
    }

    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        if self.first_moment.is_empty() {
            self.first_moment = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
            self.second_moment = self.first_moment.clone();
        } else if self.first_moment.len() != params.len()
            || self
                .first_moment
                .iter()
                .zip(params.iter())
                .any(|(m, p)| m.shape() != p.value.shape())
        {
            return Err(Error::config("parameter set changed between Adam steps"));
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let lr = T::from_f64_lossy(c.learning_rate);
        let eps = T::from_f64_lossy(c.epsilon);
        let bias1 = T::one() - b1.powi(t);
        let bias2 = T::one() - b2.powi(t);

        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((theta, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *theta = *theta - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Plain gradient descent, `θ ← θ − lr·g`.
#[derive(Debug, Clone, Copy)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Sgd {
    pub fn step<T: Scalar>(&self, params: &mut [&mut Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        check_grads(params, grads)?;
        let lr = T::from_f64_lossy(self.learning_rate);
        for (p, g) in params.iter_mut().zip(grads) {
            for (theta, &g) in p.value.data_mut().iter_mut().zip(g.data()) {
                *theta = *theta - lr * g;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer<T> {
    Adam(Adam<T>),
    Sgd(Sgd),
}

impl<T: Scalar> Optimizer<T> {
    pub fn step(&mut self, params: &mut [&mut Param<T>], grads: &[Tensor<T>]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd(s) => s.step(params, grads),
        }
    }
}
