use serde::{Deserialize, Serialize};

use super::{Real, Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

struct Moments<T> {
    name: String,
    first: Vec<T>,
    second: Vec<T>,
}

/// Bias-corrected Adam. Moment buffers are created on the first step and bound
/// to the parameter order seen then.
pub struct Adam<T: Real = f32> {
    config: AdamConfig,
    step_count: u64,
    moments: Vec<Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step_count: 0,
            moments: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self, i: usize) -> Option<&[T]> {
        self.moments.get(i).map(|m| m.first.as_slice())
    }

    pub fn second_moment(&self, i: usize) -> Option<&[T]> {
        self.moments.get(i).map(|m| m.second.as_slice())
    }

    /// Applies one update to every `(name, param)` using the gradient stored in
    /// the tensor. Parameters without a gradient are treated as having a zero
    /// gradient. Nothing is modified if any gradient is non-finite.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        let mut params: Vec<(&str, &mut Tensor<T>)> = params.into_iter().collect();
        for (name, p) in &params {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient(name.to_string()));
                }
            }
        }
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|(name, p)| Moments {
                    name: name.to_string(),
                    first: vec![T::zero(); p.len()],
                    second: vec![T::zero(); p.len()],
                })
                .collect();
        }
        if self.moments.len() != params.len() {
            return Err(TensorError::OptimizerMismatch(format!(
                "{} parameters, state has {}",
                params.len(),
                self.moments.len()
            )));
        }
        for ((name, p), m) in params.iter().zip(&self.moments) {
            if *name != m.name || p.len() != m.first.len() {
                return Err(TensorError::OptimizerMismatch(name.to_string()));
            }
        }

        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = T::lit(self.config.beta1);
        let b2 = T::lit(self.config.beta2);
        let lr = T::lit(self.config.lr);
        let eps = T::lit(self.config.epsilon);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for ((_, p), m) in params.iter_mut().zip(&mut self.moments) {
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[i]);
                m.first[i] = b1 * m.first[i] + (T::one() - b1) * g;
                m.second[i] = b2 * m.second[i] + (T::one() - b2) * g * g;
                let mhat = m.first[i] / bc1;
                let vhat = m.second[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
