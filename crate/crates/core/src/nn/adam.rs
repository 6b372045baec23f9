use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam over an ordered list of flat parameter tensors.
///
/// Moment buffers are sized on the first update; later updates must present
/// the same tensor layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Real> Adam<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.second
    }

    /// Restore optimizer state, e.g. from a checkpoint.
    pub fn from_parts(config: AdamConfig, step: u64, first: Vec<Vec<S>>, second: Vec<Vec<S>>) -> Result<Self> {
        if first.len() != second.len() || first.iter().zip(&second).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("adam moment buffers disagree".into()));
        }
        Ok(Self { config, step, first, second })
    }

    /// One update `p -= lr * m̂ / (sqrt(v̂) + eps)` for every tensor.
    ///
    /// Rejects non-finite gradients before touching any state.
    pub fn update(&mut self, params: &mut [&mut [S]], grads: &[&[S]], lr: S) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!("{} param tensors vs {} grads", params.len(), grads.len())));
        }
        for (k, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape(format!("tensor {k}: {} params vs {} grads", p.len(), g.len())));
            }
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient tensor {k} element {i} = {}", g[i])));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![S::zero(); g.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != grads.len() || self.first.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(Error::Shape("parameter layout changed between adam updates".into()));
        }

        self.step += 1;
        let b1 = S::lit(self.config.beta1);
        let b2 = S::lit(self.config.beta2);
        let eps = S::lit(self.config.eps);
        let t = self.step as i32;
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (S::one() - b1) * g[i];
                v[i] = b2 * v[i] + (S::one() - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Global L2 norm across a set of tensors.
pub fn global_norm<S: Real>(tensors: &[&[S]]) -> S {
    tensors.iter().flat_map(|t| t.iter()).map(|&v| v * v).sum::<S>().sqrt()
}
