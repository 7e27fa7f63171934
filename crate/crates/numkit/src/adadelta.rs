//! Adadelta with running averages of squared gradients and squared updates.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Minimize,
    Maximize,
}

#[derive(Clone, Debug)]
pub struct Adadelta<T> {
    pub rho: T,
    pub epsilon: T,
    /// Multiplier on the update; 1 reproduces the plain rule.
    pub lr: T,
    sq_grad: Vec<Tensor<T>>,
    sq_delta: Vec<Tensor<T>>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(rho: T, epsilon: T) -> Self {
        assert!(rho > T::zero() && rho < T::one(), "rho must lie in (0, 1)");
        assert!(epsilon > T::zero(), "epsilon must be positive");
        Self {
            rho,
            epsilon,
            lr: T::one(),
            sq_grad: Vec::new(),
            sq_delta: Vec::new(),
        }
    }

    /// `E[g²]` accumulators, empty before the first step.
    pub fn sq_grad(&self) -> &[Tensor<T>] {
        &self.sq_grad
    }

    /// `E[Δx²]` accumulators, empty before the first step.
    pub fn sq_delta(&self) -> &[Tensor<T>] {
        &self.sq_delta
    }

    /// Applies one update. The whole step is rejected, leaving parameters and
    /// accumulators untouched, if any gradient is non-finite or mis-shaped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Tensor<T>], dir: Direction) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::InvalidShape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (id, g) in store.ids().zip(grads) {
            if g.shape() != store.get(id).shape() {
                return Err(Error::ShapeMismatch {
                    op: "adadelta",
                    left: store.get(id).shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
            }
        }
        if self.sq_grad.is_empty() {
            self.sq_grad = store.zeros_like();
            self.sq_delta = store.zeros_like();
        }
        let (rho, eps, lr) = (self.rho, self.epsilon, self.lr);
        let decay = T::one() - rho;
        let sign = match dir {
            Direction::Minimize => -T::one(),
            Direction::Maximize => T::one(),
        };
        for (k, id) in store.ids().enumerate() {
            let g = grads[k].data();
            let eg = self.sq_grad[k].data_mut();
            let ed = self.sq_delta[k].data_mut();
            let param = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                eg[i] = rho * eg[i] + decay * g[i] * g[i];
                let delta = sign * ((ed[i] + eps).sqrt() / (eg[i] + eps).sqrt()) * g[i];
                ed[i] = rho * ed[i] + decay * delta * delta;
                param[i] += lr * delta;
            }
        }
        Ok(())
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: T) -> T {
    let norm = grads.iter().map(|g| g.sq_norm()).sum::<T>().sqrt();
    if norm > max_norm && norm > T::zero() {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(k);
        }
    }
    norm
}
