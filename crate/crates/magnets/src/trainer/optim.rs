//! Adaptive-moment stochastic optimizer (Adam, Kingma-Ba form).
//!
//! Per parameter: `m = b1*m + (1-b1)*g`, `v = b2*v + (1-b2)*g^2`, then
//! `w -= lr * mhat / (sqrt(vhat) + eps)` with the usual bias corrections.
//! Moments are stored in the same nested layout as the weights so the update
//! is a flat zip over the canonical parameter order; state round-trips
//! through checkpoints via `moments`/`restore`.

use crate::error::{Error, Result};
use crate::nested::{NestedConfig, NestedWeights};
use crate::numerics::{real, Real};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    learning_rate: f64,
    steps: usize,
    m: NestedWeights<T>,
    v: NestedWeights<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: &NestedConfig, learning_rate: f64) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Param(format!(
                "learning rate must be finite and positive, got {learning_rate}"
            )));
        }
        Ok(Adam {
            learning_rate,
            steps: 0,
            m: NestedWeights::zeros(config),
            v: NestedWeights::zeros(config),
        })
    }

    /// Rebuild optimizer state from checkpointed moments.
    pub fn restore(
        learning_rate: f64,
        steps: usize,
        m: NestedWeights<T>,
        v: NestedWeights<T>,
    ) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Param(format!(
                "learning rate must be finite and positive, got {learning_rate}"
            )));
        }
        Ok(Adam { learning_rate, steps, m, v })
    }

    #[must_use]
    pub fn steps(&self) -> usize {
        self.steps
    }

    #[must_use]
    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    /// Change the learning rate mid-run (for decay schedules).
    pub fn set_learning_rate(&mut self, learning_rate: f64) -> Result<()> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::Param(format!(
                "learning rate must be finite and positive, got {learning_rate}"
            )));
        }
        self.learning_rate = learning_rate;
        Ok(())
    }

    /// First and second moment estimates, for checkpointing.
    #[must_use]
    pub fn moments(&self) -> (&NestedWeights<T>, &NestedWeights<T>) {
        (&self.m, &self.v)
    }

    /// Apply one update in place. `grads` must share the weight layout.
    pub fn step(&mut self, weights: &mut NestedWeights<T>, grads: &NestedWeights<T>) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let b1 = real::<T>(ADAM_BETA1);
        let b2 = real::<T>(ADAM_BETA2);
        let one_m_b1 = real::<T>(1.0 - ADAM_BETA1);
        let one_m_b2 = real::<T>(1.0 - ADAM_BETA2);
        let lr = real::<T>(self.learning_rate / bc1);
        let inv_bc2 = real::<T>(1.0 / bc2);
        let eps = real::<T>(ADAM_EPS);

        let g_views = grads.param_views();
        let mut w_slots = weights.param_views_mut();
        let mut m_slots = self.m.param_views_mut();
        let mut v_slots = self.v.param_views_mut();
        if g_views.len() != w_slots.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "gradient has {} tensors, weights have {}",
                    g_views.len(),
                    w_slots.len()
                ),
            });
        }
        for (((g, w), m), v) in g_views
            .iter()
            .zip(w_slots.iter_mut())
            .zip(m_slots.iter_mut())
            .zip(v_slots.iter_mut())
        {
            if g.data.len() != w.data.len() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("tensor {} size mismatch", g.name),
                });
            }
            for i in 0..g.data.len() {
                let gi = g.data[i];
                let mi = b1 * m.data[i] + one_m_b1 * gi;
                let vi = b2 * v.data[i] + one_m_b2 * gi * gi;
                m.data[i] = mi;
                v.data[i] = vi;
                w.data[i] = w.data[i] - lr * mi / ((vi * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
