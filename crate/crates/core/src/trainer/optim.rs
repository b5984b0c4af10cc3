//! AdamW with decoupled weight decay, global-norm gradient clipping, and
//! the post-step scalar clamps.
//!
//! Decay applies only to entries flagged for it (weight matrices); the
//! learnable scalars, gains, biases, and the class token are exempt, and
//! the temperature/curvature clamps run after every update.

use crate::encoders::{Bound, Model};
use crate::lorentz::CurvatureParam;
use crate::tensor::{Gradients, RawTensor};
use crate::{lit, Scalar};

use super::TrainConfig;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.98;
pub const ADAM_EPS: f64 = 1e-6;
pub const GRAD_CLIP_NORM: f64 = 1.0;

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<S: Scalar> {
    m: Vec<RawTensor<S>>,
    v: Vec<RawTensor<S>>,
    step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(model: &Model<S>) -> Self {
        let zeros: Vec<RawTensor<S>> = model
            .store
            .iter()
            .map(|(_, e)| RawTensor::zeros(e.value.shape()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update over every trainable parameter that received a
    /// gradient, then the scalar clamps.
    pub fn update(
        &mut self,
        model: &mut Model<S>,
        bound: &Bound<S>,
        grads: &Gradients<S>,
        lr: S,
        config: &TrainConfig,
    ) {
        self.step += 1;
        let slots: Vec<usize> = (0..model.store.len()).collect();

        // Global-norm clip across every gradient in the step.
        let mut sq_sum = S::zero();
        for &slot in &slots {
            if let Some(g) = bound.grad_of(grads, slot) {
                sq_sum += g.data().iter().map(|v| *v * *v).sum::<S>();
            }
        }
        let norm = sq_sum.sqrt();
        let clip: S = lit(GRAD_CLIP_NORM);
        let scale = if norm > clip { clip / norm } else { S::one() };

        let beta1: S = lit(ADAM_BETA1);
        let beta2: S = lit(ADAM_BETA2);
        let eps: S = lit(ADAM_EPS);
        let bias1 = S::one() - beta1.powi(self.step as i32);
        let bias2 = S::one() - beta2.powi(self.step as i32);
        let wd = lit::<S>(config.weight_decay) * lr;

        for &slot in &slots {
            let Some(g) = bound.grad_of(grads, slot) else {
                continue;
            };
            let entry = model.store.entry_mut(slot);
            if !entry.trainable {
                continue;
            }
            let m = self.m[slot].data_mut();
            let v = self.v[slot].data_mut();
            let p = entry.value.data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i] * scale;
                m[i] = beta1 * m[i] + (S::one() - beta1) * gi;
                v[i] = beta2 * v[i] + (S::one() - beta2) * gi * gi;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                if entry.decay {
                    p[i] -= wd * p[i];
                }
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        clamp_scalars(model, config);
    }
}

/// Restore the scalar invariants: `tau >= tau_min`, `0 < c <= c_max`.
pub fn clamp_scalars<S: Scalar>(model: &mut Model<S>, config: &TrainConfig) {
    let slots = model.scalar_slots();
    let tau_min: S = lit(config.tau_min);
    let c_max: S = lit(config.c_max);
    {
        let tau = &mut model.store.entry_mut(slots.tau).value;
        let clamped = tau.item().max(tau_min);
        tau.data_mut()[0] = clamped;
    }
    {
        let curv = &mut model.store.entry_mut(slots.curv).value;
        let clamped = CurvatureParam::clamp_raw(curv.item(), c_max);
        curv.data_mut()[0] = clamped;
    }
    debug_assert!(model.tau() >= tau_min);
    debug_assert!(model.curvature() > S::zero() && model.curvature() <= c_max);
}
