//! Adam with L2 or decoupled weight decay, and a linear learning-rate decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecay {
    /// Added to the gradient before the moment updates.
    L2,
    /// Applied directly to the weights, scaled by the learning rate.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub decay_mode: WeightDecay,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 4e-5, decay_mode: WeightDecay::L2 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimiser settings {self:?}")))
        }
    }
}

/// Learning rate falling linearly from `base` at step 0 to 0 at `total_steps`.
pub fn linear_decay(base: f64, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return base;
    }
    base * (1.0 - step.min(total_steps) as f64 / total_steps as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

/// Adam over every trainable parameter of a store. Moments are kept in f64.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new<S: Scalar>(cfg: AdamConfig, store: &ParamStore<S>) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Ok(Self { cfg, state: AdamState { step: 0, m: zeros.clone(), v: zeros } })
    }

    /// One update at learning rate `lr`. Frozen parameters and parameters without a gradient are left alone.
    pub fn step<S: Scalar>(
        &mut self,
        store: &mut ParamStore<S>,
        grads: &[(ParamId, Tensor<S>)],
        lr: f64,
    ) -> Result<()> {
        if self.state.m.len() != store.len() {
            return Err(Error::InvalidArgument("optimiser state does not match the parameter store".into()));
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (id, g) in grads {
            let p = store.get_mut(*id);
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.state.m[id.index()], &mut self.state.v[id.index()]);
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                let wf = w.to_f64().unwrap_or(0.0);
                let mut gf = g.data()[i].to_f64().unwrap_or(0.0);
                if c.decay_mode == WeightDecay::L2 {
                    gf += c.weight_decay * wf;
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gf;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gf * gf;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut nw = wf - lr * mhat / (vhat.sqrt() + c.eps);
                if c.decay_mode == WeightDecay::Decoupled {
                    nw -= lr * c.weight_decay * wf;
                }
                *w = S::of(nw);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, -1.0]), true);
        let cfg = AdamConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = Adam::new(cfg, &store).unwrap();
        opt.step(&mut store, &[(id, Tensor::from_vec(&[2], vec![3.0, -0.5]))], 0.1).unwrap();
        let w = store.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6, "{w:?}");
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("c", Tensor::from_vec(&[1], vec![2.0]), false);
        let mut opt = Adam::new(AdamConfig::default(), &store).unwrap();
        opt.step(&mut store, &[(id, Tensor::from_vec(&[1], vec![1.0]))], 0.1).unwrap();
        assert_eq!(store.get(id).value.data()[0], 2.0);
    }

    #[test]
    fn decay_modes_differ() {
        let run = |mode| {
            let mut store = ParamStore::<f64>::new();
            let id = store.add("w", Tensor::from_vec(&[1], vec![5.0]), true);
            let cfg = AdamConfig { weight_decay: 0.1, decay_mode: mode, ..Default::default() };
            let mut opt = Adam::new(cfg, &store).unwrap();
            for _ in 0..3 {
                opt.step(&mut store, &[(id, Tensor::from_vec(&[1], vec![0.0]))], 0.1).unwrap();
            }
            store.get(id).value.data()[0]
        };
        let (l2, dec) = (run(WeightDecay::L2), run(WeightDecay::Decoupled));
        assert!(l2 < 5.0 && dec < 5.0 && (l2 - dec).abs() > 1e-3);
    }

    #[test]
    fn linear_decay_endpoints() {
        assert_eq!(linear_decay(1e-4, 0, 100), 1e-4);
        assert!((linear_decay(1e-4, 50, 100) - 5e-5).abs() < 1e-18);
        assert_eq!(linear_decay(1e-4, 100, 100), 0.0);
    }
}
