use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::adam(1e-3)
    }
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr();
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be finite and >= 0 (got {lr})")));
        }
        match *self {
            OptimizerConfig::Sgd { momentum, .. } if !(0.0..1.0).contains(&momentum) => {
                Err(Error::Config(format!("momentum must be in [0, 1) (got {momentum})")))
            }
            OptimizerConfig::Adam { beta1, beta2, eps, .. }
                if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || eps <= 0.0 =>
            {
                Err(Error::Config("adam needs beta1, beta2 in [0, 1) and eps > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    #[default]
    Constant,
    StepDecay { factor: f64, every: usize },
}

impl LrSchedule {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SlotState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// First-order optimizer with per-tensor state. Slots are positional: the
/// caller passes trainables in the same order every step. A `None` gradient
/// leaves the slot (and its step count) untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    pub slots: Vec<Option<SlotState>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: Vec::new(),
        }
    }

    pub fn step<S: Real>(
        &mut self,
        lr: f64,
        params: Vec<(&mut Tensor<S>, bool)>,
        grads: &[Option<Tensor<S>>],
    ) -> Result<()> {
        let scales = vec![1.0; params.len()];
        self.step_scaled(lr, params, grads, &scales)
    }

    /// Like [`Self::step`] with a per-slot learning-rate multiplier.
    pub fn step_scaled<S: Real>(
        &mut self,
        lr: f64,
        params: Vec<(&mut Tensor<S>, bool)>,
        grads: &[Option<Tensor<S>>],
        scales: &[f64],
    ) -> Result<()> {
        if params.len() != grads.len() || scales.len() != grads.len() {
            return Err(Error::Usage(format!(
                "{} trainables but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        for (i, ((p, trainable), g)) in params.into_iter().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !trainable {
                continue;
            }
            if g.len() != p.len() {
                return Err(Error::Usage(format!("gradient {i} has {} values for {}", g.len(), p.len())));
            }
            let slot = self.slots[i].get_or_insert_with(|| SlotState {
                step: 0,
                m: vec![0.0; p.len()],
                v: match self.config {
                    OptimizerConfig::Adam { .. } => vec![0.0; p.len()],
                    OptimizerConfig::Sgd { .. } => Vec::new(),
                },
            });
            slot.step += 1;
            let lr = lr * scales[i];
            match self.config {
                OptimizerConfig::Sgd { momentum, .. } => {
                    for ((w, &gv), m) in p.data_mut().iter_mut().zip(g.data()).zip(&mut slot.m) {
                        *m = momentum * *m + gv.as_f64();
                        *w = S::lit(w.as_f64() - lr * *m);
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps, .. } => {
                    let c1 = 1.0 - beta1.powi(slot.step as i32);
                    let c2 = 1.0 - beta2.powi(slot.step as i32);
                    for (((w, &gv), m), v) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(&mut slot.m)
                        .zip(&mut slot.v)
                    {
                        let gv = gv.as_f64();
                        *m = beta1 * *m + (1.0 - beta1) * gv;
                        *v = beta2 * *v + (1.0 - beta2) * gv * gv;
                        *w = S::lit(w.as_f64() - lr * (*m / c1) / ((*v / c2).sqrt() + eps));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(1e-3));
        let mut w = Tensor::<f32>::full(&[3], 0.25);
        let g = Tensor::full(&[3], 1.0);
        opt.step(0.0, vec![(&mut w, true)], &[Some(g)]).unwrap();
        assert_eq!(w.data(), &[0.25; 3]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        let mut w = Tensor::<f64>::full(&[2], 1.0);
        let g = Tensor::new(vec![2], vec![3.0, -0.5]).unwrap();
        opt.step(0.1, vec![(&mut w, true)], &[Some(g)]).unwrap();
        assert!((w.data()[0] - 0.9).abs() < 1e-7);
        assert!((w.data()[1] - 1.1).abs() < 1e-7);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0, momentum: 0.5 });
        let mut w = Tensor::<f64>::zeros(&[1]);
        for _ in 0..2 {
            opt.step(1.0, vec![(&mut w, true)], &[Some(Tensor::scalar(1.0))]).unwrap();
        }
        assert_eq!(w.data(), &[-2.5]);
    }

    #[test]
    fn frozen_and_absent_slots_are_skipped() {
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1));
        let mut a = Tensor::<f64>::zeros(&[1]);
        let mut b = Tensor::<f64>::zeros(&[1]);
        opt.step(0.1, vec![(&mut a, false), (&mut b, true)], &[Some(Tensor::scalar(1.0)), None])
            .unwrap();
        assert_eq!((a.data()[0], b.data()[0]), (0.0, 0.0));
        assert!(opt.slots.iter().all(|s| s.is_none()));
    }

    #[test]
    fn step_decay_schedule() {
        let s = LrSchedule::StepDecay { factor: 0.5, every: 10 };
        assert_eq!(s.lr(1.0, 9), 1.0);
        assert_eq!(s.lr(1.0, 10), 0.5);
        assert_eq!(s.lr(1.0, 25), 0.25);
    }
}
