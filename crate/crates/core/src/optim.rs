//! Nesterov SGD and the step learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("gradient for {name} has shape {grad:?}, parameter has {param:?}")]
    Shape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("invalid optimizer setting: {0}")]
    Config(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
            nesterov: true,
        }
    }
}

/// One scalar update: returns `(p′, v′)`.
pub fn sgd_update(p: f64, g: f64, v: f64, lr: f64, cfg: &SgdConfig) -> (f64, f64) {
    let g = g + cfg.weight_decay * p;
    let v = cfg.momentum * v + g;
    let update = if cfg.nesterov { g + cfg.momentum * v } else { v };
    (p - lr * update, v)
}

/// Optimizer state: one velocity buffer per stored tensor.
#[derive(Clone, Debug)]
pub struct Sgd<F> {
    pub cfg: SgdConfig,
    velocity: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Sgd<F> {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: Vec::new(),
        }
    }

    /// Applies accumulated gradients to every trainable tensor and clears them.
    /// Missing gradients count as zero. Batchnorm scale/shift skip weight decay.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<(), OptimError> {
        if !(lr > 0.0) {
            return Err(OptimError::Config(format!("learning rate must be positive, got {lr}")));
        }
        self.velocity.resize(store.len(), None);
        for (p, vel) in store.iter_mut().zip(&mut self.velocity) {
            if !p.trainable() {
                continue;
            }
            if let Some(g) = &p.grad {
                if g.shape() != p.value.shape() {
                    return Err(OptimError::Shape {
                        name: p.name.clone(),
                        param: p.value.shape().to_vec(),
                        grad: g.shape().to_vec(),
                    });
                }
            }
            let cfg = SgdConfig {
                weight_decay: if p.kind == ParamKind::Norm { 0.0 } else { self.cfg.weight_decay },
                ..self.cfg
            };
            let v = vel.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            let grad = p.grad.take();
            let values = p.value.data_mut();
            for (i, (pv, vv)) in values.iter_mut().zip(v.data_mut()).enumerate() {
                let gi = grad.as_ref().map_or(0.0, |g| g.data()[i].as_f64());
                let (np, nv) = sgd_update(pv.as_f64(), gi, vv.as_f64(), lr, &cfg);
                *pv = F::lit(np);
                *vv = F::lit(nv);
            }
        }
        Ok(())
    }
}

/// Step schedule: `η₀` until `drop_epoch`, then `η₀ / drop_factor`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub initial_lr: f64,
    pub drop_factor: f64,
    pub drop_epoch: usize,
    pub epochs: usize,
}

impl Schedule {
    /// 100 epochs at 0.001, drop at 50.
    pub const LONG: Schedule = Schedule {
        initial_lr: 0.001,
        drop_factor: 10.0,
        drop_epoch: 50,
        epochs: 100,
    };

    /// 30 epochs at 0.01, drop at 15.
    pub const DESK: Schedule = Schedule {
        initial_lr: 0.01,
        drop_factor: 10.0,
        drop_epoch: 15,
        epochs: 30,
    };

    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(OptimError::Config(format!("initial_lr must be positive, got {}", self.initial_lr)));
        }
        if !(self.drop_factor >= 1.0) {
            return Err(OptimError::Config(format!("drop_factor must be >= 1, got {}", self.drop_factor)));
        }
        if self.drop_epoch >= self.epochs {
            return Err(OptimError::Config(format!(
                "drop epoch {} must be before total epochs {}",
                self.drop_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.drop_epoch {
            self.initial_lr
        } else {
            self.initial_lr / self.drop_factor
        }
    }
}

impl Default for Schedule {
    fn default() -> Self {
        Self::DESK
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_nesterov_example() {
        let (p, v) = sgd_update(1.0, 0.1, 0.0, 0.001, &SgdConfig::default());
        assert!((v - 0.1005).abs() < 1e-12);
        assert!((p - 0.99980905).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let plain = SgdConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            nesterov: true,
        };
        let (p, _) = sgd_update(2.0, 0.5, 0.0, 0.1, &plain);
        assert_eq!(p, 2.0 - 0.1 * 0.5);
        let no_decay = SgdConfig {
            weight_decay: 0.0,
            ..SgdConfig::default()
        };
        assert_eq!(sgd_update(3.0, 0.0, 0.0, 0.1, &no_decay), (3.0, 0.0));
    }

    #[test]
    fn store_step_matches_scalar_rule_and_exempts_norm() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::full(&[2], 1.0), ParamKind::Weight);
        let n = store.add("bn.gamma", Tensor::full(&[1], 1.0), ParamKind::Norm);
        let b = store.add("bn.running_mean", Tensor::full(&[1], 1.0), ParamKind::Buffer);
        store.get_mut(w).grad = Some(Tensor::full(&[2], 0.1));
        let mut opt = Sgd::new(SgdConfig::default());
        opt.step(&mut store, 0.001).unwrap();
        assert!((store.value(w).data()[0] - 0.99980905).abs() < 1e-12);
        // zero gradient and no decay leave the norm scale alone on the first step
        assert_eq!(store.value(n).data(), &[1.0]);
        assert_eq!(store.value(b).data(), &[1.0]);
        assert!(store.get(w).grad.is_none());
        // second step uses the stored velocity
        store.get_mut(w).grad = Some(Tensor::full(&[2], 0.1));
        opt.step(&mut store, 0.001).unwrap();
        let (p1, v1) = sgd_update(1.0, 0.1, 0.0, 0.001, &opt.cfg);
        let (p2, _) = sgd_update(p1, 0.1, v1, 0.001, &opt.cfg);
        assert!((store.value(w).data()[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::zeros(&[2]), ParamKind::Weight);
        store.get_mut(w).grad = Some(Tensor::zeros(&[3]));
        let err = Sgd::new(SgdConfig::default()).step(&mut store, 0.1).unwrap_err();
        assert!(matches!(err, OptimError::Shape { .. }));
        assert!(Sgd::<f64>::new(SgdConfig::default()).step(&mut store, 0.0).is_err());
    }

    #[test]
    fn schedule_boundaries() {
        let s = Schedule::LONG;
        assert_eq!(s.lr_at(0), 0.001);
        assert_eq!(s.lr_at(49), 0.001);
        assert_eq!(s.lr_at(50), 0.0001);
        assert_eq!(s.lr_at(99), 0.0001);
        assert_eq!(Schedule::DESK.lr_at(14), 0.01);
        assert_eq!(Schedule::DESK.lr_at(15), 0.001);
        assert!(s.validate().is_ok());
        assert!(Schedule { drop_epoch: 100, ..s }.validate().is_err());
        assert!(Schedule { initial_lr: 0.0, ..s }.validate().is_err());
    }

    proptest! {
        #[test]
        fn plain_sgd_limit(p in -10.0f64..10.0, g in -10.0f64..10.0, lr in 1e-4f64..1.0) {
            let cfg = SgdConfig { momentum: 0.0, weight_decay: 0.0, nesterov: true };
            prop_assert_eq!(sgd_update(p, g, 0.0, lr, &cfg).0, p - lr * g);
        }
    }
}
