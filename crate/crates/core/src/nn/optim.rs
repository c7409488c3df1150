use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied only to slots flagged `decay`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// One parameter tensor with its gradient for an optimizer step.
pub struct ParamSlot<'a> {
    pub value: &'a mut Tensor,
    pub grad: &'a Tensor,
    pub decay: bool,
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// `θ ← θ − lr·wd·θ` on decaying slots, then the Adam update.
    ///
    /// Slots must be passed in the same order on every call. A non-finite
    /// gradient leaves all parameters untouched and returns a domain error.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>], lr: f64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::Contract(format!("learning rate {} must be > 0", lr)));
        }
        if self.first.is_empty() {
            self.first = slots.iter().map(|s| vec![0.0; s.value.numel()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != slots.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                slots.len()
            )));
        }
        for (i, s) in slots.iter().enumerate() {
            if s.grad.shape() != s.value.shape() || self.first[i].len() != s.value.numel() {
                return Err(Error::Dimension(format!(
                    "parameter {}: value {:?}, gradient {:?}",
                    i,
                    s.value.shape(),
                    s.grad.shape()
                )));
            }
            if let Some(j) = s.grad.data().iter().position(|g| !g.is_finite()) {
                return Err(Error::Domain(format!(
                    "non-finite gradient {} in parameter {} at element {}",
                    s.grad.data()[j],
                    i,
                    j
                )));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (i, s) in slots.iter_mut().enumerate() {
            let decay = if s.decay { lr * weight_decay } else { 0.0 };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (p, &g)) in s.value.data_mut().iter_mut().zip(s.grad.data()).enumerate() {
                *p -= decay * *p;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamConfig {
        AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(no_decay());
        let mut p = Tensor::vector(vec![1.5, -2.0]).unwrap();
        let g = Tensor::zeros(&[2]);
        for _ in 0..3 {
            adam.step(
                &mut [ParamSlot {
                    value: &mut p,
                    grad: &g,
                    decay: true,
                }],
                0.1,
            )
            .unwrap();
        }
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_is_bounded_by_lr() {
        let mut adam = Adam::new(no_decay());
        let mut p = Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap();
        let g = Tensor::vector(vec![3.0, -1e-3, 250.0]).unwrap();
        adam.step(
            &mut [ParamSlot {
                value: &mut p,
                grad: &g,
                decay: false,
            }],
            0.01,
        )
        .unwrap();
        for (d, gi) in p.data().iter().zip(g.data()) {
            assert!(d.abs() <= 0.01 * (1.0 + 1e-6));
            assert!(d.signum() == -gi.signum());
        }
    }

    #[test]
    fn descends_on_quadratic() {
        let mut adam = Adam::new(no_decay());
        let mut theta = Tensor::scalar(1.0);
        let mut prev = 1.0f64;
        for _ in 0..10 {
            let g = Tensor::scalar(2.0 * theta.data()[0]);
            adam.step(
                &mut [ParamSlot {
                    value: &mut theta,
                    grad: &g,
                    decay: false,
                }],
                0.1,
            )
            .unwrap();
            let now = theta.data()[0].abs();
            assert!(now < prev, "{} !< {}", now, prev);
            prev = now;
        }
    }

    #[test]
    fn decoupled_decay_only_on_flagged_slots() {
        let mut adam = Adam::new(AdamConfig {
            weight_decay: 0.5,
            ..AdamConfig::default()
        });
        let mut a = Tensor::scalar(2.0);
        let mut b = Tensor::scalar(2.0);
        let g = Tensor::scalar(0.0);
        adam.step(
            &mut [
                ParamSlot {
                    value: &mut a,
                    grad: &g,
                    decay: true,
                },
                ParamSlot {
                    value: &mut b,
                    grad: &g,
                    decay: false,
                },
            ],
            0.1,
        )
        .unwrap();
        assert!((a.data()[0] - 1.9).abs() < 1e-15);
        assert_eq!(b.data()[0], 2.0);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut adam = Adam::new(AdamConfig::default());
        let mut p = Tensor::scalar(1.0);
        let g = Tensor::from_parts(vec![], vec![f64::NAN]);
        let r = adam.step(
            &mut [ParamSlot {
                value: &mut p,
                grad: &g,
                decay: true,
            }],
            0.1,
        );
        assert!(matches!(r, Err(Error::Domain(_))));
        assert_eq!(p.data()[0], 1.0);
    }
}
