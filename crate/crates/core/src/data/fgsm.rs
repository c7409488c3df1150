use super::Batch;
use crate::error::{Error, Result};
use crate::mogmm::{cross_entropy, LossConfig};
use crate::model::Model;
use crate::nn::mlp_forward;
use crate::tape::Tape;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Loss the attacker differentiates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FgsmLoss {
    /// The full training objective with the given weights.
    Total(LossConfig),
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FgsmConfig {
    pub epsilon: f64,
    pub loss: FgsmLoss,
    /// Box the perturbed inputs are clamped into; `None` disables clamping.
    pub clamp: Option<(f64, f64)>,
}

impl FgsmConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            loss: FgsmLoss::Total(LossConfig::default()),
            clamp: Some((0.0, 1.0)),
        }
    }
}

/// A model whose loss can be differentiated with respect to its inputs.
pub trait AttackTarget {
    /// `∂𝓛/∂x` for every input element.
    fn input_gradient(&self, _x: &Tensor, _labels: &[usize], _loss: &FgsmLoss) -> Result<Tensor> {
        Err(Error::Contract("model does not expose input gradients".into()))
    }
}

impl AttackTarget for Model {
    fn input_gradient(&self, x: &Tensor, labels: &[usize], loss: &FgsmLoss) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape)?;
        let xv = tape.leaf(x.clone());
        let root = match loss {
            FgsmLoss::Total(cfg) => Model::loss_terms(&mut tape, &bound, xv, labels, cfg)?.total,
            FgsmLoss::CrossEntropy => {
                let z = mlp_forward(&mut tape, xv, &bound.mlp)?;
                let y = bound.head.classifier_logits_batch(&mut tape, z)?;
                cross_entropy(&mut tape, y, labels)?
            }
        };
        tape.backward(root)?;
        Ok(tape.grad(xv))
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `x' = clamp(x + ε·sign(∂𝓛/∂x))` with `sign(0) = 0`.
pub fn fgsm_perturb<M: AttackTarget + ?Sized>(model: &M, batch: &Batch, cfg: &FgsmConfig) -> Result<Batch> {
    if !(cfg.epsilon >= 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::Config(format!("FGSM epsilon must be >= 0, got {}", cfg.epsilon)));
    }
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("FGSM needs a labeled batch".into()))?;
    if cfg.epsilon == 0.0 {
        return Ok(batch.clone());
    }
    let grad = model.input_gradient(&batch.features, labels, &cfg.loss)?;
    if grad.shape() != batch.features.shape() {
        return Err(Error::Dimension("input gradient shape differs from the batch".into()));
    }
    let data = batch
        .features
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| {
            let v = x + cfg.epsilon * sign(g);
            match cfg.clamp {
                Some((lo, hi)) => v.clamp(lo, hi),
                None => v,
            }
        })
        .collect();
    Batch::new(
        Tensor::new(batch.features.shape().to_vec(), data)?,
        batch.labels.clone(),
    )
}
