//! The full network: MLP feature extractor plus MoGMM-FC head, with
//! batched prediction and the checkpoint document.

use crate::error::{Error, Result};
use crate::mogmm::{total_loss, BoundHead, LossConfig, LossTerms, MoGmmParams};
use crate::nn::{mlp_forward, BoundMlp, Linear, Mlp};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Layer sizes of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_dim: usize,
    pub classes: usize,
    pub components: usize,
    pub slope: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub mlp: Mlp,
    pub head: MoGmmParams,
}

/// A [`Model`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub mlp: BoundMlp,
    pub head: BoundHead,
}

/// Class probabilities from both scoring sources, `[N×C]` each.
#[derive(Clone, Debug)]
pub struct Predictions {
    /// `softmax(y)` of the classifier logits.
    pub softmax: Tensor,
    /// Normalized `ω_i GMM_i(z)`.
    pub posterior: Tensor,
}

const PREDICT_CHUNK: usize = 4096;

impl Model {
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, omega: Vec<f64>, rng: &mut R) -> Result<Self> {
        let mlp = Mlp::init(
            &[arch.input_dim, arch.hidden, arch.hidden, arch.feature_dim],
            arch.slope,
            rng,
        )?;
        let head = MoGmmParams::init(arch.classes, arch.components, arch.feature_dim, omega, rng)?;
        Ok(Self { mlp, head })
    }

    pub fn new(mlp: Mlp, head: MoGmmParams) -> Result<Self> {
        if mlp.output_dim() != head.dim() {
            return Err(Error::Dimension(format!(
                "MLP emits {} features, head expects {}",
                mlp.output_dim(),
                head.dim()
            )));
        }
        Ok(Self { mlp, head })
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn bind(&self, tape: &mut Tape) -> Result<BoundModel> {
        Ok(BoundModel {
            mlp: self.mlp.bind(tape),
            head: self.head.bind(tape)?,
        })
    }

    /// Total loss and its components for inputs `x` (`[N×D]`).
    pub fn loss_terms(
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        labels: &[usize],
        cfg: &LossConfig,
    ) -> Result<LossTerms> {
        let z = mlp_forward(tape, x, &bound.mlp)?;
        total_loss(tape, &bound.head, z, labels, cfg)
    }

    /// Parameters in optimizer order with their weight-decay flags:
    /// MLP weights (decay), MLP biases, `A` (decay), `b̃`, `η̃`.
    pub fn params_mut(&mut self) -> Vec<(&mut Tensor, bool)> {
        let mut out = Vec::new();
        for Linear { weight, bias } in &mut self.mlp.layers {
            out.push((weight, true));
            out.push((bias, false));
        }
        out.push((&mut self.head.a, true));
        out.push((&mut self.head.b_tilde, false));
        out.push((&mut self.head.eta_tilde, false));
        out
    }

    /// Leaf handles in the same order as [`Model::params_mut`].
    pub fn param_vars(bound: &BoundModel) -> Vec<Var> {
        let mut out: Vec<Var> = bound.mlp.layers.iter().flat_map(|&(w, b)| [w, b]).collect();
        out.extend([bound.head.a, bound.head.b_tilde, bound.head.eta_tilde]);
        out
    }

    /// Forward-only class probabilities for every row of `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Predictions> {
        let (n, _) = x.dims2()?;
        let c = self.classes();
        let mut softmax = Vec::with_capacity(n * c);
        let mut posterior = Vec::with_capacity(n * c);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let chunk = x.select_rows(&rows)?;
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape)?;
            let xv = tape.constant(chunk);
            let z = mlp_forward(&mut tape, xv, &bound.mlp)?;
            let y = bound.head.classifier_logits_batch(&mut tape, z)?;
            let ps = tape.softmax_rows(y)?;
            let ll = bound.head.class_log_likelihoods_batch(&mut tape, z)?;
            let pp = tape.softmax_rows(ll)?;
            softmax.extend_from_slice(tape.value(ps).data());
            posterior.extend_from_slice(tape.value(pp).data());
            start = end;
        }
        Ok(Predictions {
            softmax: Tensor::from_parts(vec![n, c], softmax),
            posterior: Tensor::from_parts(vec![n, c], posterior),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            classes: self.head.classes(),
            components: self.head.components(),
            dim: self.head.dim(),
            omega: self.head.omega().to_vec(),
            a: self.head.a.data().to_vec(),
            b_tilde: self.head.b_tilde.data().to_vec(),
            eta_tilde: self.head.eta_tilde.data().to_vec(),
            mlp: MlpDoc {
                slope: self.mlp.slope,
                layers: self
                    .mlp
                    .layers
                    .iter()
                    .map(|l| LayerDoc {
                        inputs: l.weight.shape()[0],
                        outputs: l.weight.shape()[1],
                        weight: l.weight.data().to_vec(),
                        bias: l.bias.data().to_vec(),
                    })
                    .collect(),
            },
        }
    }

    pub fn from_checkpoint(doc: &Checkpoint) -> Result<Self> {
        if doc.format != CHECKPOINT_FORMAT || doc.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                doc.format, doc.version
            )));
        }
        let (c, k, m) = (doc.classes, doc.components, doc.dim);
        let head = MoGmmParams::from_parts(
            c,
            k,
            m,
            Tensor::new(vec![c, k, m], doc.a.clone())?,
            Tensor::new(vec![c, k, m], doc.b_tilde.clone())?,
            Tensor::new(vec![c, k], doc.eta_tilde.clone())?,
            doc.omega.clone(),
        )?;
        let layers = doc
            .mlp
            .layers
            .iter()
            .map(|l| {
                Ok(Linear {
                    weight: Tensor::new(vec![l.inputs, l.outputs], l.weight.clone())?,
                    bias: Tensor::new(vec![l.outputs], l.bias.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(Mlp::from_layers(layers, doc.mlp.slope)?, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(&self.to_checkpoint())?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_checkpoint(&doc)
    }
}

pub const CHECKPOINT_FORMAT: &str = "dsui-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk checkpoint document. All tensors are flat row-major arrays:
/// `a` and `b_tilde` are `C×K×M`, `eta_tilde` is `C×K`, each layer's
/// `weight` is `inputs×outputs`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub classes: usize,
    pub components: usize,
    pub dim: usize,
    pub omega: Vec<f64>,
    pub a: Vec<f64>,
    pub b_tilde: Vec<f64>,
    pub eta_tilde: Vec<f64>,
    pub mlp: MlpDoc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpDoc {
    pub slope: f64,
    pub layers: Vec<LayerDoc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDoc {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}
