use crate::data::Batch;
use crate::error::{Error, Result};
use crate::mogmm::{omega_from_labels, LossConfig};
use crate::model::{Architecture, Model};
use crate::nn::{Adam, AdamConfig, LrSchedule, ParamSlot};
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Everything the training loop needs besides the data and the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub components: usize,
    pub slope: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Base (peak) learning rate of the one-cycle schedule.
    pub lr: f64,
    /// Cycle length in epochs; defaults to 70% of `epochs`.
    pub cycle_epochs: Option<f64>,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            feature_dim: 16,
            components: 8,
            slope: 0.01,
            epochs: 100,
            batch_size: 128,
            lr: 7.5e-4,
            cycle_epochs: None,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<LrSchedule> {
        let total = self.epochs as f64;
        LrSchedule::new(self.lr, self.cycle_epochs.unwrap_or(0.7 * total), total)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.hidden == 0 || self.feature_dim == 0 {
            return Err(Error::Config("hidden width and feature dim must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.slope >= 0.0) {
            return Err(Error::Config(format!("activation slope {} < 0", self.slope)));
        }
        self.loss.validate()?;
        self.schedule()?;
        Ok(())
    }
}

/// Batch-size-weighted averages of the loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ce: f64,
    pub sgvb: f64,
    pub nsgvb: f64,
    pub reg: f64,
    pub accuracy: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
}

/// Trains a fresh model on `data` from scratch. Fully determined by
/// `(config, data, seed)`.
pub fn train(cfg: &TrainConfig, data: &Batch, classes: usize, seed: u64) -> Result<TrainOutcome> {
    cfg.validate()?;
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract("training data must be labeled".into()))?;
    let (n, d) = data.features.dims2()?;
    if n == 0 {
        return Err(Error::Contract("empty training set".into()));
    }
    let omega = omega_from_labels(labels, classes)?;
    let arch = Architecture {
        input_dim: d,
        hidden: cfg.hidden,
        feature_dim: cfg.feature_dim,
        classes,
        components: cfg.components,
        slope: cfg.slope,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::init(&arch, omega, &mut rng)?;
    model.head.check_omega_covers(labels)?;
    let schedule = cfg.schedule()?;
    let mut adam = Adam::new(cfg.adam.clone());
    let mut order: Vec<usize> = (0..n).collect();
    let batches = n.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 5];
        let mut correct = 0usize;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let lr = schedule.lr_at(epoch as f64 + bi as f64 / batches as f64)?;
            let x = data.features.select_rows(idx)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();

            let mut tape = Tape::new();
            let bound = model.bind(&mut tape)?;
            let xv = tape.constant(x);
            let terms = Model::loss_terms(&mut tape, &bound, xv, &y, &cfg.loss)?;
            let total = tape.item(terms.total)?;
            if !total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: bi,
                    message: format!("total loss is {}", total),
                });
            }
            let w = idx.len() as f64;
            sums[0] += w * total;
            sums[1] += w * tape.item(terms.ce)?;
            sums[2] += w * tape.item(terms.sgvb)?;
            if let Some(v) = terms.nsgvb {
                sums[3] += w * tape.item(v)?;
            }
            if let Some(v) = terms.reg {
                sums[4] += w * tape.item(v)?;
            }
            correct += count_correct(tape.value(terms.logits), &y)?;

            tape.backward(terms.total)?;
            let grads: Vec<Tensor> = Model::param_vars(&bound).iter().map(|&v| tape.grad(v)).collect();
            let mut slots: Vec<ParamSlot<'_>> = model
                .params_mut()
                .into_iter()
                .zip(&grads)
                .map(|((value, decay), grad)| ParamSlot { value, grad, decay })
                .collect();
            adam.step(&mut slots, lr).map_err(|e| Error::Diverged {
                epoch,
                batch: bi,
                message: e.to_string(),
            })?;
            model.head.clamp_log_variances();
        }
        let nf = n as f64;
        history.push(EpochRecord {
            epoch: epoch + 1,
            lr: schedule.lr_at(epoch as f64)?,
            total: sums[0] / nf,
            ce: sums[1] / nf,
            sgvb: sums[2] / nf,
            nsgvb: sums[3] / nf,
            reg: sums[4] / nf,
            accuracy: correct as f64 / nf,
        });
        log::debug!("epoch {} {:?}", epoch + 1, history.last());
    }
    Ok(TrainOutcome { model, history })
}

/// Index of the largest entry of each row (first on ties).
pub fn argmax_rows(t: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = t.dims2()?;
    Ok((0..n)
        .map(|r| {
            t.row(r)
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect())
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> Result<usize> {
    Ok(argmax_rows(logits)?
        .iter()
        .zip(labels)
        .filter(|(p, t)| p == t)
        .count())
}

/// Writes the history as CSV with a header row.
pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in history {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Config(format!("csv: {:?}", other)),
    }
}
