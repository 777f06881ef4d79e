//! Mini-batch training with per-epoch seeded shuffling.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::{batches, collate, Sample};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::optim::{Adam, AdamConfig, Optimizer, Sgd};
use crate::seeding::dropout_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Seeds the per-epoch shuffle and dropout streams.
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 45,
            batch_size: 64,
            learning_rate: adam.learning_rate,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        self.adam().validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    pub fn optimizer(&self) -> Result<Optimizer<f32>> {
        Ok(match self.optimizer {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(self.adam())?),
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd {
                learning_rate: self.learning_rate,
            }),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample cross-entropy over the epoch.
    pub loss: f64,
    /// Fraction of training samples classified correctly by the train-mode
    /// forward passes of the epoch.
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
}

impl TrainingHistory {
    /// `epoch,loss,train_accuracy` with full-precision values.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_accuracy\n");
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.loss, e.train_accuracy).expect("writing to a String");
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Owns the optimiser state for one model across epochs.
pub struct Trainer<'m> {
    model: &'m mut Model<f32>,
    optimizer: Optimizer<f32>,
    config: TrainConfig,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model<f32>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: config.optimizer()?,
            model,
            config: config.clone(),
        })
    }

    pub fn model(&self) -> &Model<f32> {
        self.model
    }

    /// One pass over `samples`; `epoch` is 0-based and keys the shuffle and
    /// dropout streams.
    pub fn run_epoch(&mut self, samples: &[Sample], epoch: usize) -> Result<EpochStats> {
        if samples.is_empty() {
            return Err(Error::data("training set is empty"));
        }
        let order = batches(samples.len(), self.config.batch_size, self.config.seed, epoch)?;
        let mut rng = dropout_rng(self.config.seed, epoch);
        let k = self.model.config().num_classes;
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (b, idx) in order.iter().enumerate() {
            let with_context = |e: Error| match e {
                Error::Numeric(m) => Error::numeric(format!("epoch {}, batch {}: {m}", epoch + 1, b + 1)),
                other => other,
            };
            let (images, labels) = collate(samples, idx)?;
            let (out, grads) = self
                .model
                .loss_and_gradients(&images, &labels, &mut rng)
                .map_err(with_context)?;
            loss_sum += out.per_sample.iter().map(|&l| l as f64).sum::<f64>();
            correct += out
                .probs
                .data()
                .chunks(k)
                .zip(&labels)
                .filter(|(row, &y)| argmax(row) == y)
                .count();
            self.optimizer
                .step(&mut self.model.params_mut(), &grads)
                .map_err(with_context)?;
        }
        let stats = EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / samples.len() as f64,
            train_accuracy: correct as f64 / samples.len() as f64,
        };
        if !stats.loss.is_finite() {
            return Err(Error::numeric(format!("epoch {}: mean loss is not finite", epoch + 1)));
        }
        Ok(stats)
    }
}

/// Runs `config.epochs` epochs and returns one history row per epoch.
pub fn train(model: &mut Model<f32>, samples: &[Sample], config: &TrainConfig) -> Result<TrainingHistory> {
    let mut trainer = Trainer::new(model, config)?;
    let mut history = TrainingHistory::default();
    for epoch in 0..config.epochs {
        let stats = trainer.run_epoch(samples, epoch)?;
        info!(
            "epoch {}/{}: loss {:.6} train accuracy {:.4}",
            stats.epoch, config.epochs, stats.loss, stats.train_accuracy
        );
        history.epochs.push(stats);
    }
    Ok(history)
}

/// Fraction of `samples` the model classifies correctly in evaluation mode.
pub fn evaluate_accuracy(model: &Model<f32>, samples: &[Sample], batch_size: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::data("cannot evaluate an empty set"));
    }
    let idx: Vec<usize> = (0..samples.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = collate(samples, chunk)?;
        let pred = model.predict(&images)?;
        correct += pred.classes.iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    Ok(correct as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ConvBlock, ModelConfig};
    use crate::synthetic::{generate, SyntheticSpec};

    fn small_model(dropout: f64) -> Model<f32> {
        Model::build(&ModelConfig {
            input_size: 16,
            conv_blocks: vec![ConvBlock::new(4), ConvBlock::new(4)],
            fc_widths: vec![16],
            dropout_rate: dropout,
            seed: 5,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    fn data() -> Vec<Sample> {
        generate(&SyntheticSpec {
            per_class: 6,
            size: 16,
            seed: 1,
            ..SyntheticSpec::default()
        })
        .samples
    }

    fn config(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 5,
            learning_rate: lr,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_alone() {
        let mut model = small_model(0.0);
        let before: Vec<_> = model.params().iter().map(|p| p.value.clone()).collect();
        let history = train(&mut model, &data(), &config(3, 0.0)).unwrap();
        let after: Vec<_> = model.params().iter().map(|p| p.value.clone()).collect();
        assert_eq!(before, after);
        let first = history.epochs[0].loss;
        for e in &history.epochs {
            assert!((e.loss - first).abs() < 1e-12, "{} vs {first}", e.loss);
        }
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let mut model = small_model(0.2);
            train(&mut model, &data(), &config(3, 0.01)).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.epochs.len(), 3);
        assert!(a.epochs.iter().all(|e| e.loss.is_finite()));
    }

    #[test]
    fn empty_training_set_is_data_error() {
        let mut model = small_model(0.0);
        assert!(matches!(train(&mut model, &[], &config(1, 0.01)), Err(Error::Data(_))));
    }

    #[test]
    fn full_batch_sgd_descends() {
        let samples = data();
        let mut model = small_model(0.0);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: samples.len(),
            learning_rate: 0.01,
            optimizer: OptimizerKind::Sgd,
            ..config(1, 0.01)
        };
        let mut trainer = Trainer::new(&mut model, &cfg).unwrap();
        let mut losses = vec![];
        for epoch in 0..6 {
            losses.push(trainer.run_epoch(&samples, epoch).unwrap().loss);
        }
        // each epoch is one full-batch step, reported before the update
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn csv_layout() {
        let h = TrainingHistory {
            epochs: vec![EpochStats { epoch: 1, loss: 0.5, train_accuracy: 0.25 }],
        };
        assert_eq!(h.to_csv(), "epoch,loss,train_accuracy\n1,0.5,0.25\n");
    }

    #[test]
    fn invalid_train_config() {
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.5, ..TrainConfig::default() }.validate().is_err());
    }
}
