use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Graph};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

use super::metrics::Metrics;
use super::model::{argmax, Batch, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Batch size used for evaluation passes.
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            batch_size: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            eval_batch: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size < 2 || self.eval_batch == 0 {
            return Err(Error::Config("epochs must be positive and batch size at least 2".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("invalid optimizer hyper-parameters".into()));
        }
        Ok(())
    }
}

/// `lr0 * (1 + cos(pi t / epochs)) / 2`.
pub fn cosine_lr(lr0: f64, t: usize, epochs: usize) -> f64 {
    0.5 * lr0 * (1.0 + (PI * t as f64 / epochs as f64).cos())
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// `v = mu v + (g + wd w)`, `w -= lr v`.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore<f32>,
        grads: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>,
        lr: f64,
    ) -> Result<()> {
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (name, grad) in grads {
            let w = store
                .params
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            if w.shape() != grad.shape() {
                return Err(Error::shape("sgd", w.shape(), grad.shape()));
            }
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(w.shape().to_vec()));
            for ((wi, vi), &gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Running accuracy over the (train-mode) training batches.
    pub train_acc: f64,
    pub test_macc: Option<f64>,
    pub test_oa: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,train_acc,test_mAcc,test_OA";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{:.6},{:.6},{},{}",
            self.epoch,
            self.lr,
            self.train_loss,
            self.train_acc,
            opt(self.test_macc),
            opt(self.test_oa)
        )
    }
}

/// Eval-mode predictions for every cloud.
pub fn predict_dataset<T: Scalar>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.clouds.chunks(batch.max(1)) {
        out.extend(model.predict(&Batch::new(chunk)?)?);
    }
    Ok(out)
}

pub fn evaluate<T: Scalar>(model: &Model<T>, data: &Dataset, batch: usize) -> Result<Metrics> {
    let preds = predict_dataset(model, data, batch)?;
    Metrics::new(&preds, &data.labels(), model.config.classes)
}

/// Model plus optimizer state; `epoch` counts completed epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    pub sgd: Sgd,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let sgd = Sgd::new(config.momentum, config.weight_decay);
        Ok(Self {
            model,
            config,
            sgd,
            epoch: 0,
        })
    }

    /// Mini-batch order of epoch `t` (0-based); a trailing batch too small
    /// for batchnorm is dropped.
    pub fn batches(&self, n: usize, t: usize) -> Vec<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(t as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
            .chunks(self.config.batch_size)
            .filter(|c| c.len() >= 2)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// Runs one optimizer step; returns the batch loss and correct count.
    pub fn step(&mut self, batch: &Batch, lr: f64, batch_index: usize) -> Result<(f64, usize)> {
        let mut g = Graph::new();
        let fwd = self.model.forward(&mut g, batch, BnMode::Train, true)?;
        let loss = g.cross_entropy(fwd.logits, &batch.labels)?;
        let value = g.value(loss).item().as_f64();
        let diverged = || Error::Diverged {
            epoch: self.epoch + 1,
            batch: batch_index,
            loss: value,
        };
        if !value.is_finite() {
            return Err(diverged());
        }
        let correct = g
            .value(fwd.logits)
            .data()
            .chunks(self.model.config.classes)
            .zip(&batch.labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let grads = g.backward(loss)?;
        let pairs: Vec<(&str, &Tensor<f32>)> = fwd
            .params
            .iter()
            .filter_map(|(name, v)| grads.get(*v).map(|t| (name.as_str(), t)))
            .collect();
        if pairs.iter().any(|(_, t)| !t.all_finite()) {
            return Err(diverged());
        }
        self.sgd.step(&mut self.model.store, pairs, lr)?;
        self.model.store.update_running_stats(&fwd.stats)?;
        Ok((value, correct))
    }

    /// One pass over `data`; returns mean loss and running accuracy.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<(f64, f64)> {
        let lr = cosine_lr(self.config.lr, self.epoch, self.config.epochs);
        let (mut loss, mut correct, mut seen) = (0.0, 0, 0);
        for (i, idx) in self.batches(data.len(), self.epoch).into_iter().enumerate() {
            let batch = Batch::new(idx.iter().map(|&j| &data.clouds[j]))?;
            let (l, c) = self.step(&batch, lr, i)?;
            loss += l * batch.len() as f64;
            correct += c;
            seen += batch.len();
        }
        if seen == 0 {
            return Err(Error::Config("training set yields no batch of at least 2 clouds".into()));
        }
        self.epoch += 1;
        Ok((loss / seen as f64, correct as f64 / seen as f64))
    }

    /// Trains until `config.epochs`, calling `on_epoch` after each epoch.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochLog, &Trainer) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        train.validate()?;
        if train.num_classes() != self.model.config.classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model expects {}",
                train.num_classes(),
                self.model.config.classes
            )));
        }
        let mut logs = Vec::new();
        while self.epoch < self.config.epochs {
            let lr = cosine_lr(self.config.lr, self.epoch, self.config.epochs);
            let (train_loss, train_acc) = self.train_epoch(train)?;
            let test_metrics = test
                .map(|t| evaluate(&self.model, t, self.config.eval_batch))
                .transpose()?;
            let log = EpochLog {
                epoch: self.epoch,
                lr,
                train_loss,
                train_acc,
                test_macc: test_metrics.as_ref().map(Metrics::macc),
                test_oa: test_metrics.as_ref().map(Metrics::oa),
            };
            on_epoch(&log, self)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, Split, SynthSpec};
    use crate::network::ModelConfig;

    #[test]
    fn cosine_endpoints() {
        assert!((cosine_lr(0.01, 0, 250) - 0.01).abs() < 1e-15);
        assert!(cosine_lr(0.01, 250, 250).abs() < 1e-15);
        assert!((cosine_lr(0.01, 125, 250) - 0.005).abs() < 1e-15);
    }

    #[test]
    fn sgd_update_by_hand() {
        let mut store = ParamStore::<f32>::new();
        store.params.insert("w".into(), Tensor::from_f64([2], &[1.0, -2.0]).unwrap());
        let mut sgd = Sgd::new(0.9, 0.1);
        let g = Tensor::from_f64([2], &[0.5, 0.5]).unwrap();
        sgd.step(&mut store, [("w", &g)], 0.1).unwrap();
        // v = g + 0.1 w = [0.6, 0.3]; w = [0.94, -2.03]
        let w = store.params["w"].data();
        assert!((w[0] - 0.94).abs() < 1e-6 && (w[1] + 2.03).abs() < 1e-6);
        sgd.step(&mut store, [("w", &g)], 0.1).unwrap();
        // v = 0.9 [0.6, 0.3] + [0.594, 0.297]
        let v = sgd.velocity["w"].data();
        assert!((v[0] - 1.134).abs() < 1e-6 && (v[1] - 0.567).abs() < 1e-6);
        assert!(sgd.step(&mut store, [("x", &g)], 0.1).is_err());
    }

    #[test]
    fn csv_row_format() {
        let log = EpochLog {
            epoch: 3,
            lr: 0.01,
            train_loss: 1.5,
            train_acc: 0.25,
            test_macc: None,
            test_oa: Some(0.5),
        };
        assert_eq!(log.csv_row(), "3,0.01000000,1.500000,0.250000,,0.500000");
        assert_eq!(EpochLog::CSV_HEADER.split(',').count(), log.csv_row().split(',').count());
    }

    #[test]
    fn batches_cover_each_sample_once_and_drop_singletons() {
        let cfg = ModelConfig::micro(2);
        let t = Trainer::new(Model::new(cfg, 0).unwrap(), TrainConfig::default()).unwrap();
        let b = t.batches(33, 0);
        assert_eq!(b.len(), 2);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 32);
        assert_ne!(t.batches(33, 0), t.batches(33, 1));
        assert_eq!(t.batches(33, 4), t.batches(33, 4));
    }

    fn micro_data() -> Dataset {
        let mut spec = SynthSpec::desk(4, 3);
        spec.points = 16;
        spec.classes.truncate(2);
        synth_dataset(&spec, Split::Train).unwrap().prepare(16, 0).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_updates_state() {
        let data = micro_data();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        let run = || {
            let mut t = Trainer::new(Model::new(ModelConfig::micro(2), 5).unwrap(), cfg.clone()).unwrap();
            let logs = t.run(&data, Some(&data), |_, _| Ok(())).unwrap();
            (t, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.epoch, 2);
        assert_eq!(la[0].lr, 0.01);
        let fresh = Model::<f32>::new(ModelConfig::micro(2), 5).unwrap();
        assert_ne!(fresh.store.buffers, a.model.store.buffers);
        assert_eq!(a.sgd.velocity.len(), fresh.store.params.len());
    }

    #[test]
    fn divergence_is_reported() {
        let data = micro_data();
        let mut model = Model::<f32>::new(ModelConfig::micro(2), 0).unwrap();
        model.store.params.get_mut("out.b").unwrap().data_mut()[0] = f32::NAN;
        let mut t = Trainer::new(model, TrainConfig::default()).unwrap();
        assert!(matches!(t.train_epoch(&data), Err(Error::Diverged { epoch: 1, .. })));
    }
}
