//! Supervised training and evaluation of a [`ModelGraph`].

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::model::ModelGraph;
use crate::optim::{adam_step, sgd_step, AdamConfig};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    /// When set, each epoch trains on a fresh random subset of this size.
    pub max_samples: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 32, optimizer: OptimizerKind::Adam, lr: 1e-3, momentum: 0.9, max_samples: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitStats {
    pub epochs: usize,
    pub steps: usize,
    /// Mean training loss over the last epoch (NaN when no step ran).
    pub last_epoch_loss: f64,
}

/// Minibatch training with cross-entropy loss. A fresh optimizer state is
/// created for the call; all shuffling derives from `seed`.
pub fn fit(model: &mut ModelGraph, data: &LabeledImageSet, cfg: &FitConfig, seed: u64) -> Result<FitStats> {
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    for p in model.params_mut().ids().collect::<Vec<_>>() {
        let store = model.params_mut();
        let param = store.param(p);
        if param.first_moment.is_some() || param.steps > 0 {
            // Reinserting resets optimizer state and gradients.
            let (name, value) = (param.name.clone(), param.value.clone());
            store.insert(name, value);
        }
    }
    model.params_mut().zero_grad();

    let adam = AdamConfig { lr: cfg.lr, ..AdamConfig::default() };
    let mut steps = 0;
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut rng = rng::stream(seed, &[epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        if let Some(m) = cfg.max_samples {
            order.truncate(m);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, labels) = data.batch(chunk)?;
            let mut g = Graph::new();
            let loss = model.loss(&mut g, &images, &labels)?;
            let lv = g.value(loss).data()[0];
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("training loss became {lv} at epoch {epoch}")));
            }
            g.backward(loss)?.accumulate_into(model.params_mut())?;
            match cfg.optimizer {
                OptimizerKind::Adam => adam_step(model.params_mut(), &adam, true)?,
                OptimizerKind::Sgd => sgd_step(model.params_mut(), cfg.lr, cfg.momentum, true)?,
            }
            total += lv;
            batches += 1;
            steps += 1;
        }
        if batches > 0 {
            last_epoch_loss = total / batches as f64;
        }
    }
    Ok(FitStats { epochs: cfg.epochs, steps, last_epoch_loss })
}

const EVAL_BATCH: usize = 256;

/// Predicted class per sample (first maximum wins ties).
pub fn predict(model: &ModelGraph, data: &LabeledImageSet) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (images, _) = data.batch(chunk)?;
        let logits = model.logits(&images)?;
        let k = logits.shape()[1];
        for row in logits.data().chunks(k) {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

/// Classification accuracy in percent.
pub fn accuracy(model: &ModelGraph, data: &LabeledImageSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("accuracy of an empty set".into()));
    }
    let pred = predict(model, data)?;
    let correct = pred.iter().zip(data.labels()).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / data.len() as f64)
}
