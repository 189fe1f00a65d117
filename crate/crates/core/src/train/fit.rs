use log::{debug, info};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::optim::Optimizer;
use crate::augment::{augment_key, augment_pipeline};
use crate::data::{Bag, Layout};
use crate::error::{Error, Result};
use crate::metrics::{auc, full_report, MetricsReport};
use crate::model::{nll_loss, InstanceClassifierConfig, MilModel, ModelParams};
use crate::numerics::{Mode, Purpose, StreamKey, Tensor};

/// Per-epoch record of one training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    /// Mean bag loss over the epoch's training steps.
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `None` when the validation bags hold a single class.
    pub val_auc: Vec<Option<f64>>,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_loss(&self) -> f64 {
        self.val_loss[self.best_epoch]
    }
}

fn tensors(bag: &Bag) -> Vec<Tensor> {
    bag.patches.iter().map(|p| p.to_tensor()).collect()
}

/// Eval-mode bag probabilities, in bag order.
pub fn predict(model: &MilModel, bags: &[Bag]) -> Result<Vec<f64>> {
    bags.iter()
        .map(|b| {
            Ok(model
                .bag_probability_tensors(&tensors(b), Mode::Eval, StreamKey::new(0))?
                .0)
        })
        .collect()
}

/// Mean eval-mode negative log-likelihood over `bags`.
pub fn mean_loss(model: &MilModel, bags: &[Bag]) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::domain("no bags to score"));
    }
    let thetas = predict(model, bags)?;
    let mut total = 0.0;
    for (t, b) in thetas.iter().zip(bags) {
        total += nll_loss(*t, b.label, model.pooling.epsilon)?;
    }
    Ok(total / bags.len() as f64)
}

struct Validation {
    tensors: Vec<Vec<Tensor>>,
    labels: Vec<u8>,
}

impl Validation {
    fn score(&self, model: &MilModel) -> Result<(f64, Option<f64>)> {
        let mut thetas = Vec::with_capacity(self.tensors.len());
        let mut total = 0.0;
        for (ts, &y) in self.tensors.iter().zip(&self.labels) {
            let (theta, _) = model.bag_probability_tensors(ts, Mode::Eval, StreamKey::new(0))?;
            total += nll_loss(theta, y, model.pooling.epsilon)?;
            thetas.push(theta);
        }
        Ok((total / thetas.len() as f64, auc(&thetas, &self.labels).ok()))
    }
}

/// Trains a freshly initialized model and returns the parameters of the epoch
/// with the lowest validation loss. Stops after `patience` epochs without a
/// strict improvement.
pub fn train_fold(
    train: &[Bag],
    val: &[Bag],
    classifier: &InstanceClassifierConfig,
    layout: Layout,
    config: &TrainConfig,
) -> Result<(Checkpoint, TrainHistory)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config(format!(
            "training needs bags in both splits (got {} train, {} validation)",
            train.len(),
            val.len()
        )));
    }
    let run = StreamKey::new(config.seed);
    let mut model = MilModel::initialized(classifier.clone(), config.pooling, run)?;
    let mut optimizer = Optimizer::new(config, &model.params);
    let validation = Validation {
        tensors: val.iter().map(tensors).collect(),
        labels: val.iter().map(|b| b.label).collect(),
    };
    let fixed: Option<Vec<Vec<Tensor>>> = (!config.augment.enabled).then(|| train.iter().map(tensors).collect());

    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        val_auc: Vec::new(),
        best_epoch: 0,
    };
    let mut best: Option<ModelParams> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut run.purpose(Purpose::Shuffle).child(epoch as u64).rng());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_bags) {
            let mut grad = ModelParams::zeros(classifier);
            let mut last = (0, 0.0);
            for &i in batch {
                let bag = &train[i];
                let augmented;
                let patches = match &fixed {
                    Some(all) => &all[i],
                    None => {
                        augmented = bag
                            .patches
                            .iter()
                            .enumerate()
                            .map(|(k, p)| {
                                let key = augment_key(run, epoch, bag.id, k);
                                Ok(augment_pipeline(&p.pixels, &config.augment, key)?.to_tensor())
                            })
                            .collect::<Result<Vec<Tensor>>>()?;
                        &augmented
                    }
                };
                let key = run.purpose(Purpose::Dropout).child(epoch as u64).child(bag.id);
                let (loss, g) = model.bag_gradient_tensors(patches, bag.label, key)?;
                if !loss.is_finite() || !g.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        bag_id: bag.id,
                        loss,
                    });
                }
                grad.add_scaled(1.0 / batch.len() as f64, &g);
                epoch_loss += loss;
                last = (bag.id, loss);
            }
            optimizer.step(&mut model.params, &grad);
            if !model.params.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    bag_id: last.0,
                    loss: last.1,
                });
            }
        }
        let train_loss = epoch_loss / train.len() as f64;
        let (val_loss, val_auc) = validation.score(&model)?;
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.val_auc.push(val_auc);
        debug!("epoch {epoch}: train loss {train_loss:.5}, val loss {val_loss:.5}, val auc {val_auc:?}");

        if best.is_none() || val_loss < history.best_val_loss() {
            history.best_epoch = epoch;
            best = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                info!("early stop after epoch {epoch}; best epoch {}", history.best_epoch);
                break;
            }
        }
    }
    model.params = best.expect("at least one epoch ran");
    let checkpoint = Checkpoint {
        model,
        layout,
        train: config.clone(),
        best_epoch: history.best_epoch,
        best_val_loss: history.best_val_loss(),
    };
    Ok((checkpoint, history))
}

/// Eval-mode probabilities and metrics at `threshold`.
pub fn evaluate(checkpoint: &Checkpoint, bags: &[Bag], threshold: f64) -> Result<(Vec<f64>, MetricsReport)> {
    if bags.is_empty() {
        return Err(Error::domain("no bags to evaluate"));
    }
    let thetas = predict(&checkpoint.model, bags)?;
    let labels: Vec<u8> = bags.iter().map(|b| b.label).collect();
    let report = full_report(&thetas, &labels, threshold)?;
    Ok((thetas, report))
}
