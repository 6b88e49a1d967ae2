//! Mini-batch training loop shared by every model kind.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tensor};
use crate::Label;

/// Per-sample gradients are summed in this many contiguous groups, each in
/// index order, and the group sums are added in group order. The result is
/// the same whatever the thread count.
pub const ACCUMULATION_GROUPS: usize = 4;

const INIT_STREAM: u64 = 0x1417;
const SHUFFLE_STREAM: u64 = 0x5F0F;
const DROPOUT_STREAM: u64 = 0xD50F;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after the first epoch whose training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
            stop_at_train_accuracy: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the predictions made during the epoch's forward passes.
    pub train_accuracy: f64,
}

/// One training example: pixels scaled to `[0, 1]` and the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub pixels: Vec<f64>,
    pub label: Label,
}

struct GroupSum {
    loss: f64,
    correct: usize,
    grads: Vec<Tensor>,
}

fn diverged(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            batch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

fn batch_gradients(
    model: &Model,
    data: &[Example],
    batch: &[usize],
    dropout_seeds: &[u64],
    epoch: usize,
    batch_index: usize,
) -> Result<GroupSum> {
    let group_len = batch.len().div_ceil(ACCUMULATION_GROUPS).max(1);
    let groups: Vec<Result<GroupSum>> = batch
        .par_chunks(group_len)
        .zip(dropout_seeds.par_chunks(group_len))
        .map(|(idx, seeds)| {
            let mut acc: Option<GroupSum> = None;
            for (&i, &seed) in idx.iter().zip(seeds) {
                let ex = &data[i];
                let (loss, grads, predicted) = model
                    .loss_and_gradients(&ex.pixels, ex.label, seed)
                    .map_err(|e| diverged(epoch, batch_index, e))?;
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        batch: batch_index,
                        detail: format!("loss {loss} on example {i}"),
                    });
                }
                let correct = usize::from(predicted == ex.label);
                match &mut acc {
                    None => {
                        acc = Some(GroupSum { loss, correct, grads });
                    }
                    Some(a) => {
                        a.loss += loss;
                        a.correct += correct;
                        for (dst, src) in a.grads.iter_mut().zip(&grads) {
                            dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Ok(acc.expect("non-empty group"))
        })
        .collect();
    let mut total: Option<GroupSum> = None;
    for g in groups {
        let g = g?;
        match &mut total {
            None => total = Some(g),
            Some(t) => {
                t.loss += g.loss;
                t.correct += g.correct;
                for (dst, src) in t.grads.iter_mut().zip(&g.grads) {
                    dst.data_mut().iter_mut().zip(src.data()).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
    Ok(total.expect("non-empty batch"))
}

/// Trains `model` in place; returns one entry per completed epoch.
pub fn train(model: &mut Model, data: &[Example], cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    train_observed(model, data, cfg, &mut |_| {})
}

/// As [`train`], calling `observe` after every epoch.
pub fn train_observed(
    model: &mut Model,
    data: &[Example],
    cfg: &TrainConfig,
    observe: &mut dyn FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if cfg.epochs < 1 || cfg.batch_size < 1 {
        return Err(Error::invalid(
            "train_model",
            "epochs and batch size must be at least 1",
        ));
    }
    if data.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let mut state = AdamState::new(model.tensors(), cfg.adam);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 1..=cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, SHUFFLE_STREAM));
        order.shuffle(&mut rng);
        let dropout_seeds: Vec<u64> = (0..data.len())
            .map(|p| derive_seed(derive_seed(epoch_seed, DROPOUT_STREAM), p as u64))
            .collect();
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, (batch, seeds)) in order
            .chunks(cfg.batch_size)
            .zip(dropout_seeds.chunks(cfg.batch_size))
            .enumerate()
        {
            let mut sum = batch_gradients(model, data, batch, seeds, epoch, b + 1)?;
            loss_sum += sum.loss;
            correct += sum.correct;
            let scale = 1.0 / batch.len() as f64;
            for g in &mut sum.grads {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            let mut params = model.tensors_mut();
            adam_step(&mut params, &sum.grads, &mut state).map_err(|e| diverged(epoch, b + 1, e))?;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: correct as f64 / data.len() as f64,
        };
        observe(&stats);
        curve.push(stats);
        if cfg.stop_at_train_accuracy.is_some_and(|t| stats.train_accuracy >= t) {
            break;
        }
    }
    Ok(curve)
}

/// Builds the published architecture of `kind` (initialized from `cfg.seed`)
/// and trains it.
pub fn train_model(
    kind: ModelKind,
    dims: (usize, usize),
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<(Model, Vec<EpochStats>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_STREAM));
    let mut model = Model::new(kind, dims.0, dims.1, &mut rng)?;
    let curve = train(&mut model, data, cfg)?;
    Ok((model, curve))
}

/// Predictions in input order.
pub fn predict_all(model: &Model, images: &[Vec<f64>]) -> Result<Vec<Label>> {
    images.par_iter().map(|px| model.predict_unit(px)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mlp;

    fn toy() -> Vec<Example> {
        // Bright top half → drowsy, bright bottom half → alert.
        (0..24)
            .map(|i| {
                let drowsy = i % 2 == 0;
                let pixels = (0..16)
                    .map(|p| {
                        let top = p < 8;
                        let base = if top == drowsy { 0.9 } else { 0.1 };
                        base + 0.01 * ((i * 7 + p) % 5) as f64
                    })
                    .collect();
                Example {
                    pixels,
                    label: if drowsy { Label::Drowsy } else { Label::Alert },
                }
            })
            .collect()
    }

    fn mlp(seed: u64) -> Model {
        Model::Mlp(Mlp::new(4, 4, 8, 0.1, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[test]
    fn learns_a_separable_toy_problem() {
        let mut m = mlp(1);
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 8,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let curve = train(&mut m, &toy(), &cfg).unwrap();
        assert!(curve.iter().all(|s| s.mean_loss.is_finite()));
        assert!(curve.last().unwrap().mean_loss < curve[0].mean_loss);
        assert_eq!(curve.last().unwrap().train_accuracy, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 5,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (mlp(2), mlp(2));
        let ca = train(&mut a, &toy(), &cfg).unwrap();
        let cb = train(&mut b, &toy(), &cfg).unwrap();
        assert_eq!(ca, cb);
        assert_eq!(a, b);
    }

    #[test]
    fn early_stop_and_errors() {
        let mut m = mlp(3);
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 4,
            adam: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            stop_at_train_accuracy: Some(1.0),
            ..TrainConfig::default()
        };
        let curve = train(&mut m, &toy(), &cfg).unwrap();
        assert!(curve.len() < 200);
        assert!(train(&mut m, &[], &cfg).is_err());
    }

    #[test]
    fn nan_input_reports_epoch_and_batch() {
        let mut m = mlp(4);
        let mut data = toy();
        data[5].pixels[0] = f64::NAN;
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 24,
            ..TrainConfig::default()
        };
        match train(&mut m, &data, &cfg) {
            Err(Error::Diverged { epoch: 1, batch: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
    }
}
