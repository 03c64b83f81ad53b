//! Per-sample Adam training with a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use shelfpick_core::dataset::TrainingRecord;
use shelfpick_core::eval::benchmark_predictor;
use shelfpick_core::image::Class;

use crate::adam::{adam_step, AdamParams, AdamState};
use crate::checkpoint::{Checkpoint, EpochLog, TrainLog};
use crate::gemm::Gemm;
use crate::graph::Graph;
use crate::model::{mask_tensor, normalize_depth, Model, ModelSpec, CLASSES};
use crate::ops::softmax_xent;
use crate::predictor::LearnedPredictor;
use crate::tensor::Tensor;
use crate::NeuralError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs after this one use `lr_late`.
    pub lr_drop_after: usize,
    pub lr_late: f64,
    pub adam: AdamParams,
    /// Fixed per-class loss weights in E, S, C, B order; computed from the
    /// training labels when absent.
    pub class_weights: Option<[f64; 4]>,
    pub class_weight_cap: f64,
    pub seed: u64,
    /// Probability threshold for the validation collapse IoU.
    pub val_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 1,
            lr: 1e-4,
            lr_drop_after: 30,
            lr_late: 1e-5,
            adam: AdamParams::default(),
            class_weights: None,
            class_weight_cap: 10.0,
            seed: 0,
            val_threshold: 0.4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NeuralError> {
        let bad = |m: &str| Err(NeuralError::InvalidSpec(m.into()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return bad("learning rates must be positive");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().all(|&v| v == 0.0) {
                return bad("class weights must be finite, nonnegative and not all zero");
            }
        }
        Ok(())
    }

    /// Learning rate for 1-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_drop_after {
            self.lr
        } else {
            self.lr_late
        }
    }
}

/// Inverse pixel frequency `N / (4·n_c)`, capped; absent classes get the cap.
pub fn class_weights(records: &[TrainingRecord], cap: f64) -> [f64; 4] {
    let mut counts = [0usize; 4];
    for r in records {
        for (c, n) in counts.iter_mut().zip(r.label.class_counts()) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    counts.map(|n| {
        if n == 0 {
            cap
        } else {
            (total as f64 / (CLASSES as f64 * n as f64)).min(cap)
        }
    })
}

fn labels(r: &TrainingRecord) -> Vec<u8> {
    r.label.data.iter().map(|&c: &Class| c.code()).collect()
}

fn inputs<T: Gemm>(r: &TrainingRecord) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    (normalize_depth(&r.depth), mask_tensor(&r.mask_extract), mask_tensor(&r.mask_support))
}

/// Loss of one record and, if asked, its parameter gradients.
pub fn sample_loss<T: Gemm>(
    model: &Model<T>,
    record: &TrainingRecord,
    weights: &[T],
    with_grad: bool,
) -> Result<(T, Option<Vec<Tensor<T>>>), NeuralError> {
    let mut graph = Graph::new(&model.params);
    let (d, e, s) = inputs(record);
    let out = model.forward_graph(&mut graph, d, e, s)?;
    let (loss, dlogits) = softmax_xent(graph.value(out), &labels(record), weights)?;
    let grads = if with_grad { Some(graph.backward(out, dlogits)?) } else { None };
    Ok((loss, grads))
}

/// Mean loss over `records` without updating anything.
pub fn mean_loss<T: Gemm>(model: &Model<T>, records: &[TrainingRecord], weights: &[T]) -> Result<f64, NeuralError> {
    let mut sum = 0.0;
    for r in records {
        sum += sample_loss(model, r, weights, false)?.0.as_f64();
    }
    Ok(sum / records.len().max(1) as f64)
}

/// Pooled collapse IoU of `model` on `records`.
pub fn collapse_iou<T: Gemm>(model: &Model<T>, records: &[TrainingRecord], threshold: f64) -> Result<f64, NeuralError> {
    let predictor = LearnedPredictor::new(Checkpoint::from_model(model, TrainLog::default()).model()?);
    let report = benchmark_predictor(&predictor, records, threshold, records.len())
        .map_err(|e| NeuralError::ShapeMismatch(e.to_string()))?;
    Ok(report.pooled.iou)
}

/// Trains a freshly initialized `spec` network. `progress` sees every
/// finished epoch.
pub fn train<T: Gemm>(
    train_set: &[TrainingRecord],
    val_set: &[TrainingRecord],
    spec: ModelSpec,
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<Checkpoint, NeuralError> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(NeuralError::InvalidSpec("empty training set".into()));
    }
    let mut model = Model::<T>::new(spec, config.seed)?;
    let class_weights = config
        .class_weights
        .unwrap_or_else(|| class_weights(train_set, config.class_weight_cap));
    let weights: Vec<T> = class_weights.iter().map(|&w| T::lit(w)).collect();
    let mut log = TrainLog {
        initial_loss: mean_loss(&model, train_set, &weights)?,
        class_weights,
        epochs: Vec::with_capacity(config.epochs),
    };
    let mut state = AdamState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x0bad_5eed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let scale = T::one() / T::lit(config.batch_size as f64);
    for epoch in 1..=config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let mut acc: Option<Vec<Tensor<T>>> = None;
            for &i in batch {
                let (loss, grads) = sample_loss(&model, &train_set[i], &weights, true)?;
                if !loss.is_finite() {
                    return Err(NeuralError::NonFinite { epoch, step });
                }
                sum += loss.as_f64();
                let grads = grads.expect("requested");
                match &mut acc {
                    Some(a) => a.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("nonempty batch");
            if config.batch_size > 1 {
                grads.iter_mut().flat_map(|g| g.data.iter_mut()).for_each(|v| *v *= scale);
            }
            adam_step(&mut model.params, &grads, &mut state, lr, config.adam)?;
        }
        let val_c_iou = if val_set.is_empty() {
            None
        } else {
            Some(collapse_iou(&model, val_set, config.val_threshold)?)
        };
        let entry = EpochLog { epoch, lr, mean_loss: sum / train_set.len() as f64, val_c_iou };
        progress(&entry);
        log.epochs.push(entry);
    }
    Ok(Checkpoint::from_model(&model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn learning_rate_steps_down_after_epoch_30() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(1), 1e-4);
        assert_eq!(c.lr_at(30), 1e-4);
        assert_eq!(c.lr_at(31), 1e-5);
        assert_eq!(c.lr_at(50), 1e-5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for c in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { lr: 0.0, ..Default::default() },
            TrainConfig { lr_late: -1e-5, ..Default::default() },
            TrainConfig { class_weights: Some([0.0; 4]), ..Default::default() },
        ] {
            assert!(c.validate().is_err());
        }
    }
}
