use shelfpick_core::dataset::{generate_records, DatasetConfig, TrainingRecord};
use shelfpick_core::sim::SimConfig;
use shelfpick_neural::train::{class_weights, mean_loss};
use shelfpick_neural::{train, LearnedPredictor, Model, ModelSpec, TrainConfig};

fn records(scenes: usize, resolution: usize, seed: u64) -> Vec<TrainingRecord> {
    let cfg = DatasetConfig { scenes, resolution, master_seed: seed, ..DatasetConfig::default() };
    generate_records(&cfg, &SimConfig::default(), |_| {}).unwrap()
}

fn small_spec() -> ModelSpec {
    ModelSpec {
        resolution: 32,
        depth_widths: vec![4, 8, 8, 16],
        mask_widths: vec![2, 4, 4, 8, 8],
        decoder_widths: vec![8, 8, 4, 4],
        skip_taps: vec![true; 4],
    }
}

#[test]
fn overfits_ten_records() {
    let data = records(10, 64, 3);
    let config = TrainConfig { epochs: 200, ..TrainConfig::default() };
    let ckpt = train::<f32>(&data, &[], ModelSpec::default(), &config, |_| {}).unwrap();
    let log = &ckpt.log;
    assert!(log.epochs.iter().all(|e| e.mean_loss.is_finite()));
    let last = log.final_loss().unwrap();
    assert!(last < 0.1 * log.initial_loss, "{} -> {last}", log.initial_loss);
    assert_eq!(log.epochs[30].lr, 1e-5);
    // The logged per-epoch mean tracks the parameters after training too.
    let model: Model<f32> = ckpt.model().unwrap();
    let w: Vec<f32> = log.class_weights.iter().map(|&w| w as f32).collect();
    assert!(mean_loss(&model, &data, &w).unwrap() < 0.1 * log.initial_loss);
}

#[test]
fn training_is_bit_deterministic() {
    let data = records(6, 32, 8);
    let (train_set, val) = data.split_at(5);
    let config = TrainConfig { epochs: 3, seed: 4, ..TrainConfig::default() };
    let a = train::<f32>(train_set, val, small_spec(), &config, |_| {}).unwrap();
    let b = train::<f32>(train_set, val, small_spec(), &config, |_| {}).unwrap();
    assert_eq!(a.encode(), b.encode());
    assert_eq!(a.log.epochs.len(), 3);
    assert!(a.log.epochs.iter().all(|e| e.val_c_iou.is_some()));
    let c = train::<f32>(train_set, val, small_spec(), &TrainConfig { seed: 5, ..config.clone() }, |_| {}).unwrap();
    assert_ne!(a.params, c.params);
    assert!(LearnedPredictor::from_checkpoint(&a).is_ok());
}

#[test]
fn batches_average_gradients() {
    let data = records(4, 32, 9);
    let config = TrainConfig { epochs: 2, batch_size: 3, ..TrainConfig::default() };
    let ckpt = train::<f32>(&data, &[], small_spec(), &config, |_| {}).unwrap();
    assert!(ckpt.log.epochs.iter().all(|e| e.mean_loss.is_finite() && e.val_c_iou.is_none()));
}

#[test]
fn class_weights_follow_inverse_frequency() {
    let data = records(5, 32, 1);
    let w = class_weights(&data, 10.0);
    let mut counts = [0usize; 4];
    for r in &data {
        for (c, n) in counts.iter_mut().zip(r.label.class_counts()) {
            *c += n;
        }
    }
    let total: usize = counts.iter().sum();
    for k in 0..4 {
        let expect = if counts[k] == 0 { 10.0 } else { (total as f64 / (4.0 * counts[k] as f64)).min(10.0) };
        assert_eq!(w[k], expect);
    }
    // Background dominates, so its weight is the smallest.
    assert!(w[3] < w[0] && w[3] < 1.0);
}

#[test]
fn empty_training_set_is_rejected() {
    assert!(train::<f32>(&[], &[], small_spec(), &TrainConfig::default(), |_| {}).is_err());
}
