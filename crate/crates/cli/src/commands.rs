//! Subcommand bodies, kept apart from argument parsing so tests can call
//! them directly.

use std::path::Path;

use anyhow::{bail, Context};
use serde::Serialize;
use shelfpick_core::dataset::{
    generate_dataset, read_dataset, split, DatasetConfig, DatasetSummary, SplitSpec, TrainingRecord,
};
use shelfpick_core::eval::{benchmark_predictor, closed_loop_eval, BenchmarkReport, EvalMode, Policy, SuccessStats, TrialConfig};
use shelfpick_core::planner::{classify_map, risk_index, CollapsePredictor, PlanMode, PlanResult, RegionAreas};
use shelfpick_core::eval::pixel_metrics;
use shelfpick_neural::{train, Checkpoint, EpochLog, LearnedPredictor, TrainConfig};

use crate::config::{Config, PredictorKind};
use crate::service::AppState;

pub fn dataset_config(config: &Config, scenes: usize, pairs_per_scene: usize, seed: u64) -> DatasetConfig {
    DatasetConfig {
        scenes,
        pairs_per_scene,
        object_set: config.scene.object_set,
        object_count: config.scene.object_count,
        master_seed: seed,
        resolution: config.camera.resolution,
        shelf: config.scene.shelf,
    }
}

pub fn gen(config: &Config, scenes: usize, pairs: usize, seed: u64, out: &Path, quiet: bool) -> anyhow::Result<DatasetSummary> {
    let dc = dataset_config(config, scenes, pairs, seed);
    let summary = generate_dataset(&dc, &config.sim, out, |done| {
        if !quiet && (done % 100 == 0 || done == scenes) {
            eprintln!("scenes {done}/{scenes}");
        }
    })?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub train_records: usize,
    pub val_records: usize,
    pub initial_loss: f64,
    pub final_loss: Option<f64>,
    pub final_val_c_iou: Option<f64>,
    pub class_weights: [f64; 4],
    pub epochs: Vec<EpochLog>,
}

/// 90/10 split (train side flip-augmented), then training from scratch.
pub fn train_checkpoint(
    config: &Config,
    records: &[TrainingRecord],
    training: &TrainConfig,
    quiet: bool,
) -> anyhow::Result<(Checkpoint, TrainSummary)> {
    let (train_set, val_set) = split(records, &SplitSpec { train_fraction: 0.9, seed: training.seed });
    let ckpt = train::<f32>(&train_set, &val_set, config.model.clone(), training, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>3} lr {:.0e} loss {:.5} val C-IoU {}",
                e.epoch,
                e.lr,
                e.mean_loss,
                e.val_c_iou.map_or("-".into(), |v| format!("{v:.4}"))
            );
        }
    })?;
    let summary = TrainSummary {
        train_records: train_set.len(),
        val_records: val_set.len(),
        initial_loss: ckpt.log.initial_loss,
        final_loss: ckpt.log.final_loss(),
        final_val_c_iou: ckpt.log.epochs.last().and_then(|e| e.val_c_iou),
        class_weights: ckpt.log.class_weights,
        epochs: ckpt.log.epochs.clone(),
    };
    Ok((ckpt, summary))
}

pub fn load_predictor(path: &Path) -> anyhow::Result<LearnedPredictor> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(LearnedPredictor::from_checkpoint(&ckpt)?)
}

#[derive(Debug, Serialize)]
pub struct InferReport {
    pub record: usize,
    pub r_c: f64,
    pub areas: RegionAreas,
    pub ground_truth_r_c: f64,
    pub c_precision: f64,
    pub c_recall: f64,
    pub c_iou: f64,
}

pub fn infer(predictor: &LearnedPredictor, records: &[TrainingRecord], index: usize, threshold: f64, label_out: Option<&Path>) -> anyhow::Result<InferReport> {
    let Some(r) = records.get(index) else {
        bail!("record {index} out of range (dataset has {})", records.len());
    };
    let map = predictor.predict(&r.depth, &r.mask_extract, &r.mask_support)?;
    let label = classify_map(&map, threshold);
    if let Some(path) = label_out {
        std::fs::write(path, label.to_pgm())?;
    }
    let m = pixel_metrics(&label, &r.label);
    Ok(InferReport {
        record: index,
        r_c: risk_index(&label),
        areas: RegionAreas::of(&label),
        ground_truth_r_c: risk_index(&r.label),
        c_precision: m.precision,
        c_recall: m.recall,
        c_iou: m.iou,
    })
}

pub fn eval(predictor: &LearnedPredictor, data: &Path, threshold: f64, limit: usize) -> anyhow::Result<BenchmarkReport> {
    let records = read_dataset(data)?;
    if records.is_empty() {
        bail!("dataset {} is empty", data.display());
    }
    Ok(benchmark_predictor(predictor, &records, threshold, limit)?)
}

pub fn trial_config(config: &Config) -> TrialConfig {
    TrialConfig {
        shelf: config.scene.shelf,
        object_set: config.scene.object_set,
        object_count: config.scene.object_count,
        resolution: config.camera.resolution,
        threshold: config.planner.threshold,
        sim: config.sim,
        segmentation: Some(config.segmentation_params()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PolicyArg {
    Oracle,
    Learned,
    Random,
}

pub fn closedloop(
    config: &Config,
    trials: usize,
    mode: EvalMode,
    policy: PolicyArg,
    predictor: Option<&LearnedPredictor>,
    seed: u64,
    quiet: bool,
) -> anyhow::Result<SuccessStats> {
    if trials == 0 {
        bail!("need at least one trial");
    }
    let policy = match (policy, predictor) {
        (PolicyArg::Oracle, _) => Policy::Oracle,
        (PolicyArg::Random, _) => Policy::Random,
        (PolicyArg::Learned, Some(p)) => Policy::Learned(p),
        (PolicyArg::Learned, None) => bail!("the learned predictor needs --ckpt"),
    };
    let mut wins = 0;
    Ok(closed_loop_eval(trials, &trial_config(config), mode, &policy, seed, |done, r| {
        wins += usize::from(r.success);
        if !quiet && (done % 20 == 0 || done == trials) {
            eprintln!("trials {done}/{trials} successes {wins}");
        }
    }))
}

/// Plans on a freshly generated scene through the same path as the service.
pub fn plan(config: Config, seed: u64, mode: PlanMode, ckpt: Option<&Path>) -> anyhow::Result<PlanResult> {
    let mut state = AppState::new(config.clone());
    if config.planner.predictor == PredictorKind::Learned && config.planner.checkpoint.is_none() {
        match ckpt {
            Some(p) => state = state.with_checkpoint(p)?,
            None => bail!("the learned predictor needs --ckpt or planner.checkpoint"),
        }
    }
    let view = state.create_session(config, seed).map_err(|e| anyhow::anyhow!(e.message))?;
    state.plan_session(&view.id, mode).map_err(|e| anyhow::anyhow!(e.message))
}
