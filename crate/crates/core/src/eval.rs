//! Pixel-level collapse-region metrics and closed-loop success-rate trials.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{scene_seed, TrainingRecord};
use crate::image::{Class, LabelImage};
use crate::perception::{mask_centroid, match_clusters_to_objects, segment_region_growing, SegmentationParams};
use crate::planner::{
    attach_object_ids, classify_map, enumerate_candidates, select_action, ActionCandidate, CollapsePredictor,
    OraclePredictor, PlanMode, PlannerError,
};
use crate::render::{render, CameraSpec};
use crate::sim::{generate_scene, simulate_extraction, ObjectId, ObjectSet, Scene, ShelfSpec, SimConfig};

/// Precision, recall and IoU of the collapse class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Neither side has C pixels; the ratios are reported as 1.
    pub both_empty: bool,
}

impl PixelMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        if tp + fp + fn_ == 0 {
            return Self {
                precision: 1.0,
                recall: 1.0,
                iou: 1.0,
                both_empty: true,
                ..Default::default()
            };
        }
        Self {
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            tp,
            fp,
            fn_,
            both_empty: false,
        }
    }
}

pub fn pixel_metrics(pred: &LabelImage, gt: &LabelImage) -> PixelMetrics {
    assert!(pred.same_shape(gt), "label images differ in resolution");
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p == Class::Collapse, g == Class::Collapse) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    PixelMetrics::from_counts(tp, fp, fn_)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub records: usize,
    /// Means of the per-record metrics.
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_iou: f64,
    /// Metrics of the confusion counts summed over every record.
    pub pooled: PixelMetrics,
    pub both_empty_records: usize,
    pub per_record: Vec<PixelMetrics>,
}

/// Scores `predictor` on the first `limit` records.
pub fn benchmark_predictor(
    predictor: &dyn CollapsePredictor,
    records: &[TrainingRecord],
    threshold: f64,
    limit: usize,
) -> Result<BenchmarkReport, PlannerError> {
    let records = &records[..records.len().min(limit)];
    let mut per_record = Vec::with_capacity(records.len());
    for r in records {
        let pred = predictor.predict(&r.depth, &r.mask_extract, &r.mask_support)?;
        per_record.push(pixel_metrics(&classify_map(&pred, threshold), &r.label));
    }
    Ok(aggregate(per_record))
}

pub fn aggregate(per_record: Vec<PixelMetrics>) -> BenchmarkReport {
    let n = per_record.len();
    let mean = |f: fn(&PixelMetrics) -> f64| {
        if n == 0 {
            0.0
        } else {
            per_record.iter().map(f).sum::<f64>() / n as f64
        }
    };
    let sum = |f: fn(&PixelMetrics) -> usize| per_record.iter().map(f).sum::<usize>();
    BenchmarkReport {
        records: n,
        mean_precision: mean(|m| m.precision),
        mean_recall: mean(|m| m.recall),
        mean_iou: mean(|m| m.iou),
        pooled: PixelMetrics::from_counts(sum(|m| m.tp), sum(|m| m.fp), sum(|m| m.fn_)),
        both_empty_records: per_record.iter().filter(|m| m.both_empty).count(),
        per_record,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Safest,
    /// Extract the cluster whose centroid is nearest the image center.
    FixedTarget,
}

pub enum Policy<'a> {
    /// Simulates every candidate on the true scene.
    Oracle,
    Learned(&'a dyn CollapsePredictor),
    /// Uniformly random candidate.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub shelf: ShelfSpec,
    pub object_set: ObjectSet,
    pub object_count: usize,
    pub resolution: usize,
    pub threshold: f64,
    pub sim: SimConfig,
    pub segmentation: Option<SegmentationParams>,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            shelf: ShelfSpec::default(),
            object_set: ObjectSet::Varied,
            object_count: 6,
            resolution: 64,
            threshold: crate::planner::DEFAULT_THRESHOLD,
            sim: SimConfig::default(),
            segmentation: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub index: usize,
    pub scene_seed: u64,
    pub clusters: usize,
    pub extract_id: Option<ObjectId>,
    pub support_id: Option<ObjectId>,
    pub risk: Option<f64>,
    pub collapsed_ids: Vec<ObjectId>,
    pub success: bool,
    /// Why no action was executed, if none was.
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessStats {
    pub trials: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub records: Vec<TrialRecord>,
}

/// Index of the cluster whose centroid is nearest the image center; ties go
/// to the lower index.
pub fn center_cluster(centroids: &[(f64, f64)], width: usize, height: usize) -> Option<usize> {
    let (cr, cc) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    centroids
        .iter()
        .map(|&(r, c)| (r - cr).powi(2) + (c - cc).powi(2))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i)
}

fn run_trial(index: usize, seed: u64, config: &TrialConfig, mode: EvalMode, policy: &Policy) -> TrialRecord {
    let scene_seed = scene_seed(seed, index as u64);
    match generate_scene(&config.shelf, config.object_set, config.object_count, scene_seed, &config.sim) {
        Ok(scene) => run_episode(index, &scene, config, mode, policy),
        Err(e) => TrialRecord {
            index,
            scene_seed,
            clusters: 0,
            extract_id: None,
            support_id: None,
            risk: None,
            collapsed_ids: vec![],
            success: false,
            failure: Some(e.to_string()),
        },
    }
}

/// One perceive → plan → execute episode on `scene`.
pub fn run_episode(index: usize, scene: &Scene, config: &TrialConfig, mode: EvalMode, policy: &Policy) -> TrialRecord {
    let scene_seed = scene.seed;
    let mut record = TrialRecord {
        index,
        scene_seed,
        clusters: 0,
        extract_id: None,
        support_id: None,
        risk: None,
        collapsed_ids: vec![],
        success: false,
        failure: None,
    };
    let camera = CameraSpec::for_shelf(&config.shelf, config.resolution);
    let (depth, instances) = render(scene, &camera);
    let params = config.segmentation.unwrap_or_else(|| SegmentationParams::for_camera(&camera));
    let seg = segment_region_growing(&depth, &params);
    record.clusters = seg.count();

    let plan_mode = match mode {
        EvalMode::Safest => PlanMode::Safest,
        EvalMode::FixedTarget => {
            let centroids: Vec<_> = seg.clusters.iter().map(|m| mask_centroid(m).expect("nonempty")).collect();
            match center_cluster(&centroids, camera.width, camera.height) {
                Some(c) => PlanMode::FixedTarget(c),
                None => {
                    record.failure = Some(PlannerError::NoCandidates.to_string());
                    return record;
                }
            }
        }
    };
    let mut candidates = match enumerate_candidates(&seg, plan_mode) {
        Ok(c) => c,
        Err(e) => {
            record.failure = Some(e.to_string());
            return record;
        }
    };
    attach_object_ids(&mut candidates, &match_clusters_to_objects(&seg, &instances));
    let reachable = |c: &ActionCandidate| c.resolved();

    let chosen: Result<(ActionCandidate, Option<f64>), PlannerError> = match policy {
        Policy::Random => {
            let pool: Vec<&ActionCandidate> = candidates.iter().filter(|c| reachable(c)).collect();
            if pool.is_empty() {
                Err(PlannerError::AllUnreachable)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x7a4d_0c0f);
                Ok((pool[rng.random_range(0..pool.len())].clone(), None))
            }
        }
        Policy::Oracle => {
            let oracle = OraclePredictor::new(scene.clone(), instances.clone(), config.sim);
            select_action(&candidates, &oracle, &seg, &depth, &reachable, config.threshold)
                .map(|r| (r.selected.candidate, Some(r.selected.risk)))
        }
        Policy::Learned(p) => select_action(&candidates, *p, &seg, &depth, &reachable, config.threshold)
            .map(|r| (r.selected.candidate, Some(r.selected.risk))),
    };
    let (action, risk) = match chosen {
        Ok(x) => x,
        Err(e) => {
            record.failure = Some(e.to_string());
            return record;
        }
    };
    let extract = action.extract_id.expect("reachable candidates are resolved");
    record.extract_id = Some(extract);
    record.support_id = action.support_id;
    record.risk = risk;
    match simulate_extraction(scene, extract, action.support_id, &config.sim) {
        Ok(outcome) => {
            let removed = outcome.final_scene.object(extract).is_none();
            record.success = removed && outcome.collapsed_ids.is_empty();
            record.collapsed_ids = outcome.collapsed_ids;
        }
        Err(e) => record.failure = Some(e.to_string()),
    }
    record
}

/// Runs `n_trials` seeded episodes of generate → render → segment → plan →
/// execute. A trial succeeds iff the extract object leaves the shelf and
/// nothing else collapses.
pub fn closed_loop_eval(
    n_trials: usize,
    config: &TrialConfig,
    mode: EvalMode,
    policy: &Policy,
    seed: u64,
    mut progress: impl FnMut(usize, &TrialRecord),
) -> SuccessStats {
    let mut records = Vec::with_capacity(n_trials);
    for i in 0..n_trials {
        let r = run_trial(i, seed, config, mode, policy);
        progress(i + 1, &r);
        records.push(r);
    }
    let successes = records.iter().filter(|r| r.success).count();
    SuccessStats {
        trials: n_trials,
        successes,
        success_rate: if n_trials == 0 { 0.0 } else { successes as f64 / n_trials as f64 },
        records,
    }
}
