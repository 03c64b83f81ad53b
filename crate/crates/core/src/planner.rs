//! Candidate enumeration over segmented clusters, collapse-area risk scoring
//! and safest-action selection.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Class, DepthImage, Grid, InstanceImage, LabelImage, MaskImage, BACKGROUND_ID};
use crate::perception::{mask_centroid, SegmentationResult};
use crate::render::make_label;
use crate::sim::{simulate_extraction, ObjectId, Scene, SimConfig};

pub const DEFAULT_THRESHOLD: f64 = 0.4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("segmentation produced no clusters")]
    NoCandidates,
    #[error("cluster {0} does not exist")]
    UnknownCluster(usize),
    #[error("every candidate is unreachable")]
    AllUnreachable,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("predictor failed: {0}")]
    Predictor(String),
}

/// Per-pixel probabilities over (E, S, C, B).
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap {
    pub width: usize,
    pub height: usize,
    pub probs: Vec<[f32; 4]>,
}

impl PredictionMap {
    pub fn one_hot(label: &LabelImage) -> Self {
        let probs = label
            .data
            .iter()
            .map(|&c| {
                let mut p = [0.0; 4];
                p[c as usize] = 1.0;
                p
            })
            .collect();
        Self {
            width: label.width,
            height: label.height,
            probs,
        }
    }

    /// Largest deviation of any pixel's probability sum from 1, or infinity
    /// if a probability is negative or not finite.
    pub fn simplex_error(&self) -> f64 {
        self.probs
            .iter()
            .map(|p| {
                if p.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    f64::INFINITY
                } else {
                    (p.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    pub fn channel(&self, class: Class) -> Grid<f32> {
        Grid::from_vec(self.width, self.height, self.probs.iter().map(|p| p[class as usize]).collect())
    }
}

pub trait CollapsePredictor {
    fn predict(&self, depth: &DepthImage, mask_extract: &MaskImage, mask_support: &MaskImage)
        -> Result<PredictionMap, PlannerError>;
}

/// Ground-truth predictor: resolves each mask to the object it mostly covers,
/// runs the extraction and returns the one-hot label of the outcome.
pub struct OraclePredictor {
    pub scene: Scene,
    pub instances: InstanceImage,
    pub sim: SimConfig,
}

impl OraclePredictor {
    pub fn new(scene: Scene, instances: InstanceImage, sim: SimConfig) -> Self {
        Self { scene, instances, sim }
    }

    fn dominant_id(&self, mask: &MaskImage) -> Option<ObjectId> {
        let mut counts = [0usize; 256];
        for (&m, &id) in mask.data.iter().zip(&self.instances.data) {
            if m != 0 && id != BACKGROUND_ID {
                counts[id as usize] += 1;
            }
        }
        let (id, &n) = counts.iter().enumerate().rev().max_by_key(|(_, &c)| c)?;
        (n > 0).then_some(id as ObjectId)
    }
}

impl CollapsePredictor for OraclePredictor {
    fn predict(
        &self,
        depth: &DepthImage,
        mask_extract: &MaskImage,
        mask_support: &MaskImage,
    ) -> Result<PredictionMap, PlannerError> {
        if !depth.same_shape(&self.instances) || !mask_extract.same_shape(depth) || !mask_support.same_shape(depth) {
            return Err(PlannerError::ShapeMismatch("oracle inputs differ from its instance image".into()));
        }
        let extract = self
            .dominant_id(mask_extract)
            .ok_or_else(|| PlannerError::Predictor("extract mask covers no object".into()))?;
        let support = self.dominant_id(mask_support);
        if support == Some(extract) {
            // Both masks resolve to one object; the action cannot be carried
            // out, so report the whole view as collapsing.
            return Ok(PredictionMap::one_hot(&Grid::new(depth.width, depth.height, Class::Collapse)));
        }
        let outcome = simulate_extraction(&self.scene, extract, support, &self.sim)
            .map_err(|e| PlannerError::Predictor(e.to_string()))?;
        Ok(PredictionMap::one_hot(&make_label(&self.instances, &outcome)))
    }
}

/// C where P(C) ≥ `threshold`, otherwise the most likely of E, S, B with
/// ties resolved toward B, then S.
pub fn classify_map(pred: &PredictionMap, threshold: f64) -> LabelImage {
    let data = pred
        .probs
        .iter()
        .map(|p| {
            if f64::from(p[2]) >= threshold {
                Class::Collapse
            } else {
                [Class::Background, Class::Support, Class::Extract]
                    .into_iter()
                    .fold(Class::Background, |best, c| if p[c as usize] > p[best as usize] { c } else { best })
            }
        })
        .collect();
    Grid::from_vec(pred.width, pred.height, data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionAreas {
    pub extract: usize,
    pub support: usize,
    pub collapse: usize,
    pub background: usize,
}

impl RegionAreas {
    pub fn of(label: &LabelImage) -> Self {
        let [extract, support, collapse, background] = label.class_counts();
        Self {
            extract,
            support,
            collapse,
            background,
        }
    }

    pub fn total(&self) -> usize {
        self.extract + self.support + self.collapse + self.background
    }
}

/// Fraction of the image classified as collapse region.
pub fn risk_index(label: &LabelImage) -> f64 {
    let a = RegionAreas::of(label);
    a.collapse as f64 / a.total() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "extract", rename_all = "snake_case")]
pub enum PlanMode {
    Safest,
    FixedTarget(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionCandidate {
    pub extract: usize,
    pub support: Option<usize>,
    pub extract_id: Option<ObjectId>,
    pub support_id: Option<ObjectId>,
    /// Mask centroids as (row, col).
    pub extract_point: (f64, f64),
    pub support_point: Option<(f64, f64)>,
}

impl ActionCandidate {
    /// Both referenced clusters map to distinct objects.
    pub fn resolved(&self) -> bool {
        match (self.extract_id, self.support, self.support_id) {
            (None, _, _) => false,
            (Some(_), None, _) => true,
            (Some(_), Some(_), None) => false,
            (Some(e), Some(_), Some(s)) => e != s,
        }
    }
}

/// Ordered (extract, support) cluster pairs; a lone cluster yields the single
/// no-support candidate.
pub fn enumerate_candidates(segmentation: &SegmentationResult, mode: PlanMode) -> Result<Vec<ActionCandidate>, PlannerError> {
    let n = segmentation.count();
    if n == 0 {
        return Err(PlannerError::NoCandidates);
    }
    let centroids: Vec<(f64, f64)> = segmentation
        .clusters
        .iter()
        .map(|m| mask_centroid(m).expect("clusters are nonempty"))
        .collect();
    let extracts: Vec<usize> = match mode {
        PlanMode::Safest => (0..n).collect(),
        PlanMode::FixedTarget(e) if e < n => vec![e],
        PlanMode::FixedTarget(e) => return Err(PlannerError::UnknownCluster(e)),
    };
    let candidate = |e: usize, s: Option<usize>| ActionCandidate {
        extract: e,
        support: s,
        extract_id: None,
        support_id: None,
        extract_point: centroids[e],
        support_point: s.map(|s| centroids[s]),
    };
    if n == 1 {
        return Ok(vec![candidate(0, None)]);
    }
    Ok(extracts
        .into_iter()
        .flat_map(|e| (0..n).filter(move |&s| s != e).map(move |s| (e, s)))
        .map(|(e, s)| candidate(e, Some(s)))
        .collect())
}

/// Fills in object ids from a cluster → object map.
pub fn attach_object_ids(candidates: &mut [ActionCandidate], cluster_ids: &[Option<ObjectId>]) {
    for c in candidates {
        c.extract_id = cluster_ids.get(c.extract).copied().flatten();
        c.support_id = c.support.and_then(|s| cluster_ids.get(s).copied().flatten());
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub candidate: ActionCandidate,
    pub risk: f64,
    pub areas: RegionAreas,
    pub reachable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    /// Every candidate, ascending in risk.
    pub ranked: Vec<ScoredCandidate>,
    /// The first reachable entry of `ranked`.
    pub selected: ScoredCandidate,
    pub unreachable: Vec<ScoredCandidate>,
}

fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    a.risk
        .total_cmp(&b.risk)
        .then(a.candidate.extract.cmp(&b.candidate.extract))
        .then(a.candidate.support.cmp(&b.candidate.support))
}

/// Orders scored candidates and picks the best reachable one. Ties in risk
/// go to the lower extract cluster, then the lower support cluster.
pub fn rank_and_select(mut scored: Vec<ScoredCandidate>) -> Result<PlanResult, PlannerError> {
    scored.sort_by(rank_order);
    let selected = scored.iter().find(|s| s.reachable).cloned().ok_or(PlannerError::AllUnreachable)?;
    let unreachable = scored.iter().filter(|s| !s.reachable).cloned().collect();
    Ok(PlanResult {
        ranked: scored,
        selected,
        unreachable,
    })
}

/// Scores one candidate: predicted map, its classification and r_c.
pub fn score_candidate(
    candidate: &ActionCandidate,
    segmentation: &SegmentationResult,
    depth: &DepthImage,
    predictor: &dyn CollapsePredictor,
    threshold: f64,
) -> Result<(PredictionMap, LabelImage, f64), PlannerError> {
    let mask_e = segmentation
        .clusters
        .get(candidate.extract)
        .ok_or(PlannerError::UnknownCluster(candidate.extract))?;
    let empty;
    let mask_s = match candidate.support {
        Some(s) => segmentation.clusters.get(s).ok_or(PlannerError::UnknownCluster(s))?,
        None => {
            empty = Grid::new(depth.width, depth.height, 0u8);
            &empty
        }
    };
    let pred = predictor.predict(depth, mask_e, mask_s)?;
    if pred.width != depth.width || pred.height != depth.height {
        return Err(PlannerError::ShapeMismatch("prediction resolution differs from input".into()));
    }
    let label = classify_map(&pred, threshold);
    let risk = risk_index(&label);
    Ok((pred, label, risk))
}

pub fn select_action(
    candidates: &[ActionCandidate],
    predictor: &dyn CollapsePredictor,
    segmentation: &SegmentationResult,
    depth: &DepthImage,
    reachable: &dyn Fn(&ActionCandidate) -> bool,
    threshold: f64,
) -> Result<PlanResult, PlannerError> {
    if candidates.is_empty() {
        return Err(PlannerError::NoCandidates);
    }
    let scored = candidates
        .iter()
        .map(|c| {
            let (_, label, risk) = score_candidate(c, segmentation, depth, predictor, threshold)?;
            Ok(ScoredCandidate {
                candidate: c.clone(),
                risk,
                areas: RegionAreas::of(&label),
                reachable: reachable(c),
            })
        })
        .collect::<Result<Vec<_>, PlannerError>>()?;
    rank_and_select(scored)
}
