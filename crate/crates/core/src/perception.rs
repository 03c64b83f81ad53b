//! Object candidate discovery on depth images by region growing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{DepthImage, Grid, InstanceImage, MaskImage, BACKGROUND_ID};
use crate::render::CameraSpec;
use crate::sim::ObjectId;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("mask has no set pixels")]
    EmptyMask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentationParams {
    /// τ_d, meters
    pub depth_threshold: f64,
    /// τ_n, radians
    pub normal_threshold: f64,
    pub min_cluster_size: usize,
    /// τ_w, meters
    pub wall_tolerance: f64,
    /// Pixel pitch (x, y) in meters, used for surface normals.
    pub pixel_size: [f64; 2],
    /// Back-wall distance; the image maximum when absent.
    pub background_depth: Option<f64>,
}

impl Default for SegmentationParams {
    fn default() -> Self {
        Self::for_camera(&CameraSpec::default())
    }
}

impl SegmentationParams {
    /// Defaults for `camera`, with the minimum cluster size of 30 px at 256²
    /// scaled by pixel count.
    pub fn for_camera(camera: &CameraSpec) -> Self {
        let area = (camera.width * camera.height) as f64 / (256.0 * 256.0);
        let (sx, sy) = camera.pixel_size();
        Self {
            depth_threshold: 0.010,
            normal_threshold: 20f64.to_radians(),
            min_cluster_size: (30.0 * area).ceil().max(1.0) as usize,
            wall_tolerance: 0.005,
            pixel_size: [sx, sy],
            background_depth: Some(camera.far),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = self.depth_threshold > 0.0
            && self.normal_threshold > 0.0
            && self.min_cluster_size > 0
            && self.wall_tolerance > 0.0
            && self.pixel_size.iter().all(|&p| p > 0.0);
        if ok {
            Ok(())
        } else {
            Err(format!("segmentation parameters must be positive: {self:?}"))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationResult {
    pub clusters: Vec<MaskImage>,
}

impl SegmentationResult {
    pub fn count(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster index per pixel, `None` outside every cluster.
    pub fn cluster_map(&self) -> Option<Grid<Option<usize>>> {
        let first = self.clusters.first()?;
        let mut map = Grid::new(first.width, first.height, None);
        for (k, m) in self.clusters.iter().enumerate() {
            for (i, &v) in m.data.iter().enumerate() {
                if v != 0 {
                    map.data[i] = Some(k);
                }
            }
        }
        Some(map)
    }
}

/// Unit surface normal per pixel. Each axis uses whichever one-sided
/// difference toward a foreground neighbor is smaller in magnitude, so pixels
/// on a face rim keep the face normal.
fn normals(depth: &DepthImage, fg: &[bool], pitch: [f64; 2]) -> Vec<[f64; 3]> {
    let (w, h) = (depth.width, depth.height);
    let d = |i: usize| f64::from(depth.data[i]);
    let slope = |i: usize, a: Option<usize>, b: Option<usize>, step: f64| -> f64 {
        let fwd = b.filter(|&j| fg[j]).map(|j| d(j) - d(i));
        let back = a.filter(|&j| fg[j]).map(|j| d(i) - d(j));
        match (back, fwd) {
            (Some(x), Some(y)) => (if x.abs() <= y.abs() { x } else { y }) / step,
            (Some(x), None) | (None, Some(x)) => x / step,
            (None, None) => 0.0,
        }
    };
    (0..w * h)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let gx = slope(i, (c > 0).then(|| i - 1), (c + 1 < w).then(|| i + 1), pitch[0]);
            // Rows grow downward while y grows upward.
            let gy = -slope(i, (r > 0).then(|| i - w), (r + 1 < h).then(|| i + w), pitch[1]);
            // Depth grows away from the camera, so the surface is z = -depth.
            let n = [gx, gy, 1.0];
            let len = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            [n[0] / len, n[1] / len, n[2] / len]
        })
        .collect()
}

/// Groups foreground pixels into clusters by 4-connected breadth-first
/// growth from raster-order seeds.
pub fn segment_region_growing(depth: &DepthImage, params: &SegmentationParams) -> SegmentationResult {
    let (w, h) = (depth.width, depth.height);
    let wall = params
        .background_depth
        .unwrap_or_else(|| depth.data.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64);
    let fg: Vec<bool> = depth
        .data
        .iter()
        .map(|&v| f64::from(v) < wall - params.wall_tolerance)
        .collect();
    let n = normals(depth, &fg, params.pixel_size);
    let cos_limit = params.normal_threshold.cos();

    let mut visited = vec![false; w * h];
    let mut clusters = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..w * h {
        if !fg[seed] || visited[seed] {
            continue;
        }
        visited[seed] = true;
        queue.push_back(seed);
        let mut members = Vec::new();
        while let Some(i) = queue.pop_front() {
            members.push(i);
            let (r, c) = (i / w, i % w);
            let neighbors = [
                (r > 0).then(|| i - w),
                (r + 1 < h).then(|| i + w),
                (c > 0).then(|| i - 1),
                (c + 1 < w).then(|| i + 1),
            ];
            for j in neighbors.into_iter().flatten() {
                if visited[j] || !fg[j] {
                    continue;
                }
                let dd = (f64::from(depth.data[j]) - f64::from(depth.data[i])).abs();
                let cos = n[i][0] * n[j][0] + n[i][1] * n[j][1] + n[i][2] * n[j][2];
                if dd < params.depth_threshold && cos > cos_limit {
                    visited[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if members.len() >= params.min_cluster_size {
            let mut mask = Grid::new(w, h, 0u8);
            for i in members {
                mask.data[i] = 1;
            }
            clusters.push(mask);
        }
    }
    SegmentationResult { clusters }
}

/// Mean (row, col) of the set pixels.
pub fn mask_centroid(mask: &MaskImage) -> Result<(f64, f64), PerceptionError> {
    let (mut sr, mut sc, mut n) = (0.0, 0.0, 0usize);
    for (i, &v) in mask.data.iter().enumerate() {
        if v != 0 {
            sr += (i / mask.width) as f64;
            sc += (i % mask.width) as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(PerceptionError::EmptyMask);
    }
    Ok((sr / n as f64, sc / n as f64))
}

pub fn mask_iou(a: &MaskImage, b: &MaskImage) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        inter += usize::from(x != 0 && y != 0);
        union += usize::from(x != 0 || y != 0);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Object id whose instance region overlaps the cluster most, or `None` when
/// that overlap's IoU is under 0.3. Ties go to the lower id.
pub fn match_clusters_to_objects(segmentation: &SegmentationResult, instances: &InstanceImage) -> Vec<Option<ObjectId>> {
    let mut area = [0usize; 256];
    for &v in &instances.data {
        area[v as usize] += 1;
    }
    segmentation
        .clusters
        .iter()
        .map(|cluster| {
            let mut overlap = [0usize; 256];
            let mut size = 0;
            for (&m, &id) in cluster.data.iter().zip(&instances.data) {
                if m != 0 {
                    size += 1;
                    if id != BACKGROUND_ID {
                        overlap[id as usize] += 1;
                    }
                }
            }
            let (best, &count) = overlap.iter().enumerate().rev().max_by_key(|(_, &c)| c)?;
            if count == 0 {
                return None;
            }
            let iou = count as f64 / (size + area[best] - count) as f64;
            (iou >= 0.3).then_some(best as ObjectId)
        })
        .collect()
}
