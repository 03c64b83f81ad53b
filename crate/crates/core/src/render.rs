//! Orthographic front-view ray casting of scenes into depth and instance
//! images, plus the binary masks and four-class labels derived from them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Class, DepthImage, Grid, InstanceImage, LabelImage, MaskImage, BACKGROUND_ID};
use crate::math::{Mat3, Vec3};
use crate::sim::{ExtractionOutcome, ObjectId, Scene, ShelfSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RenderError {
    #[error("object {0} is not visible in the instance image")]
    IdNotVisible(ObjectId),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Orthographic camera looking down −z from the plane `z = camera_z`.
/// Row 0 is the top of the view, column 0 its left edge.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraSpec {
    pub width: usize,
    pub height: usize,
    /// Lower-left corner (x, y) of the view rectangle, meters.
    pub view_min: [f64; 2],
    /// Upper-right corner (x, y) of the view rectangle, meters.
    pub view_max: [f64; 2],
    pub camera_z: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self::for_shelf(&ShelfSpec::default(), 256)
    }
}

impl CameraSpec {
    /// Square image of side `resolution` framing the shelf opening exactly;
    /// `far` is the back-wall distance.
    pub fn for_shelf(shelf: &ShelfSpec, resolution: usize) -> Self {
        let camera_z = 0.2;
        Self {
            width: resolution,
            height: resolution,
            view_min: [-shelf.width / 2.0, 0.0],
            view_max: [shelf.width / 2.0, shelf.height],
            camera_z,
            near: 0.0,
            far: camera_z + shelf.depth,
        }
    }

    pub fn validate(&self, shelf: &ShelfSpec) -> Result<(), RenderError> {
        if self.width < 8 || self.height < 8 {
            return Err(RenderError::InvalidCamera(format!(
                "image must be at least 8×8, got {}×{}",
                self.width, self.height
            )));
        }
        let eps = 1e-9;
        let encloses = self.view_min[0] <= -shelf.width / 2.0 + eps
            && self.view_min[1] <= eps
            && self.view_max[0] >= shelf.width / 2.0 - eps
            && self.view_max[1] >= shelf.height - eps;
        if !encloses {
            return Err(RenderError::InvalidCamera("view rectangle must enclose the shelf opening".into()));
        }
        if !(self.near < self.far) || self.camera_z < 0.0 {
            return Err(RenderError::InvalidCamera("need near < far and camera in front of the shelf".into()));
        }
        Ok(())
    }

    /// Pixel size (x, y) in meters.
    pub fn pixel_size(&self) -> (f64, f64) {
        (
            (self.view_max[0] - self.view_min[0]) / self.width as f64,
            (self.view_max[1] - self.view_min[1]) / self.height as f64,
        )
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let (sx, sy) = self.pixel_size();
        (
            self.view_min[0] + (col as f64 + 0.5) * sx,
            self.view_max[1] - (row as f64 + 0.5) * sy,
        )
    }

    /// Inclusive-exclusive pixel ranges whose centers fall in the x/y span.
    fn pixel_span(&self, lo: Vec3<f64>, hi: Vec3<f64>) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let (sx, sy) = self.pixel_size();
        let col = |x: f64| ((x - self.view_min[0]) / sx - 0.5).clamp(-1.0, self.width as f64);
        let row = |y: f64| ((self.view_max[1] - y) / sy - 0.5).clamp(-1.0, self.height as f64);
        let c0 = col(lo.x).ceil().max(0.0) as usize;
        let c1 = (col(hi.x).floor() + 1.0).clamp(0.0, self.width as f64) as usize;
        let r0 = row(hi.y).ceil().max(0.0) as usize;
        let r1 = (row(lo.y).floor() + 1.0).clamp(0.0, self.height as f64) as usize;
        (r0..r1.max(r0), c0..c1.max(c0))
    }
}

struct Caster {
    center: Vec3<f64>,
    rot: Mat3<f64>,
    half: Vec3<f64>,
    id: u8,
}

impl Caster {
    fn new(center: Vec3<f64>, rot: Mat3<f64>, half: Vec3<f64>, id: u8) -> Self {
        Self { center, rot, half, id }
    }

    fn aabb(&self) -> (Vec3<f64>, Vec3<f64>) {
        let m = &self.rot.m;
        let h = Vec3::new(
            (0..3).map(|j| m[0][j].abs() * self.half[j]).sum(),
            (0..3).map(|j| m[1][j].abs() * self.half[j]).sum(),
            (0..3).map(|j| m[2][j].abs() * self.half[j]).sum(),
        );
        (self.center - h, self.center + h)
    }

    /// Distance along −z from `origin` to the box, if hit.
    fn cast(&self, origin: Vec3<f64>) -> Option<f64> {
        let o = self.rot.tr_mul_vec(origin - self.center);
        let d = self.rot.tr_mul_vec(Vec3::new(0.0, 0.0, -1.0));
        let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
        for i in 0..3 {
            if d[i].abs() < 1e-12 {
                if o[i].abs() > self.half[i] {
                    return None;
                }
                continue;
            }
            let a = (-self.half[i] - o[i]) / d[i];
            let b = (self.half[i] - o[i]) / d[i];
            t0 = t0.max(a.min(b));
            t1 = t1.min(a.max(b));
        }
        (t0 <= t1 && t1 >= 0.0).then(|| t0.max(0.0))
    }
}

/// Casts one ray per pixel and keeps the nearest hit among the scene objects
/// and shelf walls. Returns the depth and instance images together.
pub fn render(scene: &Scene, camera: &CameraSpec) -> (DepthImage, InstanceImage) {
    let far = camera.far;
    let mut depth = vec![far; camera.width * camera.height];
    let mut ids = vec![BACKGROUND_ID; camera.width * camera.height];

    let mut casters: Vec<Caster> = scene
        .objects
        .iter()
        .map(|o| Caster::new(o.state.position, o.state.orientation.to_matrix(), o.shape.half_extents, o.id))
        .collect();
    for (c, h) in scene.shelf.walls() {
        casters.push(Caster::new(c, Mat3::identity(), h, BACKGROUND_ID));
    }

    for caster in &casters {
        let (lo, hi) = caster.aabb();
        let (rows, cols) = camera.pixel_span(lo, hi);
        for r in rows {
            for c in cols.clone() {
                let (x, y) = camera.pixel_center(r, c);
                if let Some(t) = caster.cast(Vec3::new(x, y, camera.camera_z)) {
                    let i = r * camera.width + c;
                    if t < depth[i] {
                        depth[i] = t;
                        ids[i] = caster.id;
                    }
                }
            }
        }
    }

    let depth = depth
        .into_iter()
        .map(|d| d.clamp(camera.near, camera.far) as f32)
        .collect();
    (
        Grid::from_vec(camera.width, camera.height, depth),
        Grid::from_vec(camera.width, camera.height, ids),
    )
}

pub fn render_depth(scene: &Scene, camera: &CameraSpec) -> DepthImage {
    render(scene, camera).0
}

pub fn render_instances(scene: &Scene, camera: &CameraSpec) -> InstanceImage {
    render(scene, camera).1
}

pub fn id_mask(instances: &InstanceImage, id: ObjectId) -> MaskImage {
    instances.map(|&v| u8::from(v == id))
}

/// Extract and support masks. A missing support yields an all-zero mask.
pub fn make_masks(
    instances: &InstanceImage,
    extract_id: ObjectId,
    support_id: Option<ObjectId>,
) -> Result<(MaskImage, MaskImage), RenderError> {
    let visible = |id: ObjectId| id != BACKGROUND_ID && instances.data.contains(&id);
    if !visible(extract_id) {
        return Err(RenderError::IdNotVisible(extract_id));
    }
    let support = match support_id {
        Some(s) if !visible(s) => return Err(RenderError::IdNotVisible(s)),
        Some(s) => id_mask(instances, s),
        None => Grid::new(instances.width, instances.height, 0),
    };
    Ok((id_mask(instances, extract_id), support))
}

/// Four-class label on the pre-extraction instance image.
pub fn make_label(instances_before: &InstanceImage, outcome: &ExtractionOutcome) -> LabelImage {
    instances_before.map(|&id| {
        if id == BACKGROUND_ID {
            Class::Background
        } else if id == outcome.extract_id {
            Class::Extract
        } else if Some(id) == outcome.support_id {
            Class::Support
        } else if outcome.collapsed_ids.binary_search(&id).is_ok() {
            Class::Collapse
        } else {
            Class::Background
        }
    })
}

/// Ids visible in an instance image, ascending.
pub fn visible_ids(instances: &InstanceImage) -> Vec<ObjectId> {
    let mut seen = [false; 256];
    for &v in &instances.data {
        seen[v as usize] = true;
    }
    (0..255u8).filter(|&i| seen[i as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Quat;
    use crate::sim::{BoxShape, MaterialParams, ObjectSet, RigidState, SceneObject};

    fn boxed(id: ObjectId, hwd: (f64, f64, f64), pos: Vec3<f64>) -> SceneObject {
        let shape = BoxShape::from_hwd(hwd.0, hwd.1, hwd.2);
        SceneObject {
            id,
            shape,
            state: RigidState::at_rest(&shape, &MaterialParams::default(), pos, Quat::identity()),
        }
    }

    fn scene(objects: Vec<SceneObject>) -> Scene {
        Scene {
            shelf: ShelfSpec::default(),
            objects,
            seed: 0,
            object_set: ObjectSet::Varied,
        }
    }

    #[test]
    fn empty_shelf_is_back_wall() {
        let cam = CameraSpec::default();
        let (d, ids) = render(&scene(vec![]), &cam);
        assert!(d.data.iter().all(|&v| (f64::from(v) - 0.5).abs() < 1e-6));
        assert!(ids.data.iter().all(|&v| v == BACKGROUND_ID));
    }

    #[test]
    fn box_projects_to_analytic_rectangle() {
        let cam = CameraSpec::default();
        let pos = Vec3::new(0.031, 0.04, -0.12);
        let s = scene(vec![boxed(3, (0.08, 0.1, 0.1), pos)]);
        let (d, ids) = render(&s, &cam);
        let px = cam.pixel_size();
        // Analytic bounds in continuous pixel coordinates.
        let c_lo = (pos.x - 0.05 + 0.225) / px.0;
        let c_hi = (pos.x + 0.05 + 0.225) / px.0;
        let r_lo = (0.3 - (pos.y + 0.04)) / px.1;
        let r_hi = (0.3 - (pos.y - 0.04)) / px.1;
        let hits = ids.positions(|&v| v == 3);
        let (rmin, rmax) = (hits.iter().map(|p| p.0).min().unwrap(), hits.iter().map(|p| p.0).max().unwrap());
        let (cmin, cmax) = (hits.iter().map(|p| p.1).min().unwrap(), hits.iter().map(|p| p.1).max().unwrap());
        assert!((rmin as f64 - r_lo).abs() <= 1.0 && ((rmax + 1) as f64 - r_hi).abs() <= 1.0);
        assert!((cmin as f64 - c_lo).abs() <= 1.0 && ((cmax + 1) as f64 - c_hi).abs() <= 1.0);
        assert_eq!(hits.len(), (rmax - rmin + 1) * (cmax - cmin + 1));
        let front = cam.camera_z - (pos.z + 0.05);
        for &(r, c) in &hits {
            assert!((f64::from(*d.get(r, c)) - front).abs() < 1e-6);
        }
        // Instance pixels are exactly the pixels nearer than the back wall.
        let near = d.positions(|&v| f64::from(v) < cam.far - 1e-4);
        assert_eq!(near, hits);
    }

    #[test]
    fn nearer_box_wins_overlap() {
        let cam = CameraSpec::default();
        let s = scene(vec![
            boxed(1, (0.04, 0.1, 0.1), Vec3::new(0.0, 0.02, -0.25)),
            boxed(2, (0.04, 0.1, 0.1), Vec3::new(0.03, 0.02, -0.1)),
        ]);
        let (d, ids) = render(&s, &cam);
        let (r, c) = (250, 128 + 5);
        assert_eq!(*ids.get(r, c), 2);
        assert!((f64::from(*d.get(r, c)) - (0.2 + 0.05)).abs() < 1e-6);
        assert!(ids.count(|&v| v == 1) > 0);
    }

    #[test]
    fn disjoint_box_areas_are_proportional() {
        let cam = CameraSpec::default();
        let s = scene(vec![
            boxed(0, (0.03, 0.09, 0.1), Vec3::new(-0.12, 0.015, -0.2)),
            boxed(1, (0.06, 0.13, 0.1), Vec3::new(0.1, 0.03, -0.2)),
        ]);
        let ids = render_instances(&s, &cam);
        let ratio = ids.count(|&v| v == 1) as f64 / ids.count(|&v| v == 0) as f64;
        let analytic = (0.06 * 0.13) / (0.03 * 0.09);
        assert!((ratio / analytic - 1.0).abs() < 0.02, "{ratio} vs {analytic}");
    }

    #[test]
    fn rotated_box_matches_point_inclusion() {
        let cam = CameraSpec::for_shelf(&ShelfSpec::default(), 64);
        let mut o = boxed(4, (0.05, 0.1, 0.08), Vec3::new(0.0, 0.1, -0.15));
        o.state.orientation = Quat::from_axis_angle(Vec3::new(0.3, 1.0, 0.2).normalize(), 0.7);
        let ids = render_instances(&scene(vec![o.clone()]), &cam);
        let r = o.state.orientation.to_matrix();
        for row in 0..64 {
            for col in 0..64 {
                let (x, y) = cam.pixel_center(row, col);
                // Brute-force march along the ray.
                let hit = (0..2000).any(|k| {
                    let p = Vec3::new(x, y, 0.0 - 0.3 * k as f64 / 2000.0);
                    let l = r.tr_mul_vec(p - o.state.position);
                    (0..3).all(|i| l[i].abs() <= o.shape.half_extents[i])
                });
                if hit {
                    assert_eq!(*ids.get(row, col), 4, "pixel {row},{col}");
                }
            }
        }
    }

    #[test]
    fn masks_and_labels() {
        let cam = CameraSpec::for_shelf(&ShelfSpec::default(), 64);
        let s = scene(vec![
            boxed(0, (0.03, 0.1, 0.1), Vec3::new(-0.1, 0.015, -0.2)),
            boxed(1, (0.03, 0.1, 0.1), Vec3::new(0.1, 0.015, -0.2)),
            boxed(2, (0.03, 0.1, 0.1), Vec3::new(0.1, 0.2, -0.2)),
        ]);
        let ids = render_instances(&s, &cam);
        let (e, sp) = make_masks(&ids, 0, Some(1)).unwrap();
        assert_eq!(e.count(|&v| v == 1), ids.count(|&v| v == 0));
        assert!(e.data.iter().zip(&sp.data).all(|(a, b)| a & b == 0));
        assert_eq!(make_masks(&ids, 9, None), Err(RenderError::IdNotVisible(9)));
        assert_eq!(make_masks(&ids, 0, Some(7)), Err(RenderError::IdNotVisible(7)));
        let (_, none) = make_masks(&ids, 2, None).unwrap();
        assert_eq!(none.count(|&v| v != 0), 0);

        let outcome = ExtractionOutcome {
            extract_id: 0,
            support_id: Some(1),
            collapsed_ids: vec![2],
            final_scene: s.clone(),
            extract_final_position: Vec3::zero(),
            displacements: vec![],
        };
        let label = make_label(&ids, &outcome);
        for i in 0..label.len() {
            let expect = match ids.data[i] {
                0 => Class::Extract,
                1 => Class::Support,
                2 => Class::Collapse,
                _ => Class::Background,
            };
            assert_eq!(label.data[i], expect);
        }
        assert_eq!(visible_ids(&ids), vec![0, 1, 2]);
    }

    #[test]
    fn class_area_ratios_survive_downsampling() {
        use crate::sim::{generate_scene, SimConfig};
        let shelf = ShelfSpec::default();
        let mut totals = [[0usize; 4]; 2];
        for seed in 0..12 {
            let s = generate_scene(&shelf, ObjectSet::Varied, 6, seed, &SimConfig::default()).unwrap();
            let ids = s.ids();
            let outcome = ExtractionOutcome {
                extract_id: ids[0],
                support_id: Some(ids[1]),
                collapsed_ids: ids[2..].iter().copied().step_by(2).collect(),
                final_scene: s.clone(),
                extract_final_position: Vec3::zero(),
                displacements: vec![],
            };
            for (k, res) in [256usize, 64].into_iter().enumerate() {
                let cam = CameraSpec::for_shelf(&shelf, res);
                let counts = make_label(&render_instances(&s, &cam), &outcome).class_counts();
                for c in 0..4 {
                    totals[k][c] += counts[c] * (256 / res) * (256 / res);
                }
            }
        }
        for c in 0..4 {
            let (hi, lo) = (totals[0][c] as f64, totals[1][c] as f64);
            assert!((lo / hi - 1.0).abs() < 0.05, "class {c}: {lo} vs {hi}");
        }
    }

    #[test]
    fn camera_validation() {
        let shelf = ShelfSpec::default();
        assert!(CameraSpec::default().validate(&shelf).is_ok());
        let mut c = CameraSpec::default();
        c.width = 4;
        assert!(c.validate(&shelf).is_err());
        let mut c = CameraSpec::default();
        c.view_max[0] = 0.1;
        assert!(c.validate(&shelf).is_err());
    }
}
