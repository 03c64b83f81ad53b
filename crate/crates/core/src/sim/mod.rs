//! Deterministic rigid-box world: pile generation, settling and kinematic
//! extraction with an optional frozen support object.
//!
//! Frame convention used throughout the crate: `x` runs across the shelf
//! (left to right as seen by the camera), `y` is up, and `z` points out of the
//! shelf toward the camera. The shelf interior spans
//! `x ∈ [-w/2, w/2]`, `y ∈ [0, h]`, `z ∈ [-d, 0]`; the front plane `z = 0` is
//! open.

mod collide;
mod extraction;
mod pile;
mod scene_io;
mod world;

pub use collide::{collide, ContactPoint, Manifold, OrientedBox};
pub use extraction::{settle, simulate_extraction, SettleReport};
pub use pile::{generate_pile_scene, generate_scene, sample_object_set, PileConfig, ShapeRanges};
pub use scene_io::{scene_from_json, scene_to_json};
pub use world::{Body, BodyKind, World};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{Quat, Vec3};

/// Object identifier inside one scene; 255 is reserved by the renderer.
pub type ObjectId = u8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("could not place object {index} after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("object {0} does not exist in the scene")]
    InvalidId(ObjectId),
    #[error("extract and support must be different objects (both {0})")]
    SameIdForExtractAndSupport(ObjectId),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("scene JSON: {0}")]
    Json(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSet {
    /// Identical 20 × 100 × 100 mm boxes (H × W × D).
    Uniform,
    /// Boxes with H ∈ [27, 40], W ∈ [85, 130], D ∈ [80, 160] mm.
    Varied,
}

impl std::str::FromStr for ObjectSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "varied" => Ok(Self::Varied),
            other => Err(format!("unknown object set `{other}` (expected uniform|varied)")),
        }
    }
}

/// Box given by its half extents along (x, y, z) = (width, height, depth).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxShape {
    pub half_extents: Vec3<f64>,
}

impl BoxShape {
    /// Box of full dimensions height × width × depth in meters.
    pub fn from_hwd(height: f64, width: f64, depth: f64) -> Self {
        Self {
            half_extents: Vec3::new(width / 2.0, height / 2.0, depth / 2.0),
        }
    }

    pub fn volume(&self) -> f64 {
        let h = self.half_extents;
        8.0 * h.x * h.y * h.z
    }

    /// Principal moments of inertia of a solid box of mass `mass`.
    pub fn principal_inertia(&self, mass: f64) -> Vec3<f64> {
        let h = self.half_extents;
        Vec3::new(
            mass / 3.0 * (h.y * h.y + h.z * h.z),
            mass / 3.0 * (h.x * h.x + h.z * h.z),
            mass / 3.0 * (h.x * h.x + h.y * h.y),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialParams {
    pub static_friction: f64,
    pub dynamic_friction: f64,
    pub restitution: f64,
    /// kg/m³
    pub density: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            static_friction: 0.9,
            dynamic_friction: 0.8,
            restitution: 0.1,
            density: 1000.0,
        }
    }
}

impl MaterialParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.dynamic_friction >= 0.0
            && self.dynamic_friction <= self.static_friction
            && (0.0..=1.0).contains(&self.restitution)
            && self.density > 0.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!("bad material {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigidState {
    pub position: Vec3<f64>,
    pub orientation: Quat<f64>,
    pub linear_velocity: Vec3<f64>,
    pub angular_velocity: Vec3<f64>,
    pub mass: f64,
    /// Principal moments in the box frame; the box is its own principal frame.
    pub inertia: Vec3<f64>,
}

impl RigidState {
    /// State at rest for `shape` made of `material`.
    pub fn at_rest(shape: &BoxShape, material: &MaterialParams, position: Vec3<f64>, orientation: Quat<f64>) -> Self {
        let mass = material.density * shape.volume();
        Self {
            position,
            orientation,
            linear_velocity: Vec3::zero(),
            angular_velocity: Vec3::zero(),
            mass,
            inertia: shape.principal_inertia(mass),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShelfSpec {
    pub width: f64,
    pub height: f64,
    pub depth: f64,
    pub wall_thickness: f64,
}

impl Default for ShelfSpec {
    fn default() -> Self {
        Self {
            width: 0.45,
            height: 0.30,
            depth: 0.30,
            wall_thickness: 0.01,
        }
    }
}

impl ShelfSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.width > 0.0 && self.height > 0.0 && self.depth > 0.0 && self.wall_thickness > 0.0 {
            Ok(())
        } else {
            Err(SimError::InvalidConfig(format!("bad shelf {self:?}")))
        }
    }

    /// Interior bounds `(min, max)`.
    pub fn interior(&self) -> (Vec3<f64>, Vec3<f64>) {
        (
            Vec3::new(-self.width / 2.0, 0.0, -self.depth),
            Vec3::new(self.width / 2.0, self.height, 0.0),
        )
    }

    /// Wall boxes as (center, half extents): floor, ceiling, left, right, back.
    pub fn walls(&self) -> [(Vec3<f64>, Vec3<f64>); 5] {
        let (w, h, d, t) = (self.width, self.height, self.depth, self.wall_thickness);
        let hw = w / 2.0 + t;
        let zc = -(d + t) / 2.0;
        let hz = (d + t) / 2.0;
        [
            (Vec3::new(0.0, -t / 2.0, zc), Vec3::new(hw, t / 2.0, hz)),
            (Vec3::new(0.0, h + t / 2.0, zc), Vec3::new(hw, t / 2.0, hz)),
            (Vec3::new(-w / 2.0 - t / 2.0, h / 2.0, zc), Vec3::new(t / 2.0, h / 2.0, hz)),
            (Vec3::new(w / 2.0 + t / 2.0, h / 2.0, zc), Vec3::new(t / 2.0, h / 2.0, hz)),
            (Vec3::new(0.0, h / 2.0, -d - t / 2.0), Vec3::new(w / 2.0, h / 2.0, t / 2.0)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: ObjectId,
    pub shape: BoxShape,
    pub state: RigidState,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub shelf: ShelfSpec,
    pub objects: Vec<SceneObject>,
    pub seed: u64,
    pub object_set: ObjectSet,
}

impl Scene {
    pub fn object(&self, id: ObjectId) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn ids(&self) -> Vec<ObjectId> {
        self.objects.iter().map(|o| o.id).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub gravity: f64,
    pub solver_iterations: usize,
    pub position_iterations: usize,
    /// ε_v, m/s
    pub settle_linear_speed: f64,
    /// ε_ω, rad/s
    pub settle_angular_speed: f64,
    pub settle_hold_time: f64,
    pub max_settle_time: f64,
    pub extraction_speed: f64,
    pub clearance_margin: f64,
    /// τ_t, meters
    pub collapse_translation: f64,
    /// τ_r, radians
    pub collapse_rotation: f64,
    /// Contacts are generated below this separation.
    pub contact_margin: f64,
    /// Penetration left uncorrected.
    pub penetration_slop: f64,
    pub position_correction: f64,
    /// Approach speed below which restitution is ignored.
    pub restitution_threshold: f64,
    /// Relative tangential speed below which static friction applies.
    pub static_friction_speed: f64,
    pub angular_damping: f64,
    pub material: MaterialParams,
    pub pile: PileConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 240.0,
            gravity: 9.81,
            solver_iterations: 16,
            position_iterations: 4,
            settle_linear_speed: 1e-3,
            settle_angular_speed: 0.01,
            settle_hold_time: 0.25,
            max_settle_time: 5.0,
            extraction_speed: 0.1,
            clearance_margin: 0.05,
            collapse_translation: 0.005,
            collapse_rotation: 3f64.to_radians(),
            contact_margin: 1e-3,
            penetration_slop: 5e-4,
            position_correction: 0.3,
            restitution_threshold: 0.2,
            static_friction_speed: 0.01,
            angular_damping: 0.05,
            material: MaterialParams::default(),
            pile: PileConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("dt", self.dt),
            ("settle_linear_speed", self.settle_linear_speed),
            ("settle_angular_speed", self.settle_angular_speed),
            ("settle_hold_time", self.settle_hold_time),
            ("max_settle_time", self.max_settle_time),
            ("extraction_speed", self.extraction_speed),
            ("collapse_translation", self.collapse_translation),
            ("collapse_rotation", self.collapse_rotation),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(SimError::InvalidConfig(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.solver_iterations == 0 {
            return Err(SimError::InvalidConfig("solver_iterations must be ≥ 1".into()));
        }
        self.material.validate()
    }

    pub(crate) fn steps_for(&self, seconds: f64) -> usize {
        (seconds / self.dt).round() as usize
    }
}

/// Per-object pose change between two snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Displacement {
    pub id: ObjectId,
    pub translation: f64,
    pub rotation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractionOutcome {
    pub extract_id: ObjectId,
    pub support_id: Option<ObjectId>,
    /// Sorted ascending.
    pub collapsed_ids: Vec<ObjectId>,
    /// Objects still on the shelf after the episode; excludes the extracted
    /// object and anything that fell out.
    pub final_scene: Scene,
    /// Where the extracted object was when it was taken away.
    pub extract_final_position: Vec3<f64>,
    pub displacements: Vec<Displacement>,
}

impl ExtractionOutcome {
    pub fn collapse_free(&self) -> bool {
        self.collapsed_ids.is_empty()
    }
}
