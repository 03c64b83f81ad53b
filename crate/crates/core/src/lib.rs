//! Shelf scenes of piled boxes: physics, rendering, segmentation, training
//! data, risk-based action planning and evaluation.
//!
//! Geometry and dynamics are generic over [`math::Real`]; the aliases below
//! fix the precision used by the rest of the workspace.

pub mod dataset;
pub mod eval;
pub mod image;
pub mod math;
pub mod perception;
pub mod planner;
pub mod render;
pub mod sim;

pub type Vec3 = math::Vec3<f64>;
pub type Quat = math::Quat<f64>;
pub type Mat3 = math::Mat3<f64>;
/// Simulation world in double precision, as used for all ground truth.
pub type World = sim::World<f64>;
pub type World32 = sim::World<f32>;
pub type OrientedBox = sim::OrientedBox<f64>;
