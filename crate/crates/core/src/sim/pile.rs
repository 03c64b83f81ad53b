use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::extraction::{all_inside, settle, snapshot_scene};
use super::world::{BodyMaterial, World};
use super::{BoxShape, ObjectId, ObjectSet, RigidState, Scene, SceneObject, ShelfSpec, SimConfig, SimError};
use crate::math::{Quat, Vec3};

/// Ranges (meters, full dimensions) boxes of a set are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRanges {
    pub height: (f64, f64),
    pub width: (f64, f64),
    pub depth: (f64, f64),
}

impl ShapeRanges {
    pub fn for_set(set: ObjectSet) -> Self {
        match set {
            ObjectSet::Uniform => Self {
                height: (0.020, 0.020),
                width: (0.100, 0.100),
                depth: (0.100, 0.100),
            },
            ObjectSet::Varied => Self {
                height: (0.027, 0.040),
                width: (0.085, 0.130),
                depth: (0.080, 0.160),
            },
        }
    }

    pub fn sample<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<BoxShape> {
        let draw = |(lo, hi): (f64, f64), rng: &mut R| lo + (hi - lo) * rng.random::<f64>();
        (0..count)
            .map(|_| {
                let h = draw(self.height, rng);
                let w = draw(self.width, rng);
                let d = draw(self.depth, rng);
                BoxShape::from_hwd(h, w, d)
            })
            .collect()
    }
}

pub fn sample_object_set<R: Rng>(set: ObjectSet, count: usize, rng: &mut R) -> Vec<BoxShape> {
    ShapeRanges::for_set(set).sample(count, rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PileConfig {
    pub max_attempts: usize,
    /// Clearance between a released box and whatever is below it.
    pub drop_gap: f64,
    /// Release yaw is drawn from `[-max_yaw, max_yaw]` radians.
    pub max_yaw: f64,
    /// Boxes are released with their back face this far (at most) from the
    /// back wall.
    pub depth_jitter: f64,
}

impl Default for PileConfig {
    fn default() -> Self {
        Self {
            max_attempts: 20,
            drop_gap: 0.005,
            max_yaw: 0.0,
            depth_jitter: 0.04,
        }
    }
}

/// Drops `shapes` one at a time at random lateral positions and yaws,
/// settling after each drop. Drops that leave anything outside the shelf are
/// undone and retried.
pub fn generate_pile_scene(
    shelf: &ShelfSpec,
    shapes: &[BoxShape],
    object_set: ObjectSet,
    seed: u64,
    config: &SimConfig,
) -> Result<Scene, SimError> {
    shelf.validate()?;
    config.validate()?;
    let pile = config.pile;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_b0c5);
    let mut scene = Scene {
        shelf: *shelf,
        objects: Vec::new(),
        seed,
        object_set,
    };
    let mut world: World<f64> = World::from_scene(&scene, *config);
    let material = BodyMaterial::from(&config.material);
    let (imin, imax) = shelf.interior();

    for (index, shape) in shapes.iter().enumerate() {
        let h = shape.half_extents;
        let mut placed = false;
        for _ in 0..pile.max_attempts {
            let yaw = if pile.max_yaw > 0.0 {
                rng.random_range(-pile.max_yaw..=pile.max_yaw)
            } else {
                0.0
            };
            let (c, s) = (yaw.cos().abs(), yaw.sin().abs());
            let hx = c * h.x + s * h.z;
            let hz = s * h.x + c * h.z;
            if 2.0 * hx > shelf.width || 2.0 * hz > shelf.depth || 2.0 * h.y > shelf.height {
                continue;
            }
            let x = rng.random_range((imin.x + hx)..=(imax.x - hx));
            let back = imin.z + hz;
            let z = (back + pile.depth_jitter * rng.random::<f64>()).min(imax.z - hz);

            let base = world
                .bodies
                .iter()
                .filter(|b| b.is_dynamic())
                .filter_map(|b| {
                    let (lo, hi) = b.aabb();
                    let overlap = lo.x < x + hx && hi.x > x - hx && lo.z < z + hz && hi.z > z - hz;
                    overlap.then_some(hi.y)
                })
                .fold(imin.y, f64::max);
            let y = base + h.y + pile.drop_gap;
            if y + h.y > imax.y {
                continue;
            }

            let obj = SceneObject {
                id: index as ObjectId,
                shape: *shape,
                state: RigidState::at_rest(
                    shape,
                    &config.material,
                    Vec3::new(x, y, z),
                    Quat::from_axis_angle(Vec3::new(0.0, 1.0, 0.0), yaw),
                ),
            };
            let saved = world.clone();
            world.add_object(&obj, material);
            scene.objects.push(obj);
            settle(&mut world);
            if all_inside(&world, &scene, 0.002) {
                placed = true;
                break;
            }
            scene.objects.pop();
            world = saved;
        }
        if !placed {
            return Err(SimError::PlacementFailed {
                index,
                attempts: pile.max_attempts,
            });
        }
    }

    let mut out = snapshot_scene(&world, &scene, 0.002);
    for obj in &mut out.objects {
        obj.state.linear_velocity = Vec3::zero();
        obj.state.angular_velocity = Vec3::zero();
    }
    Ok(out)
}

/// Samples `count` shapes of `set` and piles them, all from `seed`.
pub fn generate_scene(
    shelf: &ShelfSpec,
    set: ObjectSet,
    count: usize,
    seed: u64,
    config: &SimConfig,
) -> Result<Scene, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = sample_object_set(set, count, &mut rng);
    generate_pile_scene(shelf, &shapes, set, seed, config)
}
