use super::world::{BodyKind, World};
use super::{Displacement, ExtractionOutcome, ObjectId, Scene, SimConfig, SimError};
use crate::math::{Real, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SettleReport {
    pub steps: usize,
    /// False when the step budget ran out before the hold window completed.
    pub converged: bool,
}

/// Steps until every dynamic body stays below the settle speeds for the hold
/// time, or the step budget runs out.
pub fn settle<T: Real>(world: &mut World<T>) -> SettleReport {
    let cfg = world.config;
    let dt = T::lit(cfg.dt);
    let hold = cfg.steps_for(cfg.settle_hold_time).max(1);
    let max_steps = cfg.steps_for(cfg.max_settle_time);
    let (ev, ew) = (T::lit(cfg.settle_linear_speed), T::lit(cfg.settle_angular_speed));
    let mut calm = 0;
    for steps in 1..=max_steps {
        world.step(dt);
        let (v, w) = world.max_speeds();
        if v < ev && w < ew {
            calm += 1;
            if calm >= hold {
                return SettleReport { steps, converged: true };
            }
        } else {
            calm = 0;
        }
    }
    SettleReport {
        steps: max_steps,
        converged: false,
    }
}

fn inside_interior<T: Real>(world: &World<T>, idx: usize, scene: &Scene, tol: f64) -> bool {
    let (min, max) = world.bodies[idx].aabb();
    let (imin, imax) = scene.shelf.interior();
    let t = Vec3::splat(tol);
    let (min, max) = (min.cast::<f64>(), max.cast::<f64>());
    let lo = imin - t;
    let hi = imax + t;
    min.x >= lo.x && min.y >= lo.y && min.z >= lo.z && max.x <= hi.x && max.y <= hi.y && max.z <= hi.z
}

/// Scene snapshot of `world` keeping objects of `template` that are still
/// active and inside the shelf (with `tol` meters of slack).
pub(crate) fn snapshot_scene<T: Real>(world: &World<T>, template: &Scene, tol: f64) -> Scene {
    let mut out = template.clone();
    out.objects.retain_mut(|obj| {
        let Some(idx) = world.body_index(obj.id) else {
            return false;
        };
        if !inside_interior(world, idx, template, tol) {
            return false;
        }
        let b = &world.bodies[idx];
        obj.state.position = b.position.cast();
        obj.state.orientation = b.orientation.cast();
        obj.state.linear_velocity = b.linear_velocity.cast();
        obj.state.angular_velocity = b.angular_velocity.cast();
        true
    });
    out
}

pub(crate) fn all_inside<T: Real>(world: &World<T>, scene: &Scene, tol: f64) -> bool {
    world
        .bodies
        .iter()
        .enumerate()
        .filter(|(_, b)| b.object_id.is_some())
        .all(|(i, b)| b.active && inside_interior(world, i, scene, tol))
}

/// Pulls `extract_id` straight out through the open front at constant speed
/// while `support_id` (if any) is held frozen, then lets the remaining pile
/// settle and reports which other objects moved.
pub fn simulate_extraction(
    scene: &Scene,
    extract_id: ObjectId,
    support_id: Option<ObjectId>,
    config: &SimConfig,
) -> Result<ExtractionOutcome, SimError> {
    config.validate()?;
    if scene.object(extract_id).is_none() {
        return Err(SimError::InvalidId(extract_id));
    }
    if let Some(s) = support_id {
        if scene.object(s).is_none() {
            return Err(SimError::InvalidId(s));
        }
        if s == extract_id {
            return Err(SimError::SameIdForExtractAndSupport(s));
        }
    }

    let mut world: World<f64> = World::from_scene(scene, *config);
    let dt = config.dt;
    let e_idx = world.body_index(extract_id).expect("checked above");
    {
        let b = &mut world.bodies[e_idx];
        b.kind = BodyKind::Kinematic;
        b.linear_velocity = Vec3::new(0.0, 0.0, config.extraction_speed);
    }
    if let Some(s) = support_id {
        let idx = world.body_index(s).expect("checked above");
        world.bodies[idx].kind = BodyKind::Kinematic;
    }

    let front = 0.0;
    let clear_at = front + config.clearance_margin;
    let travel = scene.shelf.depth + 2.0 * world.bodies[e_idx].half_extents.norm() + config.clearance_margin;
    let max_steps = config.steps_for(travel / config.extraction_speed) + 2;
    for _ in 0..max_steps {
        if world.bodies[e_idx].aabb().0.z > clear_at {
            break;
        }
        world.step(dt);
    }
    let extract_final_position = world.bodies[e_idx].position;
    world.bodies[e_idx].active = false;
    settle(&mut world);

    let mut collapsed = Vec::new();
    let mut displacements = Vec::new();
    for obj in &scene.objects {
        let b = world
            .bodies
            .iter()
            .find(|b| b.object_id == Some(obj.id))
            .expect("every scene object has a body");
        let translation = (b.position - obj.state.position).norm();
        let rotation = b.orientation.angle_to(obj.state.orientation);
        displacements.push(Displacement {
            id: obj.id,
            translation,
            rotation,
        });
        if obj.id == extract_id || Some(obj.id) == support_id {
            continue;
        }
        let fell = !b.active;
        if fell || translation > config.collapse_translation || rotation > config.collapse_rotation {
            collapsed.push(obj.id);
        }
    }
    collapsed.sort_unstable();

    let final_scene = snapshot_scene(&world, scene, 0.01);
    Ok(ExtractionOutcome {
        extract_id,
        support_id,
        collapsed_ids: collapsed,
        final_scene,
        extract_final_position,
        displacements,
    })
}
