use serde::{Deserialize, Serialize};

use super::{BoxShape, MaterialParams, ObjectId, ObjectSet, RigidState, Scene, SceneObject, ShelfSpec, SimError};
use crate::math::{Quat, Vec3};

#[derive(Serialize, Deserialize)]
struct SceneDoc {
    seed: u64,
    shelf: ShelfSpec,
    #[serde(default = "default_set")]
    object_set: ObjectSet,
    objects: Vec<ObjectDoc>,
}

fn default_set() -> ObjectSet {
    ObjectSet::Varied
}

#[derive(Serialize, Deserialize)]
struct ObjectDoc {
    id: ObjectId,
    half_extents_m: [f64; 3],
    position_m: [f64; 3],
    quaternion_wxyz: [f64; 4],
}

pub fn scene_to_json(scene: &Scene) -> String {
    let doc = SceneDoc {
        seed: scene.seed,
        shelf: scene.shelf,
        object_set: scene.object_set,
        objects: scene
            .objects
            .iter()
            .map(|o| {
                let q = o.state.orientation;
                ObjectDoc {
                    id: o.id,
                    half_extents_m: o.shape.half_extents.into(),
                    position_m: o.state.position.into(),
                    quaternion_wxyz: [q.w, q.x, q.y, q.z],
                }
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("scene serializes")
}

/// Parses a scene document. Objects are at rest; mass and inertia follow from
/// `material`. Quaternions are normalized unless already unit to rounding.
pub fn scene_from_json(json: &str, material: &MaterialParams) -> Result<Scene, SimError> {
    let doc: SceneDoc = serde_json::from_str(json).map_err(|e| SimError::Json(e.to_string()))?;
    doc.shelf.validate()?;
    let mut objects = Vec::with_capacity(doc.objects.len());
    for o in doc.objects {
        let shape = BoxShape {
            half_extents: Vec3::from(o.half_extents_m),
        };
        if !(shape.half_extents.x > 0.0 && shape.half_extents.y > 0.0 && shape.half_extents.z > 0.0) {
            return Err(SimError::Json(format!("object {} has non-positive half extents", o.id)));
        }
        let [w, x, y, z] = o.quaternion_wxyz;
        let mut q = Quat::new(w, x, y, z);
        let n = q.norm();
        if !(n > 0.0) {
            return Err(SimError::Json(format!("object {} has a zero quaternion", o.id)));
        }
        if (n - 1.0).abs() > 8.0 * f64::EPSILON {
            q = q.normalize();
        }
        if objects.iter().any(|p: &SceneObject| p.id == o.id) {
            return Err(SimError::Json(format!("duplicate object id {}", o.id)));
        }
        objects.push(SceneObject {
            id: o.id,
            shape,
            state: RigidState::at_rest(&shape, material, Vec3::from(o.position_m), q),
        });
    }
    Ok(Scene {
        shelf: doc.shelf,
        objects,
        seed: doc.seed,
        object_set: doc.object_set,
    })
}
