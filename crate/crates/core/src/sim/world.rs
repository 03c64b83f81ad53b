use std::collections::BTreeMap;

use super::collide::{collide, OrientedBox};
use super::{MaterialParams, ObjectId, Scene, SceneObject, SimConfig};
use crate::math::{Mat3, Quat, Real, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BodyKind {
    Dynamic,
    Static,
    /// Infinite mass, moved at its own velocity. A kinematic body with zero
    /// velocity is frozen: its pose is never touched.
    Kinematic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodyMaterial<T> {
    pub static_friction: T,
    pub dynamic_friction: T,
    pub restitution: T,
}

impl<T: Real> From<&MaterialParams> for BodyMaterial<T> {
    fn from(m: &MaterialParams) -> Self {
        Self {
            static_friction: T::lit(m.static_friction),
            dynamic_friction: T::lit(m.dynamic_friction),
            restitution: T::lit(m.restitution),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Body<T> {
    /// Scene object id; `None` for shelf walls.
    pub object_id: Option<ObjectId>,
    pub kind: BodyKind,
    pub half_extents: Vec3<T>,
    pub position: Vec3<T>,
    pub orientation: Quat<T>,
    pub linear_velocity: Vec3<T>,
    pub angular_velocity: Vec3<T>,
    pub inv_mass: T,
    pub inv_inertia: Vec3<T>,
    pub material: BodyMaterial<T>,
    /// Inactive bodies are ignored entirely (removed or fallen off the shelf).
    pub active: bool,
}

impl<T: Real> Body<T> {
    pub fn is_dynamic(&self) -> bool {
        self.active && self.kind == BodyKind::Dynamic
    }

    fn is_frozen(&self) -> bool {
        self.kind == BodyKind::Kinematic
            && self.linear_velocity == Vec3::zero()
            && self.angular_velocity == Vec3::zero()
    }

    pub fn oriented_box(&self) -> OrientedBox<T> {
        OrientedBox {
            center: self.position,
            rot: self.orientation.to_matrix(),
            half: self.half_extents,
        }
    }

    pub fn aabb(&self) -> (Vec3<T>, Vec3<T>) {
        let h = self.oriented_box().aabb_half();
        (self.position - h, self.position + h)
    }

    fn inv_inertia_world(&self, rot: &Mat3<T>) -> Mat3<T> {
        if self.kind != BodyKind::Dynamic {
            return Mat3::diagonal(Vec3::zero());
        }
        rot.mul_mat(&Mat3::diagonal(self.inv_inertia)).mul_mat(&rot.transpose())
    }

    pub fn kinetic_energy(&self) -> T {
        if !self.is_dynamic() || self.inv_mass == T::zero() {
            return T::zero();
        }
        let half = T::lit(0.5);
        let lin = half * self.linear_velocity.norm_squared() / self.inv_mass;
        let r = self.orientation.to_matrix();
        let w_local = r.tr_mul_vec(self.angular_velocity);
        let i = Vec3::new(
            T::one() / self.inv_inertia.x,
            T::one() / self.inv_inertia.y,
            T::one() / self.inv_inertia.z,
        );
        lin + half * w_local.component_mul(i).dot(w_local)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct CachedImpulse<T> {
    local_a: Vec3<T>,
    normal: T,
    friction: Vec3<T>,
}

#[derive(Clone, Debug)]
struct ContactConstraint<T> {
    a: usize,
    b: usize,
    normal: Vec3<T>,
    friction: T,
    points: Vec<ConstraintPoint<T>>,
}

#[derive(Clone, Copy, Debug)]
struct ConstraintPoint<T> {
    local_a: Vec3<T>,
    ra: Vec3<T>,
    rb: Vec3<T>,
    t1: Vec3<T>,
    t2: Vec3<T>,
    normal_mass: T,
    t1_mass: T,
    t2_mass: T,
    target: T,
    position_target: T,
    normal_impulse: T,
    t1_impulse: T,
    t2_impulse: T,
    position_impulse: T,
}

/// Rigid-box world advanced by semi-implicit Euler steps with a
/// sequential-impulse contact solver (Coulomb friction, warm starting and
/// split-impulse position correction).
#[derive(Clone, Debug)]
pub struct World<T> {
    pub bodies: Vec<Body<T>>,
    pub config: SimConfig,
    warm: BTreeMap<(usize, usize), Vec<CachedImpulse<T>>>,
    pub steps_taken: u64,
}

impl<T: Real> World<T> {
    pub fn new(config: SimConfig) -> Self {
        Self {
            bodies: Vec::new(),
            config,
            warm: BTreeMap::new(),
            steps_taken: 0,
        }
    }

    /// World holding the shelf walls and every scene object at rest.
    pub fn from_scene(scene: &Scene, config: SimConfig) -> Self {
        let mut world = Self::new(config);
        let material = BodyMaterial::from(&config.material);
        for (center, half) in scene.shelf.walls() {
            world.add_static(center.cast(), half.cast(), material);
        }
        for obj in &scene.objects {
            world.add_object(obj, material);
        }
        world
    }

    pub fn add_static(&mut self, center: Vec3<T>, half: Vec3<T>, material: BodyMaterial<T>) -> usize {
        self.bodies.push(Body {
            object_id: None,
            kind: BodyKind::Static,
            half_extents: half,
            position: center,
            orientation: Quat::identity(),
            linear_velocity: Vec3::zero(),
            angular_velocity: Vec3::zero(),
            inv_mass: T::zero(),
            inv_inertia: Vec3::zero(),
            material,
            active: true,
        });
        self.bodies.len() - 1
    }

    /// Adds a scene object as a dynamic body at rest.
    pub fn add_object(&mut self, obj: &SceneObject, material: BodyMaterial<T>) -> usize {
        let s = &obj.state;
        let inertia: Vec3<T> = s.inertia.cast();
        self.bodies.push(Body {
            object_id: Some(obj.id),
            kind: BodyKind::Dynamic,
            half_extents: obj.shape.half_extents.cast(),
            position: s.position.cast(),
            orientation: s.orientation.cast(),
            linear_velocity: Vec3::zero(),
            angular_velocity: Vec3::zero(),
            inv_mass: T::one() / T::lit(s.mass),
            inv_inertia: Vec3::new(T::one() / inertia.x, T::one() / inertia.y, T::one() / inertia.z),
            material,
            active: true,
        });
        self.bodies.len() - 1
    }

    pub fn body_index(&self, id: ObjectId) -> Option<usize> {
        self.bodies.iter().position(|b| b.active && b.object_id == Some(id))
    }

    pub fn kinetic_energy(&self) -> T {
        self.bodies.iter().map(Body::kinetic_energy).sum()
    }

    /// Largest linear and angular speed over dynamic bodies.
    pub fn max_speeds(&self) -> (T, T) {
        self.bodies
            .iter()
            .filter(|b| b.is_dynamic())
            .fold((T::zero(), T::zero()), |(v, w), b| {
                (v.max(b.linear_velocity.norm()), w.max(b.angular_velocity.norm()))
            })
    }

    /// Advances the world by `dt` seconds.
    pub fn step(&mut self, dt: T) {
        let cfg = self.config;
        let g = Vec3::new(T::zero(), -T::lit(cfg.gravity), T::zero());
        let ang_damp = T::one() / (T::one() + dt * T::lit(cfg.angular_damping));
        for b in self.bodies.iter_mut().filter(|b| b.is_dynamic()) {
            b.linear_velocity += g * dt;
            b.angular_velocity = b.angular_velocity * ang_damp;
        }

        let rots: Vec<Mat3<T>> = self.bodies.iter().map(|b| b.orientation.to_matrix()).collect();
        let inv_i: Vec<Mat3<T>> = self
            .bodies
            .iter()
            .zip(&rots)
            .map(|(b, r)| b.inv_inertia_world(r))
            .collect();

        let mut constraints = self.build_constraints(&rots, &inv_i, dt);

        let mut lin: Vec<Vec3<T>> = self.bodies.iter().map(|b| b.linear_velocity).collect();
        let mut ang: Vec<Vec3<T>> = self.bodies.iter().map(|b| b.angular_velocity).collect();
        let inv_m: Vec<T> = self
            .bodies
            .iter()
            .map(|b| if b.kind == BodyKind::Dynamic { b.inv_mass } else { T::zero() })
            .collect();

        // warm start
        for c in &constraints {
            for p in &c.points {
                let imp = c.normal * p.normal_impulse + p.t1 * p.t1_impulse + p.t2 * p.t2_impulse;
                apply(&mut lin, &mut ang, &inv_m, &inv_i, c.a, c.b, p.ra, p.rb, imp);
            }
        }

        for _ in 0..cfg.solver_iterations {
            for c in constraints.iter_mut() {
                let (a, b) = (c.a, c.b);
                for p in c.points.iter_mut() {
                    // friction
                    let vr = rel_vel(&lin, &ang, a, b, p.ra, p.rb);
                    let limit = c.friction * p.normal_impulse;
                    let d1 = -p.t1_mass * vr.dot(p.t1);
                    let d2 = -p.t2_mass * vr.dot(p.t2);
                    let (mut n1, mut n2) = (p.t1_impulse + d1, p.t2_impulse + d2);
                    let mag = (n1 * n1 + n2 * n2).sqrt();
                    if mag > limit {
                        let s = if mag > T::zero() { limit / mag } else { T::zero() };
                        n1 *= s;
                        n2 *= s;
                    }
                    let imp = p.t1 * (n1 - p.t1_impulse) + p.t2 * (n2 - p.t2_impulse);
                    p.t1_impulse = n1;
                    p.t2_impulse = n2;
                    apply(&mut lin, &mut ang, &inv_m, &inv_i, a, b, p.ra, p.rb, imp);

                    // normal
                    let vn = rel_vel(&lin, &ang, a, b, p.ra, p.rb).dot(c.normal);
                    let delta = -p.normal_mass * (vn - p.target);
                    let new = (p.normal_impulse + delta).max(T::zero());
                    let imp = c.normal * (new - p.normal_impulse);
                    p.normal_impulse = new;
                    apply(&mut lin, &mut ang, &inv_m, &inv_i, a, b, p.ra, p.rb, imp);
                }
            }
        }

        // split-impulse position correction on pseudo velocities
        let mut plin = vec![Vec3::zero(); self.bodies.len()];
        let mut pang = vec![Vec3::zero(); self.bodies.len()];
        for _ in 0..cfg.position_iterations {
            for c in constraints.iter_mut() {
                for p in c.points.iter_mut().filter(|p| p.position_target > T::zero()) {
                    let vn = rel_vel(&plin, &pang, c.a, c.b, p.ra, p.rb).dot(c.normal);
                    let delta = -p.normal_mass * (vn - p.position_target);
                    let new = (p.position_impulse + delta).max(T::zero());
                    let imp = c.normal * (new - p.position_impulse);
                    p.position_impulse = new;
                    apply(&mut plin, &mut pang, &inv_m, &inv_i, c.a, c.b, p.ra, p.rb, imp);
                }
            }
        }

        self.store_warm_start(&constraints);

        let floor_limit = T::lit(-0.3);
        for (i, b) in self.bodies.iter_mut().enumerate() {
            if !b.active {
                continue;
            }
            match b.kind {
                BodyKind::Static => {}
                BodyKind::Kinematic => {
                    if !b.is_frozen() {
                        b.position += b.linear_velocity * dt;
                        b.orientation = b.orientation.integrate(b.angular_velocity, dt);
                    }
                }
                BodyKind::Dynamic => {
                    b.linear_velocity = lin[i];
                    b.angular_velocity = ang[i];
                    b.position += (lin[i] + plin[i]) * dt;
                    b.orientation = b.orientation.integrate(ang[i] + pang[i], dt);
                    if b.position.y < floor_limit {
                        // fell off the shelf
                        b.active = false;
                    }
                }
            }
        }
        self.steps_taken += 1;
    }

    fn build_constraints(&self, rots: &[Mat3<T>], inv_i: &[Mat3<T>], dt: T) -> Vec<ContactConstraint<T>> {
        let cfg = &self.config;
        let margin = T::lit(cfg.contact_margin);
        let slop = T::lit(cfg.penetration_slop);
        let beta = T::lit(cfg.position_correction);
        let rest_threshold = T::lit(cfg.restitution_threshold);
        let static_speed = T::lit(cfg.static_friction_speed);
        let match_dist2 = T::lit(0.005 * 0.005);

        let boxes: Vec<OrientedBox<T>> = self
            .bodies
            .iter()
            .zip(rots)
            .map(|(b, r)| OrientedBox {
                center: b.position,
                rot: *r,
                half: b.half_extents,
            })
            .collect();
        let aabbs: Vec<(Vec3<T>, Vec3<T>)> = boxes
            .iter()
            .map(|ob| {
                let h = ob.aabb_half() + Vec3::splat(margin);
                (ob.center - h, ob.center + h)
            })
            .collect();

        let mut out = Vec::new();
        let n = self.bodies.len();
        for a in 0..n {
            for b in (a + 1)..n {
                let (ba, bb) = (&self.bodies[a], &self.bodies[b]);
                if !ba.active || !bb.active || !(ba.kind == BodyKind::Dynamic || bb.kind == BodyKind::Dynamic) {
                    continue;
                }
                let (amin, amax) = aabbs[a];
                let (bmin, bmax) = aabbs[b];
                if amax.x < bmin.x || bmax.x < amin.x || amax.y < bmin.y || bmax.y < amin.y || amax.z < bmin.z || bmax.z < amin.z {
                    continue;
                }
                let Some(m) = collide(&boxes[a], &boxes[b], margin) else {
                    continue;
                };
                let cached = self.warm.get(&(a, b));
                let restitution = ba.material.restitution.max(bb.material.restitution);
                let mu_s = (ba.material.static_friction * bb.material.static_friction).sqrt();
                let mu_d = (ba.material.dynamic_friction * bb.material.dynamic_friction).sqrt();
                let nrm = m.normal;
                let va = ba.linear_velocity;
                let vb = bb.linear_velocity;
                let wa = ba.angular_velocity;
                let wb = bb.angular_velocity;
                let ima = if ba.kind == BodyKind::Dynamic { ba.inv_mass } else { T::zero() };
                let imb = if bb.kind == BodyKind::Dynamic { bb.inv_mass } else { T::zero() };

                let mut max_tangential = T::zero();
                let mut points = Vec::with_capacity(m.points.len());
                for cp in &m.points {
                    let ra = cp.position - ba.position;
                    let rb = cp.position - bb.position;
                    let vr = (vb + wb.cross(rb)) - (va + wa.cross(ra));
                    let vn = vr.dot(nrm);
                    max_tangential = max_tangential.max((vr - nrm * vn).norm());

                    let eff = |dir: Vec3<T>| {
                        let ka = inv_i[a].mul_vec(ra.cross(dir)).cross(ra);
                        let kb = inv_i[b].mul_vec(rb.cross(dir)).cross(rb);
                        let k = ima + imb + (ka + kb).dot(dir);
                        if k > T::zero() {
                            T::one() / k
                        } else {
                            T::zero()
                        }
                    };
                    let t1 = nrm.any_orthonormal();
                    let t2 = nrm.cross(t1);

                    let mut target = if cp.separation > T::zero() {
                        -cp.separation / dt
                    } else {
                        T::zero()
                    };
                    if vn < -rest_threshold {
                        target = target.max(-restitution * vn);
                    }
                    let pen = -cp.separation - slop;
                    let position_target = if pen > T::zero() { beta * pen / dt } else { T::zero() };

                    let local_a = rots[a].tr_mul_vec(ra);
                    let (mut ni, mut fi) = (T::zero(), Vec3::zero());
                    if let Some(prev) = cached {
                        let best = prev
                            .iter()
                            .map(|c| ((c.local_a - local_a).norm_squared(), c))
                            .filter(|(d, _)| *d < match_dist2)
                            .min_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(std::cmp::Ordering::Equal));
                        if let Some((_, c)) = best {
                            ni = c.normal;
                            fi = c.friction;
                        }
                    }
                    points.push(ConstraintPoint {
                        local_a,
                        ra,
                        rb,
                        t1,
                        t2,
                        normal_mass: eff(nrm),
                        t1_mass: eff(t1),
                        t2_mass: eff(t2),
                        target,
                        position_target,
                        normal_impulse: ni,
                        t1_impulse: fi.dot(t1),
                        t2_impulse: fi.dot(t2),
                        position_impulse: T::zero(),
                    });
                }
                let friction = if max_tangential < static_speed { mu_s } else { mu_d };
                out.push(ContactConstraint {
                    a,
                    b,
                    normal: nrm,
                    friction,
                    points,
                });
            }
        }
        out
    }

    fn store_warm_start(&mut self, constraints: &[ContactConstraint<T>]) {
        self.warm.clear();
        for c in constraints {
            let cached = c
                .points
                .iter()
                .map(|p| CachedImpulse {
                    local_a: p.local_a,
                    normal: p.normal_impulse,
                    friction: p.t1 * p.t1_impulse + p.t2 * p.t2_impulse,
                })
                .collect();
            self.warm.insert((c.a, c.b), cached);
        }
    }

    /// Forgets cached contact impulses, e.g. after bodies were teleported.
    pub fn reset_contacts(&mut self) {
        self.warm.clear();
    }

    /// Largest pairwise penetration between active boxes (walls included).
    pub fn max_penetration(&self) -> T {
        let mut worst = T::zero();
        for a in 0..self.bodies.len() {
            for b in (a + 1)..self.bodies.len() {
                let (ba, bb) = (&self.bodies[a], &self.bodies[b]);
                if !ba.active || !bb.active || (ba.object_id.is_none() && bb.object_id.is_none()) {
                    continue;
                }
                worst = worst.max(ba.oriented_box().penetration(&bb.oriented_box()));
            }
        }
        worst
    }
}

#[inline]
fn rel_vel<T: Real>(lin: &[Vec3<T>], ang: &[Vec3<T>], a: usize, b: usize, ra: Vec3<T>, rb: Vec3<T>) -> Vec3<T> {
    (lin[b] + ang[b].cross(rb)) - (lin[a] + ang[a].cross(ra))
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn apply<T: Real>(
    lin: &mut [Vec3<T>],
    ang: &mut [Vec3<T>],
    inv_m: &[T],
    inv_i: &[Mat3<T>],
    a: usize,
    b: usize,
    ra: Vec3<T>,
    rb: Vec3<T>,
    impulse: Vec3<T>,
) {
    lin[a] -= impulse * inv_m[a];
    ang[a] -= inv_i[a].mul_vec(ra.cross(impulse));
    lin[b] += impulse * inv_m[b];
    ang[b] += inv_i[b].mul_vec(rb.cross(impulse));
}
