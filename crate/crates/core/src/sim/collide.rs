//! Oriented box vs. oriented box contact generation by the separating axis
//! test, with face clipping for face contacts and closest points for
//! edge-edge contacts.

use crate::math::{Mat3, Real, Vec3};

/// An oriented box in world space.
#[derive(Clone, Copy, Debug)]
pub struct OrientedBox<T> {
    pub center: Vec3<T>,
    /// Columns are the box axes.
    pub rot: Mat3<T>,
    pub half: Vec3<T>,
}

impl<T: Real> OrientedBox<T> {
    pub fn axis(&self, i: usize) -> Vec3<T> {
        self.rot.column(i)
    }

    /// Half-size of the projection onto the unit axis `l`.
    #[inline]
    fn project(&self, l: Vec3<T>) -> T {
        (0..3).map(|i| self.half[i] * self.axis(i).dot(l).abs()).sum()
    }

    /// World-space AABB half extents.
    pub fn aabb_half(&self) -> Vec3<T> {
        let m = &self.rot.m;
        Vec3::new(
            (0..3).map(|j| m[0][j].abs() * self.half[j]).sum(),
            (0..3).map(|j| m[1][j].abs() * self.half[j]).sum(),
            (0..3).map(|j| m[2][j].abs() * self.half[j]).sum(),
        )
    }

    /// Greatest penetration depth of `self` into `other`, zero if disjoint.
    pub fn penetration(&self, other: &Self) -> T {
        match collide(self, other, T::zero()) {
            Some(m) => m
                .points
                .iter()
                .map(|p| -p.separation)
                .fold(T::zero(), T::max),
            None => T::zero(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ContactPoint<T> {
    /// Midpoint between the two surfaces.
    pub position: Vec3<T>,
    /// Signed distance along the normal; negative when penetrating.
    pub separation: T,
}

/// Contact manifold; `normal` points from the first box to the second.
#[derive(Clone, Debug)]
pub struct Manifold<T> {
    pub normal: Vec3<T>,
    pub points: Vec<ContactPoint<T>>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Feature {
    FaceA(usize),
    FaceB(usize),
    Edge(usize, usize),
}

#[inline]
fn sign<T: Real>(x: T) -> T {
    if x < T::zero() {
        -T::one()
    } else {
        T::one()
    }
}

/// Collides two boxes. Returns `None` when they are separated by more than
/// `margin` along some axis.
pub fn collide<T: Real>(a: &OrientedBox<T>, b: &OrientedBox<T>, margin: T) -> Option<Manifold<T>> {
    let d = b.center - a.center;
    let sep_on = |l: Vec3<T>| d.dot(l).abs() - a.project(l) - b.project(l);

    let mut best_a = (T::neg_infinity(), 0);
    for i in 0..3 {
        let s = sep_on(a.axis(i));
        if s > margin {
            return None;
        }
        if s > best_a.0 {
            best_a = (s, i);
        }
    }
    let mut best_b = (T::neg_infinity(), 0);
    for j in 0..3 {
        let s = sep_on(b.axis(j));
        if s > margin {
            return None;
        }
        if s > best_b.0 {
            best_b = (s, j);
        }
    }
    let mut best_e = (T::neg_infinity(), 0, 0, Vec3::zero());
    for i in 0..3 {
        for j in 0..3 {
            let l = a.axis(i).cross(b.axis(j));
            let len = l.norm();
            if len < T::lit(1e-5) {
                continue;
            }
            let l = l * (T::one() / len);
            let s = sep_on(l);
            if s > margin {
                return None;
            }
            if s > best_e.0 {
                best_e = (s, i, j, l);
            }
        }
    }

    // Bias toward face features, and toward box A, so the chosen feature is
    // stable from one step to the next.
    let (mut best_s, mut feature) = (best_a.0, Feature::FaceA(best_a.1));
    if best_b.0 > T::lit(0.98) * best_s + T::lit(1e-4) {
        best_s = best_b.0;
        feature = Feature::FaceB(best_b.1);
    }
    if best_e.0 > T::lit(0.95) * best_s + T::lit(5e-4) {
        feature = Feature::Edge(best_e.1, best_e.2);
    }

    match feature {
        Feature::FaceA(i) => {
            let n = a.axis(i) * sign(d.dot(a.axis(i)));
            let points = face_contact(a, i, n, b, margin);
            (!points.is_empty()).then_some(Manifold { normal: n, points })
        }
        Feature::FaceB(j) => {
            let n = b.axis(j) * sign(-d.dot(b.axis(j)));
            let points = face_contact(b, j, n, a, margin);
            (!points.is_empty()).then_some(Manifold { normal: -n, points })
        }
        Feature::Edge(i, j) => {
            let n = best_e.3 * sign(d.dot(best_e.3));
            Some(edge_contact(a, i, b, j, n, best_e.0))
        }
    }
}

/// Clips the incident face of `inc` against the reference face of `reference`
/// along axis `k`; `n` is the reference face normal, pointing toward `inc`.
fn face_contact<T: Real>(
    reference: &OrientedBox<T>,
    k: usize,
    n: Vec3<T>,
    inc: &OrientedBox<T>,
    margin: T,
) -> Vec<ContactPoint<T>> {
    // Incident face: the face of `inc` most anti-parallel to `n`.
    let mut j = 0;
    let mut best = T::neg_infinity();
    for c in 0..3 {
        let v = inc.axis(c).dot(n).abs();
        if v > best {
            best = v;
            j = c;
        }
    }
    let face_n = inc.axis(j) * -sign(inc.axis(j).dot(n));
    let face_c = inc.center + face_n * inc.half[j];
    let (u1, u2) = ((j + 1) % 3, (j + 2) % 3);
    let e1 = inc.axis(u1) * inc.half[u1];
    let e2 = inc.axis(u2) * inc.half[u2];
    let mut poly = vec![
        face_c + e1 + e2,
        face_c - e1 + e2,
        face_c - e1 - e2,
        face_c + e1 - e2,
    ];

    for side in [(k + 1) % 3, (k + 2) % 3] {
        let s = reference.axis(side);
        let off = s.dot(reference.center);
        let h = reference.half[side];
        poly = clip(&poly, s, off + h);
        poly = clip(&poly, -s, -off + h);
        if poly.is_empty() {
            return Vec::new();
        }
    }

    let ref_c = reference.center + n * reference.half[k];
    poly.into_iter()
        .filter_map(|v| {
            let sep = n.dot(v - ref_c);
            (sep < margin).then(|| ContactPoint {
                position: v - n * (sep * T::lit(0.5)),
                separation: sep,
            })
        })
        .collect()
}

/// Sutherland–Hodgman: keeps the part of `poly` with `n·x ≤ offset`.
fn clip<T: Real>(poly: &[Vec3<T>], n: Vec3<T>, offset: T) -> Vec<Vec3<T>> {
    let mut out = Vec::with_capacity(poly.len() + 2);
    for (idx, &p) in poly.iter().enumerate() {
        let q = poly[(idx + 1) % poly.len()];
        let dp = n.dot(p) - offset;
        let dq = n.dot(q) - offset;
        if dp <= T::zero() {
            out.push(p);
        }
        if (dp <= T::zero()) != (dq <= T::zero()) {
            let t = dp / (dp - dq);
            out.push(p + (q - p) * t);
        }
    }
    out
}

fn edge_contact<T: Real>(
    a: &OrientedBox<T>,
    i: usize,
    b: &OrientedBox<T>,
    j: usize,
    n: Vec3<T>,
    separation: T,
) -> Manifold<T> {
    let mut pa = a.center;
    for k in (0..3).filter(|&k| k != i) {
        pa += a.axis(k) * (sign(a.axis(k).dot(n)) * a.half[k]);
    }
    let mut pb = b.center;
    for k in (0..3).filter(|&k| k != j) {
        pb += b.axis(k) * (-sign(b.axis(k).dot(n)) * b.half[k]);
    }
    let da = a.axis(i);
    let db = b.axis(j);
    let w = pa - pb;
    let bb = da.dot(db);
    let c = da.dot(w);
    let f = db.dot(w);
    let denom = T::one() - bb * bb;
    let s = if denom > T::lit(1e-9) {
        ((bb * f - c) / denom).max(-a.half[i]).min(a.half[i])
    } else {
        T::zero()
    };
    let t = (bb * s + f).max(-b.half[j]).min(b.half[j]);
    let ca = pa + da * s;
    let cb = pb + db * t;
    Manifold {
        normal: n,
        points: vec![ContactPoint {
            position: (ca + cb) * T::lit(0.5),
            separation,
        }],
    }
}
