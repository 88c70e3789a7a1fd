//! Camera geometry, rigid transforms and viewpoint sampling.
//!
//! Orientations are unit quaternions with a canonical sign (`w >= 0`), so two
//! poses that describe the same rotation compare equal component-wise.

use std::collections::HashMap;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Pinhole intrinsics. Pixel `(u, v)` refers to the pixel center at integer
/// coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self {
            fx: 575.0,
            fy: 575.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "intrinsics out of range: {self:?}"
            )))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Projects a camera-frame point. Returns `None` behind the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        if p.z <= 0.0 {
            return None;
        }
        Some((self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Projects and rounds to the containing pixel, if inside the image.
    pub fn project_to_pixel(&self, p: &Vec3) -> Option<(usize, usize)> {
        let (u, v) = self.project(p)?;
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            None
        } else {
            Some((u as usize, v as usize))
        }
    }
}

/// Lifts pixel `(u, v)` at metric depth `z` into the camera frame.
pub fn backproject(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Result<Vec3> {
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    Ok(backproject_unchecked(u, v, z, k))
}

#[inline]
pub(crate) fn backproject_unchecked(u: f64, v: f64, z: f64, k: &CameraIntrinsics) -> Vec3 {
    Vec3::new((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z)
}

/// Flips `q` into the `w >= 0` hemisphere.
pub fn canonical_quat(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Builds a canonical unit quaternion from `(w, x, y, z)` components.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> UnitQuaternion<f64> {
    canonical_quat(UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Geodesic angle between two orientations in degrees, in `[0, 180]`.
///
/// Inputs are renormalized, and the absolute inner product makes the result
/// independent of quaternion sign.
pub fn quat_geodesic_deg(q1: &Quaternion<f64>, q2: &Quaternion<f64>) -> f64 {
    let n1 = q1.norm();
    let n2 = q2.norm();
    if n1 == 0.0 || n2 == 0.0 {
        return 0.0;
    }
    let dot = (q1.coords.dot(&q2.coords) / (n1 * n2)).abs().min(1.0);
    2.0 * dot.acos().to_degrees()
}

/// Rigid transform mapping object coordinates into camera coordinates:
/// `x_cam = R * x_obj + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical_quat(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self::new(UnitQuaternion::identity(), t)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn set_rotation(&mut self, q: UnitQuaternion<f64>) {
        self.rotation = canonical_quat(q);
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// Rotation angle (degrees) and translation distance (meters) between two poses.
    pub fn distance_to(&self, other: &Pose) -> (f64, f64) {
        (
            quat_geodesic_deg(self.rotation.quaternion(), other.rotation.quaternion()),
            (self.translation - other.translation).norm(),
        )
    }

    /// Applies a small twist `(omega, v)` on the left: `exp(omega) * self + v`.
    pub fn perturbed(&self, omega: &Vec3, dt: &Vec3) -> Pose {
        let dq = UnitQuaternion::from_scaled_axis(*omega);
        Pose::new(dq * self.rotation, dq * self.translation + dt)
    }
}

/// Sphere-projected geodesic subdivision of the icosahedron.
///
/// Returns unit-length vertices and triangles with outward winding.
pub fn icosphere(subdivisions: u32) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];

    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(usize, usize), usize> = HashMap::new();
        let mut midpoint = |a: usize, b: usize, verts: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a] + verts[b]) * 0.5).normalize());
                verts.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.push([a, ab, ca]);
            next.push([b, bc, ab]);
            next.push([c, ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    (verts, faces)
}

/// Camera poses on a sphere around the origin, all looking at the origin.
#[derive(Clone, Debug)]
pub struct ViewpointSet {
    pub radius: f64,
    pub inplane_steps: usize,
    pub vertex_count: usize,
    /// Object-to-camera poses; vertex-major, in-plane rotation minor.
    pub poses: Vec<Pose>,
}

impl ViewpointSet {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Camera center of view `i` in the object frame.
    pub fn camera_position(&self, i: usize) -> Vec3 {
        self.poses[i].inverse().translation
    }
}

/// Object-to-camera pose for a camera at `position` looking at the origin,
/// rolled by `roll` radians about its optical axis.
pub fn look_at_origin(position: &Vec3, roll: f64) -> Pose {
    let z = (-position).normalize();
    let up = if z.z.abs() > 0.99 {
        Vec3::y()
    } else {
        Vec3::z()
    };
    let x = up.cross(&z).normalize();
    let y = z.cross(&x);
    // Rows of the world-to-camera rotation are the camera axes.
    let base = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let roll_rot = Rotation3::from_axis_angle(&Unit::new_unchecked(Vec3::z()), roll);
    let r = roll_rot.into_inner() * base;
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    let q = canonical_quat(q);
    Pose::new(q, -(q * position))
}

pub fn sample_icosahedron_views(
    subdivisions: u32,
    radius: f64,
    inplane_steps: usize,
) -> Result<ViewpointSet> {
    if !(radius > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "radius {radius} must be > 0"
        )));
    }
    if inplane_steps == 0 {
        return Err(Error::InvalidParameter("inplane_steps must be >= 1".into()));
    }
    let (verts, _) = icosphere(subdivisions);
    let mut poses = Vec::with_capacity(verts.len() * inplane_steps);
    for v in &verts {
        let position = v * radius;
        for s in 0..inplane_steps {
            let roll = std::f64::consts::TAU * s as f64 / inplane_steps as f64;
            poses.push(look_at_origin(&position, roll));
        }
    }
    Ok(ViewpointSet {
        radius,
        inplane_steps,
        vertex_count: verts.len(),
        poses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        let axis = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let angle = rng.random_range(0.0..std::f64::consts::PI);
        let q = UnitQuaternion::from_scaled_axis(axis.normalize() * angle);
        let t = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        Pose::new(q, t)
    }

    #[test]
    fn backproject_principal_ray() {
        let p = backproject(320.0, 240.0, 1.0, &k()).unwrap();
        assert_eq!(p, Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn backproject_one_focal_length() {
        let p = backproject(320.0 + 575.0, 240.0, 2.0, &k()).unwrap();
        assert_eq!(p, Vec3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn backproject_hand_evaluated() {
        // (100 - 320) * 0.73 / 575 and (200 - 240) * 0.73 / 575, by hand.
        let p = backproject(100.0, 200.0, 0.73, &k()).unwrap();
        assert!((p.x - (-0.279_304_347_826_087)).abs() < 1e-12);
        assert!((p.y - (-0.050_782_608_695_652)).abs() < 1e-12);
        assert_eq!(p.z, 0.73);
    }

    #[test]
    fn backproject_rejects_bad_depth() {
        assert!(matches!(
            backproject(1.0, 1.0, 0.0, &k()),
            Err(Error::InvalidDepth(_))
        ));
        assert!(backproject(1.0, 1.0, -0.5, &k()).is_err());
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(1.0, 1.0, 640.0, 10.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(0.0, 1.0, 10.0, 10.0, 640, 480).is_err());
        assert!(CameraIntrinsics::new(500.0, 500.0, 319.5, 239.5, 640, 480).is_ok());
    }

    #[test]
    fn geodesic_examples() {
        let q = quat_from_wxyz(0.3, -0.2, 0.9, 0.1);
        assert!(quat_geodesic_deg(q.quaternion(), q.quaternion()) < 1e-6);
        let neg = -q.into_inner();
        assert!(quat_geodesic_deg(q.quaternion(), &neg) < 1e-6);
        let h = std::f64::consts::FRAC_PI_4;
        let z90 = Quaternion::new(h.cos(), 0.0, 0.0, h.sin());
        let id = Quaternion::new(1.0, 0.0, 0.0, 0.0);
        assert!((quat_geodesic_deg(&id, &z90) - 90.0).abs() < 1e-9);
    }

    #[test]
    fn canonical_sign() {
        let q = quat_from_wxyz(-0.5, 0.5, 0.5, 0.5);
        assert!(q.w >= 0.0);
        let p = Pose::new(q, Vec3::zeros());
        assert!(p.rotation().w >= 0.0);
    }

    #[test]
    fn pose_composition_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (a, b, c) = (
                random_pose(&mut rng),
                random_pose(&mut rng),
                random_pose(&mut rng),
            );
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            for _ in 0..100 {
                let p = Vec3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                );
                assert!((left.transform_point(&p) - right.transform_point(&p)).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn pose_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let a = random_pose(&mut rng);
            let id = a.inverse().compose(&a);
            let (rot, tr) = id.distance_to(&Pose::identity());
            assert!(rot < 1e-6 && tr < 1e-9);
            assert!((a.rotation().norm() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn icosahedron_counts() {
        assert_eq!(
            sample_icosahedron_views(0, 1.0, 1).unwrap().vertex_count,
            12
        );
        assert_eq!(
            sample_icosahedron_views(1, 1.0, 1).unwrap().vertex_count,
            42
        );
        assert_eq!(sample_icosahedron_views(1, 1.0, 12).unwrap().len(), 504);
        for s in 0..4 {
            let (v, f) = icosphere(s);
            assert_eq!(v.len(), 10 * 4usize.pow(s) + 2);
            // Euler characteristic of the constructed closed mesh.
            let mut edges = std::collections::HashSet::new();
            for t in &f {
                for i in 0..3 {
                    let (a, b) = (t[i], t[(i + 1) % 3]);
                    edges.insert((a.min(b), a.max(b)));
                }
            }
            assert_eq!(v.len() as i64 - edges.len() as i64 + f.len() as i64, 2);
        }
    }

    #[test]
    fn views_look_at_origin() {
        let vs = sample_icosahedron_views(1, 0.7, 3).unwrap();
        for (i, p) in vs.poses.iter().enumerate() {
            assert!((vs.camera_position(i).norm() - 0.7).abs() < 1e-9);
            let origin = p.transform_point(&Vec3::zeros());
            assert!(origin.x.abs() < 1e-9 && origin.y.abs() < 1e-9);
            assert!((origin.z - 0.7).abs() < 1e-9);
        }
    }

    #[test]
    fn view_separation_shrinks_with_subdivision() {
        let min_sep = |s| {
            let (v, _) = icosphere(s);
            let mut best = f64::MAX;
            for i in 0..v.len() {
                for j in i + 1..v.len() {
                    best = best.min(v[i].angle(&v[j]));
                }
            }
            best
        };
        let seps: Vec<f64> = (0..4).map(min_sep).collect();
        assert!(seps.iter().all(|&s| s > 1e-6), "positions must be distinct");
        for w in seps.windows(2) {
            assert!(w[1] < w[0]);
        }
    }

    proptest! {
        #[test]
        fn project_inverts_backproject(u in 0.0f64..640.0, v in 0.0f64..480.0, z in 0.05f64..10.0) {
            let p = backproject(u, v, z, &k()).unwrap();
            let (pu, pv) = k().project(&p).unwrap();
            prop_assert!((pu - u).abs() < 1e-6 && (pv - v).abs() < 1e-6);
        }

        #[test]
        fn geodesic_sign_invariant(w in -1.0f64..1.0, x in -1.0f64..1.0, y in -1.0f64..1.0, z in -1.0f64..1.0,
                                   w2 in -1.0f64..1.0, x2 in -1.0f64..1.0) {
            prop_assume!(w.abs() + x.abs() + y.abs() + z.abs() > 1e-3);
            prop_assume!(w2.abs() + x2.abs() > 1e-3);
            let q1 = Quaternion::new(w, x, y, z);
            let q2 = Quaternion::new(w2, x2, 0.3, -0.1);
            prop_assert_eq!(quat_geodesic_deg(&q1, &q2), quat_geodesic_deg(&(-q1), &q2));
            let d = quat_geodesic_deg(&q1, &q2);
            prop_assert!((0.0..=180.0).contains(&d));
            prop_assert!((d - quat_geodesic_deg(&q2, &q1)).abs() < 1e-9);
        }
    }
}
