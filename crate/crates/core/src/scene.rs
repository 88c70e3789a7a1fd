//! Seeded synthetic test scenes: objects at random poses in front of a
//! textured wall, one of them partially hidden by a planar occluder.

use nalgebra::{Quaternion, UnitQuaternion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbdFrame;
use crate::geom::{backproject, CameraIntrinsics, Pose, Vec3};
use crate::mesh::{checker_plane, plane, Mesh};
use crate::metrics::Instance;
use crate::render::render_scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    /// Depth range of object centroids in meters.
    pub min_depth: f64,
    pub max_depth: f64,
    /// Range of the fraction of the occluded object's visible pixels that
    /// the occluder hides.
    pub min_occlusion: f64,
    pub max_occlusion: f64,
    pub wall_depth: f64,
    /// Pixels kept free between object silhouettes and the image border.
    pub margin_px: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.4,
            max_depth: 1.0,
            min_occlusion: 0.2,
            max_occlusion: 0.3,
            wall_depth: 1.5,
            margin_px: 12.0,
            max_attempts: 500,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.min_depth > 0.0
            && self.max_depth >= self.min_depth
            && self.wall_depth > self.max_depth
            && (0.0..=1.0).contains(&self.min_occlusion)
            && (self.min_occlusion..=1.0).contains(&self.max_occlusion)
            && self.margin_px >= 0.0
            && self.max_attempts > 0;
        if !ok {
            return Err(Error::InvalidParameter(
                "inconsistent scene configuration".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub frame: RgbdFrame,
    pub gt: Vec<Instance>,
    /// Object id of the occluded instance and the fraction hidden.
    pub occlusion: Option<(u32, f64)>,
    /// Per-pixel object id + 1; 0 for wall and occluder.
    pub labels: Vec<u32>,
}

/// Uniformly distributed rotation.
pub fn random_rotation(rng: &mut impl Rng) -> UnitQuaternion<f64> {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    UnitQuaternion::new_normalize(Quaternion::new(
        b * (tau * u3).cos(),
        a * (tau * u2).sin(),
        a * (tau * u2).cos(),
        b * (tau * u3).sin(),
    ))
}

struct Placed {
    pose: Pose,
    center: (f64, f64),
    radius_px: f64,
}

/// Places every object without image overlap, then slides an occluder over
/// one of them until it hides a fraction drawn from the configured range.
pub fn synthesize_scene(
    objects: &[(u32, &Mesh)],
    k: &CameraIntrinsics,
    cfg: &SceneConfig,
    seed: u64,
) -> Result<SyntheticScene> {
    cfg.validate()?;
    k.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wall = checker_plane(4.0, 16, 70, 190);
    let wall_pose = Pose::from_translation(Vec3::new(0.0, 0.0, cfg.wall_depth));
    for _ in 0..cfg.max_attempts {
        let Some(placed) = place_objects(objects, k, cfg, &mut rng) else {
            continue;
        };
        let mut items: Vec<(&Mesh, Pose)> = objects
            .iter()
            .zip(&placed)
            .map(|((_, m), p)| (*m, p.pose))
            .collect();
        items.push((&wall, wall_pose));
        let (frame, labels) = render_scene(&items, k);
        let visible = label_counts(&labels, objects.len());
        if visible.contains(&0) {
            continue;
        }
        let gt = objects
            .iter()
            .zip(&placed)
            .map(|((id, _), p)| Instance {
                object_id: *id,
                pose: p.pose,
            })
            .collect();
        if objects.is_empty() || cfg.max_occlusion == 0.0 {
            return Ok(SyntheticScene {
                frame,
                gt,
                occlusion: None,
                labels: strip_labels(labels, objects),
            });
        }
        let target_idx = rng.random_range(0..objects.len());
        let target = rng.random_range(cfg.min_occlusion..=cfg.max_occlusion);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let (id, mesh) = objects[target_idx];
        let p = &placed[target_idx];
        if let Some((frame, labels, frac)) =
            occlude(&items, k, mesh, p, target_idx, &visible, target, angle, cfg)
        {
            return Ok(SyntheticScene {
                frame,
                gt,
                occlusion: Some((id, frac)),
                labels: strip_labels(labels, objects),
            });
        }
    }
    Err(Error::InvalidParameter(format!(
        "could not compose a scene in {} attempts",
        cfg.max_attempts
    )))
}

fn place_objects(
    objects: &[(u32, &Mesh)],
    k: &CameraIntrinsics,
    cfg: &SceneConfig,
    rng: &mut impl Rng,
) -> Option<Vec<Placed>> {
    let mut placed: Vec<Placed> = Vec::new();
    for (_, mesh) in objects {
        let z = rng.random_range(cfg.min_depth..=cfg.max_depth);
        let radius_px = 0.5 * mesh.diameter() * k.fx / (z - 0.5 * mesh.diameter()) + cfg.margin_px;
        let (w, h) = (k.width as f64, k.height as f64);
        if 2.0 * radius_px >= w.min(h) {
            return None;
        }
        let u = rng.random_range(radius_px..w - radius_px);
        let v = rng.random_range(radius_px..h - radius_px);
        if placed.iter().any(|p| {
            ((p.center.0 - u).powi(2) + (p.center.1 - v).powi(2)).sqrt() < p.radius_px + radius_px
        }) {
            return None;
        }
        let c = backproject(u, v, z, k).ok()?;
        let q = random_rotation(rng);
        let t = c - q * mesh.centroid();
        placed.push(Placed {
            pose: Pose::new(q, t),
            center: (u, v),
            radius_px,
        });
    }
    Some(placed)
}

fn label_counts(labels: &[u32], n: usize) -> Vec<usize> {
    let mut counts = vec![0; n];
    for &l in labels {
        if l >= 1 && (l as usize) <= n {
            counts[l as usize - 1] += 1;
        }
    }
    counts
}

fn strip_labels(labels: Vec<u32>, objects: &[(u32, &Mesh)]) -> Vec<u32> {
    labels
        .into_iter()
        .map(|l| match l {
            0 => 0,
            l if (l as usize) <= objects.len() => objects[l as usize - 1].0 + 1,
            _ => 0,
        })
        .collect()
}

/// Bisects the lateral offset of a fronto-parallel occluder until the hidden
/// fraction of object `idx` is within a small tolerance of `target`. Fails
/// when the occluder would also hide another object.
#[allow(clippy::too_many_arguments)]
fn occlude(
    items: &[(&Mesh, Pose)],
    k: &CameraIntrinsics,
    mesh: &Mesh,
    placed: &Placed,
    idx: usize,
    visible: &[usize],
    target: f64,
    angle: f64,
    cfg: &SceneConfig,
) -> Option<(RgbdFrame, Vec<u32>, f64)> {
    let d = mesh.diameter();
    let c = placed.pose.transform_point(&mesh.centroid());
    let depth = (c.z - d).max(0.5 * cfg.min_depth);
    // Scaled so that the occluder, seen from the camera, spans twice the
    // object's extent.
    let side = 2.0 * d * depth / c.z;
    let occluder = plane(side, side, [128, 128, 128]);
    let dir = Vec3::new(angle.cos(), angle.sin(), 0.0);
    let center = c * (depth / c.z);
    let n = items.len();
    let render_at = |s: f64| {
        let mut all = items.to_vec();
        all.push((&occluder, Pose::from_translation(center + dir * s)));
        let (frame, labels) = render_scene(&all, k);
        let counts = label_counts(&labels, n);
        let hidden = 1.0 - counts[idx] as f64 / visible[idx] as f64;
        (frame, labels, counts, hidden)
    };
    // Offset `0` hides everything; `side` hides nothing.
    let (mut lo, mut hi) = (0.0, side);
    let tol = 0.25 * (cfg.max_occlusion - cfg.min_occlusion);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        let (frame, labels, counts, hidden) = render_at(mid);
        if (hidden - target).abs() <= tol {
            let others_intact = counts
                .iter()
                .zip(visible)
                .enumerate()
                .all(|(i, (a, b))| i == idx || a == b);
            let in_range = (cfg.min_occlusion..=cfg.max_occlusion).contains(&hidden);
            return (others_intact && in_range).then_some((frame, labels, hidden));
        }
        if hidden > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    None
}
