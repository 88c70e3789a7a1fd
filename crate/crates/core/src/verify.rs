//! Projective point-to-plane ICP and depth/normal hypothesis checks.

use nalgebra::{Matrix6, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbdFrame;
use crate::geom::{backproject_unchecked, CameraIntrinsics, Pose, Vec3};
use crate::mesh::Mesh;
use crate::render::{render_window, WindowView};

/// Step-halving attempts before an ICP update is abandoned.
const MAX_HALVINGS: usize = 6;
const CONVERGED_M: f64 = 1e-5;
const CONVERGED_DEG: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyParams {
    pub icp_max_iters: usize,
    /// Point-to-plane objective; point-to-point otherwise.
    pub icp_point_plane: bool,
    pub assoc_max_dist: f64,
    pub depth_inlier_tol: f64,
    pub min_depth_inlier_frac: f64,
    pub normal_max_angle_deg: f64,
    /// Minimum fraction of rendered pixels with a valid association for
    /// refinement to start.
    pub min_valid_frac: f64,
    /// Same-object detections closer than this are suppressed.
    pub nms_radius: f64,
}

impl Default for VerifyParams {
    fn default() -> Self {
        Self {
            icp_max_iters: 15,
            icp_point_plane: true,
            assoc_max_dist: 0.02,
            depth_inlier_tol: 0.02,
            min_depth_inlier_frac: 0.65,
            normal_max_angle_deg: 30.0,
            min_valid_frac: 0.2,
            nms_radius: 0.05,
        }
    }
}

impl VerifyParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.assoc_max_dist,
            self.depth_inlier_tol,
            self.normal_max_angle_deg,
            self.nms_radius,
        ];
        let fractions = [self.min_depth_inlier_frac, self.min_valid_frac];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite()))
            || fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(Error::InvalidParameter(format!(
                "invalid verification parameters {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpResult {
    pub pose: Pose,
    /// Root mean truncated squared point-to-plane residual over rendered
    /// pixels at the final pose, meters.
    pub residual: f64,
    pub iterations: usize,
    /// False when too few associations existed to start refinement.
    pub refined: bool,
}

struct Associations {
    /// Rows `[p × n, n]` and right-hand sides of the linearized system.
    rows: Vec<(Vec3, Vec3, f64)>,
    rendered: usize,
    /// Sum over rendered pixels of the squared residual, truncated at the
    /// association gate; unassociated pixels contribute the full gate.
    truncated_sq: f64,
}

impl Associations {
    /// Root of the mean truncated squared residual.
    fn residual(&self) -> f64 {
        if self.rendered == 0 {
            f64::INFINITY
        } else {
            (self.truncated_sq / self.rendered as f64).sqrt()
        }
    }

    fn valid_frac(&self, pixels: usize) -> f64 {
        if self.rendered == 0 {
            0.0
        } else {
            pixels as f64 / self.rendered as f64
        }
    }
}

/// Renders the model at `pose` and pairs every foreground pixel with the
/// scene point at the same pixel. Returns the associations and the number of
/// associated pixels.
fn associate(
    mesh: &Mesh,
    pose: &Pose,
    frame: &RgbdFrame,
    p: &VerifyParams,
    gate: f64,
) -> (Associations, usize) {
    let k = &frame.intrinsics;
    let win = render_window(mesh, pose, k, EDGE_WINDOW as usize + 1);
    let wk = *win.view.intrinsics();
    let gate_sq = gate * gate;
    let mut out = Associations {
        rows: Vec::new(),
        rendered: 0,
        truncated_sq: 0.0,
    };
    let mut paired = 0;
    for wy in 0..wk.height {
        for wx in 0..wk.width {
            let zm = win.view.frame.depth[wy * wk.width + wx];
            if zm <= 0.0 {
                continue;
            }
            let (u, v) = (wx + win.x0, wy + win.y0);
            let i = v * k.width + u;
            out.rendered += 1;
            let zs = frame.depth[i];
            let pm = backproject_unchecked(u as f64, v as f64, zm, k);
            let ps = backproject_unchecked(u as f64, v as f64, zs, k);
            let diff = pm - ps;
            if zs <= 0.0 || diff.norm() > gate {
                match nearest_in_window(frame, u, v, &pm, gate) {
                    Some(q) => {
                        let d = pm - q;
                        for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
                            out.rows.push((pm.cross(&axis), axis, -d.dot(&axis)));
                        }
                        out.truncated_sq += d.norm_squared();
                    }
                    None => out.truncated_sq += gate_sq,
                }
                continue;
            }
            paired += 1;
            match (p.icp_point_plane, frame.normal_at(u, v)) {
                (true, Some(n)) => {
                    let r = diff.dot(&n);
                    out.rows.push((pm.cross(&n), n, -r));
                    out.truncated_sq += r * r;
                }
                (true, None) => out.truncated_sq += diff.norm_squared(),
                (false, _) => {
                    for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
                        out.rows.push((pm.cross(&axis), axis, -diff.dot(&axis)));
                    }
                    out.truncated_sq += diff.norm_squared();
                }
            }
        }
    }
    reverse_edges(&win, frame, gate, &mut out);
    (out, paired)
}

/// Scene pixels next to the rendered silhouette but not covered by it are
/// paired with the closest nearby model point, pulling the model outward.
fn reverse_edges(win: &WindowView, scene: &RgbdFrame, gate: f64, out: &mut Associations) {
    let k = &scene.intrinsics;
    let wk = win.view.intrinsics();
    let (ww, wh) = (wk.width, wk.height);
    let depth = &win.view.frame.depth;
    let (mut zmin, mut zmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let model: Vec<Option<Vec3>> = depth
        .iter()
        .enumerate()
        .map(|(i, &zm)| {
            (zm > 0.0).then(|| {
                zmin = zmin.min(zm);
                zmax = zmax.max(zm);
                backproject_unchecked((i % ww + win.x0) as f64, (i / ww + win.y0) as f64, zm, k)
            })
        })
        .collect();
    for wy in 0..wh {
        for wx in 0..ww {
            if model[wy * ww + wx].is_some() {
                continue;
            }
            let (u, v) = (wx + win.x0, wy + win.y0);
            let zs = scene.depth[v * k.width + u];
            if zs <= 0.0 || zs < zmin - gate || zs > zmax + gate {
                continue;
            }
            let ps = backproject_unchecked(u as f64, v as f64, zs, k);
            let found = ring_search(wk, (wx, wy), (0, 0, ww, wh), &ps, gate, |x, y| {
                model[y * ww + x].filter(|pm| (pm.z - zs).abs() <= gate)
            });
            if let Some(pm) = found {
                let diff = pm - ps;
                for axis in [Vec3::x(), Vec3::y(), Vec3::z()] {
                    out.rows.push((pm.cross(&axis), axis, -diff.dot(&axis)));
                }
                out.truncated_sq += diff.norm_squared();
            }
        }
    }
}

/// Half-width in pixels of the search window for model pixels whose
/// projective partner fails the distance gate.
const EDGE_WINDOW: isize = 6;

/// Closest valid scene point to `pm` among pixels near `(u, v)`, if within
/// `gate`.
fn nearest_in_window(frame: &RgbdFrame, u: usize, v: usize, pm: &Vec3, gate: f64) -> Option<Vec3> {
    let k = &frame.intrinsics;
    ring_search(k, (u, v), (0, 0, k.width, k.height), pm, gate, |x, y| {
        let z = frame.depth[y * k.width + x];
        (z > 0.0 && (z - pm.z).abs() <= gate)
            .then(|| backproject_unchecked(x as f64, y as f64, z, k))
    })
}

/// Nearest candidate to `anchor` within `gate` over square rings of pixels
/// around `center`, clipped to the half-open box `(x0, y0, x1, y1)`. Rings
/// stop once no pixel further out can hold a closer point, using a lower
/// bound on the distance from `anchor` to the viewing rays of that ring.
fn ring_search(
    k: &CameraIntrinsics,
    center: (usize, usize),
    bounds: (usize, usize, usize, usize),
    anchor: &Vec3,
    gate: f64,
    mut probe: impl FnMut(usize, usize) -> Option<Vec3>,
) -> Option<Vec3> {
    let spread = ray_spread(k);
    let radius = anchor.norm() / spread;
    let (cu, cv) = (center.0 as isize, center.1 as isize);
    let (x0, y0, x1, y1) = (
        bounds.0 as isize,
        bounds.1 as isize,
        bounds.2 as isize,
        bounds.3 as isize,
    );
    let mut best: Option<(f64, Vec3)> = None;
    for r in 0..=EDGE_WINDOW {
        let bound = radius * r as f64;
        if bound > gate || best.is_some_and(|b| b.0 <= bound) {
            break;
        }
        for dv in -r..=r {
            let y = cv + dv;
            if y < y0 || y >= y1 {
                continue;
            }
            let step = if dv.abs() == r { 1 } else { (2 * r).max(1) };
            let mut du = -r;
            while du <= r {
                let x = cu + du;
                du += step;
                if x < x0 || x >= x1 {
                    continue;
                }
                if let Some(q) = probe(x as usize, y as usize) {
                    let d = (q - anchor).norm();
                    if d <= gate && best.is_none_or(|b| d < b.0) {
                        best = Some((d, q));
                    }
                }
            }
        }
    }
    best.map(|b| b.1)
}

/// Divides a point's range to give a lower bound on its distance to the ray
/// of any pixel one pixel further away: for rays `(a, b, 1)` the cross
/// product of two directions is at least their tangent-plane separation, and
/// each direction is at most as long as the one through the farthest image
/// corner.
fn ray_spread(k: &CameraIntrinsics) -> f64 {
    let ax = k.cx.abs().max((k.width as f64 - 1.0 - k.cx).abs()) / k.fx;
    let ay = k.cy.abs().max((k.height as f64 - 1.0 - k.cy).abs()) / k.fy;
    k.fx.max(k.fy) * (1.0 + ax * ax + ay * ay)
}

/// Relative Tikhonov damping; keeps directions the data does not constrain
/// (sliding along a plane) from receiving large updates.
const DAMPING: f64 = 1e-6;

/// The association gate halves every iteration down to this fraction of
/// its configured value.
const GATE_SHRINK_LIMIT: f64 = 8.0;

fn solve(a: &Associations) -> Option<(Vec3, Vec3)> {
    let mut ata = Matrix6::<f64>::zeros();
    let mut atb = Vector6::<f64>::zeros();
    for (c, n, b) in &a.rows {
        let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
        ata += row * row.transpose();
        atb += row * *b;
    }
    let lambda = DAMPING * ata.trace().max(f64::MIN_POSITIVE) / 6.0;
    ata += Matrix6::identity() * lambda;
    let x = ata.cholesky()?.solve(&atb);
    x.iter()
        .all(|v| v.is_finite())
        .then(|| (Vec3::new(x[0], x[1], x[2]), Vec3::new(x[3], x[4], x[5])))
}

/// Projective ICP: re-renders the model every iteration, linearizes the
/// point-to-plane error with small angles and halves steps that would
/// increase the residual.
pub fn icp_refine(
    mesh: &Mesh,
    pose0: &Pose,
    frame: &RgbdFrame,
    params: &VerifyParams,
) -> Result<IcpResult> {
    params.validate()?;
    let mut pose = *pose0;
    let (mut assoc, paired) = associate(mesh, &pose, frame, params, params.assoc_max_dist);
    if pose0.translation.z <= 0.0
        || assoc.valid_frac(paired) < params.min_valid_frac
        || assoc.rows.len() < 6
    {
        return Ok(IcpResult {
            pose: *pose0,
            residual: assoc.residual(),
            iterations: 0,
            refined: false,
        });
    }
    let mut iterations = 0;
    let mut gate = params.assoc_max_dist;
    for _ in 0..params.icp_max_iters {
        let next_gate = (gate / 2.0).max(params.assoc_max_dist / GATE_SHRINK_LIMIT);
        if iterations > 0 && next_gate < gate {
            gate = next_gate;
            assoc = associate(mesh, &pose, frame, params, gate).0;
        }
        let Some((mut omega, mut dt)) = solve(&assoc) else {
            break;
        };
        iterations += 1;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = pose.perturbed(&omega, &dt);
            let (a, _) = associate(mesh, &cand, frame, params, gate);
            if a.rows.len() >= 6 && a.residual() <= assoc.residual() {
                accepted = Some((cand, a));
                break;
            }
            omega /= 2.0;
            dt /= 2.0;
        }
        let Some((cand, a)) = accepted else {
            break;
        };
        let (deg, m) = cand.distance_to(&pose);
        pose = cand;
        assoc = a;
        if m < CONVERGED_M && deg < CONVERGED_DEG {
            break;
        }
    }
    Ok(IcpResult {
        pose,
        residual: assoc.residual(),
        iterations,
        refined: true,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Verification {
    pub depth_inlier_frac: f64,
    /// Mean angle between model and scene normals over inliers; NaN when no
    /// inlier has both normals.
    pub mean_normal_angle_deg: f64,
    /// Mean absolute RGB difference between model and scene over inliers,
    /// scaled to [0, 1]; NaN without inliers.
    pub mean_color_diff: f64,
    pub accepted: bool,
}

impl Verification {
    /// Depth inlier fraction discounted by color disagreement, so that
    /// geometrically equivalent poses of a symmetric shape are told apart by
    /// appearance. 0 without inliers.
    pub fn fit(&self) -> f64 {
        if self.mean_color_diff.is_nan() {
            0.0
        } else {
            self.depth_inlier_frac * (1.0 - self.mean_color_diff)
        }
    }
}

/// Depth and normal agreement between the model rendered at `pose` and the
/// scene.
pub fn verify(
    mesh: &Mesh,
    pose: &Pose,
    frame: &RgbdFrame,
    params: &VerifyParams,
) -> Result<Verification> {
    params.validate()?;
    let win = render_window(mesh, pose, &frame.intrinsics, 1);
    let wk = *win.view.intrinsics();
    let mut rendered = 0usize;
    let mut inliers = 0usize;
    let mut angle_sum = 0.0;
    let mut angle_n = 0usize;
    let mut color_sum = 0.0;
    for wy in 0..wk.height {
        for wx in 0..wk.width {
            let zm = win.view.frame.depth[wy * wk.width + wx];
            if zm <= 0.0 {
                continue;
            }
            rendered += 1;
            let (u, v) = (wx + win.x0, wy + win.y0);
            let zs = frame.depth_at(u, v);
            if zs <= 0.0 || (zs - zm).abs() > params.depth_inlier_tol {
                continue;
            }
            inliers += 1;
            let (cm, cs) = (
                win.view.frame.color[wy * wk.width + wx],
                frame.color[v * frame.width() + u],
            );
            color_sum += cm
                .iter()
                .zip(&cs)
                .map(|(a, b)| a.abs_diff(*b) as f64)
                .sum::<f64>()
                / (3.0 * 255.0);
            if let (Some(nm), Some(ns)) = (win.view.frame.normal_at(wx, wy), frame.normal_at(u, v))
            {
                angle_sum += nm.dot(&ns).clamp(-1.0, 1.0).acos().to_degrees();
                angle_n += 1;
            }
        }
    }
    let depth_inlier_frac = if rendered == 0 {
        0.0
    } else {
        inliers as f64 / rendered as f64
    };
    let mean_normal_angle_deg = if angle_n == 0 {
        f64::NAN
    } else {
        angle_sum / angle_n as f64
    };
    let mean_color_diff = if inliers == 0 {
        f64::NAN
    } else {
        color_sum / inliers as f64
    };
    let accepted = depth_inlier_frac >= params.min_depth_inlier_frac
        && mean_normal_angle_deg <= params.normal_max_angle_deg;
    Ok(Verification {
        depth_inlier_frac,
        mean_normal_angle_deg,
        mean_color_diff,
        accepted,
    })
}

/// A refined and verified hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub object_id: u32,
    pub pose: Pose,
    /// Object centroid in the camera frame.
    pub centroid: Vec3,
    /// Vote score of the originating hypothesis.
    pub score: f64,
    pub refined: bool,
    pub verification: Verification,
}

/// Keeps accepted detections, then suppresses same-object detections whose
/// centroids lie within `nms_radius` of a better one: higher
/// [`Verification::fit`], then higher score.
pub fn select_detections(detections: &[Detection], nms_radius: f64) -> Vec<Detection> {
    let mut cands: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.verification.accepted)
        .collect();
    cands.sort_by(|a, b| {
        b.verification
            .fit()
            .total_cmp(&a.verification.fit())
            .then(b.score.total_cmp(&a.score))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in cands {
        if !kept
            .iter()
            .any(|k| k.object_id == d.object_id && (k.centroid - d.centroid).norm() < nms_radius)
        {
            kept.push(d.clone());
        }
    }
    kept
}

/// Keeps only the best accepted detection per object.
pub fn best_per_object(detections: &[Detection]) -> Vec<Detection> {
    select_detections(detections, f64::INFINITY)
}
