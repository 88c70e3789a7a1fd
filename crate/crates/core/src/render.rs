//! Z-buffered software rasterizer for unlit, vertex-colored meshes.
//!
//! Pixels are sampled at integer coordinates (the same convention as
//! [`backproject`](crate::geom::backproject)). Depth and color are
//! interpolated perspective-correctly; coverage follows a consistent
//! edge-ownership rule so pixels on shared edges are drawn exactly once.

use crate::frame::RgbdFrame;
use crate::geom::{CameraIntrinsics, Pose, Vec3, ViewpointSet};
use crate::mesh::Mesh;

/// Near clipping plane in meters.
const NEAR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct RenderedView {
    pub frame: RgbdFrame,
    /// Foreground bits; set exactly where depth > 0.
    pub mask: Vec<bool>,
    /// Object-to-camera pose used for rendering.
    pub pose: Pose,
}

impl RenderedView {
    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.frame.intrinsics
    }

    pub fn foreground_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Color/depth/label target shared by all draw calls of one image.
pub struct RenderTarget {
    pub frame: RgbdFrame,
    /// 0 = background, otherwise the label passed to [`RenderTarget::draw`].
    pub labels: Vec<u32>,
    zbuf: Vec<f64>,
}

#[derive(Clone, Copy)]
struct ClipVertex {
    p: Vec3,
    c: [f64; 3],
}

impl RenderTarget {
    pub fn new(k: CameraIntrinsics) -> Self {
        let n = k.pixel_count();
        Self {
            frame: RgbdFrame::new(k),
            labels: vec![0; n],
            zbuf: vec![f64::INFINITY; n],
        }
    }

    pub fn draw(&mut self, mesh: &Mesh, pose: &Pose, label: u32) {
        let cam: Vec<Vec3> = mesh
            .vertices()
            .iter()
            .map(|v| pose.transform_point(v))
            .collect();
        let colors = mesh.colors();
        for tri in mesh.triangles() {
            let verts = tri.map(|i| ClipVertex {
                p: cam[i],
                c: colors[i].map(f64::from),
            });
            if verts.iter().all(|v| v.p.z >= NEAR) {
                self.raster(&verts, label);
                continue;
            }
            let poly = clip_near(&verts);
            for i in 1..poly.len().saturating_sub(1) {
                self.raster(&[poly[0], poly[i], poly[i + 1]], label);
            }
        }
    }

    fn raster(&mut self, verts: &[ClipVertex; 3], label: u32) {
        let k = self.frame.intrinsics;
        let screen = verts.map(|v| (k.fx * v.p.x / v.p.z + k.cx, k.fy * v.p.y / v.p.z + k.cy));
        let mut order = [0usize, 1, 2];
        let mut area = edge(screen[0], screen[1], screen[2]);
        if area == 0.0 || !area.is_finite() {
            return;
        }
        if area < 0.0 {
            order.swap(1, 2);
            area = -area;
        }
        let s = order.map(|i| screen[i]);
        let inv_z = order.map(|i| 1.0 / verts[i].p.z);
        let col = order.map(|i| verts[i].c);

        let min_x = s
            .iter()
            .map(|p| p.0)
            .fold(f64::INFINITY, f64::min)
            .ceil()
            .max(0.0);
        let max_x = s
            .iter()
            .map(|p| p.0)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor()
            .min(k.width as f64 - 1.0);
        let min_y = s
            .iter()
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min)
            .ceil()
            .max(0.0);
        let max_y = s
            .iter()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
            .floor()
            .min(k.height as f64 - 1.0);
        if min_x > max_x || min_y > max_y {
            return;
        }
        let owns = [
            owns_edge(s[1], s[2]),
            owns_edge(s[2], s[0]),
            owns_edge(s[0], s[1]),
        ];
        let width = k.width;

        for y in min_y as usize..=max_y as usize {
            for x in min_x as usize..=max_x as usize {
                let p = (x as f64, y as f64);
                let w = [
                    edge(s[1], s[2], p),
                    edge(s[2], s[0], p),
                    edge(s[0], s[1], p),
                ];
                let inside = (0..3).all(|i| w[i] > 0.0 || (w[i] == 0.0 && owns[i]));
                if !inside {
                    continue;
                }
                let b = w.map(|wi| wi / area);
                let iz = b[0] * inv_z[0] + b[1] * inv_z[1] + b[2] * inv_z[2];
                if !(iz > 0.0) {
                    continue;
                }
                let z = 1.0 / iz;
                let idx = y * width + x;
                if z >= self.zbuf[idx] {
                    continue;
                }
                self.zbuf[idx] = z;
                self.frame.depth[idx] = z;
                let mut rgb = [0u8; 3];
                for (c, out) in rgb.iter_mut().enumerate() {
                    let v = (b[0] * col[0][c] * inv_z[0]
                        + b[1] * col[1][c] * inv_z[1]
                        + b[2] * col[2][c] * inv_z[2])
                        * z;
                    *out = v.round().clamp(0.0, 255.0) as u8;
                }
                self.frame.color[idx] = rgb;
                self.labels[idx] = label;
            }
        }
    }

    pub fn into_view(self, pose: Pose) -> RenderedView {
        let mask = self.frame.depth.iter().map(|&d| d > 0.0).collect();
        RenderedView {
            frame: self.frame,
            mask,
            pose,
        }
    }
}

#[inline]
fn edge(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> f64 {
    (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0)
}

/// Of the two opposite traversals of an edge, exactly one owns the pixels
/// lying on it.
#[inline]
fn owns_edge(a: (f64, f64), b: (f64, f64)) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    dy > 0.0 || (dy == 0.0 && dx > 0.0)
}

/// Sutherland-Hodgman clip of a triangle against `z >= NEAR`.
fn clip_near(tri: &[ClipVertex; 3]) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(4);
    for i in 0..3 {
        let a = tri[i];
        let b = tri[(i + 1) % 3];
        let (ina, inb) = (a.p.z >= NEAR, b.p.z >= NEAR);
        if ina {
            out.push(a);
        }
        if ina != inb {
            let t = (NEAR - a.p.z) / (b.p.z - a.p.z);
            let c = std::array::from_fn(|j| a.c[j] + t * (b.c[j] - a.c[j]));
            out.push(ClipVertex {
                p: a.p + (b.p - a.p) * t,
                c,
            });
        }
    }
    out
}

/// Renders `mesh` at `pose` (object to camera).
pub fn render(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics) -> RenderedView {
    let mut target = RenderTarget::new(*k);
    target.draw(mesh, pose, 1);
    target.into_view(*pose)
}

/// A render restricted to a pixel window of a larger image.
#[derive(Clone, Debug)]
pub struct WindowView {
    /// Rendered window; its intrinsics are those of the crop.
    pub view: RenderedView,
    /// Full-image pixel of the window's top-left corner.
    pub x0: usize,
    pub y0: usize,
}

impl WindowView {
    /// Model depth at a full-image pixel; 0 outside the window.
    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        let k = self.view.intrinsics();
        if u < self.x0 || v < self.y0 || u - self.x0 >= k.width || v - self.y0 >= k.height {
            return 0.0;
        }
        self.view.frame.depth[(v - self.y0) * k.width + (u - self.x0)]
    }
}

/// Renders only the bounding box of the projected mesh, grown by `pad`
/// pixels and clipped to the image. Pixels outside the window are
/// background in the full render. Falls back to the whole image when part
/// of the mesh is behind the near plane.
pub fn render_window(mesh: &Mesh, pose: &Pose, k: &CameraIntrinsics, pad: usize) -> WindowView {
    let (mut lo, mut hi) = (
        (f64::INFINITY, f64::INFINITY),
        (f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    let mut full = false;
    for v in mesh.vertices() {
        let p = pose.transform_point(v);
        if p.z < NEAR {
            full = true;
            break;
        }
        let (u, w) = (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy);
        lo = (lo.0.min(u), lo.1.min(w));
        hi = (hi.0.max(u), hi.1.max(w));
    }
    let (x0, y0, x1, y1) = if full {
        (0, 0, k.width, k.height)
    } else {
        let clip = |a: f64, n: usize| a.clamp(0.0, n as f64) as usize;
        let p = pad as f64;
        (
            clip(lo.0.floor() - p, k.width),
            clip(lo.1.floor() - p, k.height),
            clip(hi.0.ceil() + p + 1.0, k.width),
            clip(hi.1.ceil() + p + 1.0, k.height),
        )
    };
    let crop = CameraIntrinsics {
        cx: k.cx - x0 as f64,
        cy: k.cy - y0 as f64,
        width: x1.saturating_sub(x0),
        height: y1.saturating_sub(y0),
        ..*k
    };
    WindowView {
        view: render(mesh, pose, &crop),
        x0,
        y0,
    }
}

/// Renders every view of `views`, in view order.
pub fn render_viewset(
    mesh: &Mesh,
    views: &ViewpointSet,
    k: &CameraIntrinsics,
) -> Vec<RenderedView> {
    render_views(mesh, views, k).collect()
}

/// Lazy variant of [`render_viewset`]; avoids holding all views in memory.
pub fn render_views<'a>(
    mesh: &'a Mesh,
    views: &'a ViewpointSet,
    k: &'a CameraIntrinsics,
) -> impl Iterator<Item = RenderedView> + 'a {
    views.poses.iter().map(move |p| render(mesh, p, k))
}

/// Renders several meshes into one frame. Labels are `index + 1`.
pub fn render_scene(items: &[(&Mesh, Pose)], k: &CameraIntrinsics) -> (RgbdFrame, Vec<u32>) {
    let mut target = RenderTarget::new(*k);
    for (i, (mesh, pose)) in items.iter().enumerate() {
        target.draw(mesh, pose, i as u32 + 1);
    }
    (target.frame, target.labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{backproject, sample_icosahedron_views};
    use crate::mesh::{colored_icosphere, cube};
    use nalgebra::UnitQuaternion;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    #[test]
    fn cube_front_face_depth() {
        let view = render(
            &cube(1.0),
            &Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)),
            &k(),
        );
        let d = view.frame.depth_at(320, 240);
        assert!((d - 0.5).abs() < 1e-6, "{d}");
    }

    #[test]
    fn behind_camera_is_empty() {
        let view = render(
            &cube(0.2),
            &Pose::from_translation(Vec3::new(0.0, 0.0, -1.0)),
            &k(),
        );
        assert_eq!(view.foreground_count(), 0);
        assert!(view.frame.depth.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn constant_color_triangle() {
        let m = Mesh::new(
            vec![
                Vec3::new(-0.1, -0.1, 0.0),
                Vec3::new(0.1, -0.1, 0.0),
                Vec3::new(0.0, 0.1, 0.0),
            ],
            vec![[255, 0, 0]; 3],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let view = render(&m, &Pose::from_translation(Vec3::new(0.0, 0.0, 0.5)), &k());
        assert!(view.foreground_count() > 100);
        for (i, &fg) in view.mask.iter().enumerate() {
            if fg {
                assert_eq!(view.frame.color[i], [255, 0, 0]);
            }
        }
    }

    #[test]
    fn straddling_near_plane_is_clipped() {
        let m = Mesh::new(
            vec![
                Vec3::new(-0.1, 0.0, -0.5),
                Vec3::new(0.1, 0.0, -0.5),
                Vec3::new(0.0, 0.05, 0.5),
            ],
            vec![[9, 9, 9]; 3],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let view = render(&m, &Pose::identity(), &k());
        assert!(view.frame.depth.iter().all(|d| d.is_finite() && *d >= 0.0));
    }

    /// Analytic nearest intersection of a pixel ray with an axis-aligned box.
    fn ray_box(dir: Vec3, lo: Vec3, hi: Vec3) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-15 {
                if 0.0 < lo[a] || 0.0 > hi[a] {
                    return None;
                }
                continue;
            }
            let (mut ta, mut tb) = (lo[a] / dir[a], hi[a] / dir[a]);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some(t0)
    }

    #[test]
    fn cube_depth_matches_ray_cast() {
        // Translate-only pose keeps the box axis-aligned in the camera frame.
        let c = Vec3::new(0.05, -0.03, 0.6);
        let side = 0.2;
        let view = render(&cube(side), &Pose::from_translation(c), &k());
        let lo = c - Vec3::repeat(side / 2.0);
        let hi = c + Vec3::repeat(side / 2.0);
        let mut checked = 0;
        for v in 0..480 {
            for u in 0..640 {
                if !view.mask[v * 640 + u] {
                    continue;
                }
                let dir = backproject(u as f64, v as f64, 1.0, &k()).unwrap();
                if let Some(t) = ray_box(dir, lo, hi) {
                    assert!((view.frame.depth_at(u, v) - t * dir.z).abs() < 1e-5);
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn rotated_render_lies_on_surface() {
        let mesh = cube(0.1);
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.4, -0.7, 0.2),
            Vec3::new(0.02, 0.01, 0.5),
        );
        let view = render(&mesh, &pose, &k());
        let inv = pose.inverse();
        let mut n = 0;
        for v in (0..480).step_by(3) {
            for u in (0..640).step_by(3) {
                if let Some(p) = view.frame.point_at(u, v) {
                    assert!(mesh.distance_to_surface(&inv.transform_point(&p)) < 1e-3);
                    n += 1;
                }
            }
        }
        assert!(n > 100);
        for (m, d) in view.mask.iter().zip(&view.frame.depth) {
            assert_eq!(*m, *d > 0.0);
        }
    }

    #[test]
    fn viewset_render_is_deterministic() {
        let mesh = cube(0.1);
        let views = sample_icosahedron_views(0, 0.6, 1).unwrap();
        let a = render_viewset(&mesh, &views, &k());
        let b = render_viewset(&mesh, &views, &k());
        assert_eq!(a.len(), 12);
        for (x, y) in a.iter().zip(&b) {
            assert!(x.foreground_count() > 0);
            assert_eq!(x.frame, y.frame);
            assert_eq!(x.mask, y.mask);
            let r = views.radius;
            let dia = mesh.diameter();
            assert!(x
                .frame
                .depth
                .iter()
                .filter(|&&d| d > 0.0)
                .all(|&d| d >= r - dia && d <= r + dia));
        }
    }

    #[test]
    fn sphere_silhouette_is_view_invariant() {
        let mesh = colored_icosphere(0.06, 3, 1);
        let views = sample_icosahedron_views(1, 0.6, 2).unwrap();
        let counts: Vec<usize> = render_views(&mesh, &views, &k())
            .map(|v| v.foreground_count())
            .collect();
        let max = *counts.iter().max().unwrap() as f64;
        let min = *counts.iter().min().unwrap() as f64;
        assert!((max - min) / max < 0.05, "{min} {max}");
    }

    #[test]
    fn scene_labels_follow_occlusion() {
        let a = cube(0.1);
        let b = cube(0.1);
        let (frame, labels) = render_scene(
            &[
                (&a, Pose::from_translation(Vec3::new(0.0, 0.0, 0.8))),
                (&b, Pose::from_translation(Vec3::new(0.03, 0.0, 0.5))),
            ],
            &k(),
        );
        assert_eq!(labels[240 * 640 + 320], 2);
        assert!((frame.depth_at(320, 240) - 0.45).abs() < 1e-9);
        assert!(labels.contains(&1));
    }
}
