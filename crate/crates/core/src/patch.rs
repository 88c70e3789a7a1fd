//! Scale-invariant RGB-D patch extraction.
//!
//! A patch always covers the same metric extent `m`: its pixel size is
//! `m / z * f` for center depth `z`. Depth is expressed relative to the
//! center depth, clamped to `±m` and divided by `m`; color is mapped from
//! `[0, 255]` to `[-1, 1]`. Both are bilinearly resampled to 32×32.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::RgbdFrame;
use crate::geom::{backproject_unchecked, CameraIntrinsics, Vec3};
use crate::render::RenderedView;

pub const PATCH_SIZE: usize = 32;
pub const PATCH_CHANNELS: usize = 4;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;
/// Flattened patch length (channel-major: R, G, B, D planes).
pub const PATCH_LEN: usize = PATCH_CHANNELS * PATCH_PIXELS;
/// Output pixel that maps exactly onto the sampling position.
pub const PATCH_CENTER: usize = PATCH_SIZE / 2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    /// Metric patch extent in meters; also the depth clamp.
    pub m: f64,
    pub grid_step: usize,
    /// Minimum foreground fraction for codebook patches.
    pub fg_min_fraction: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            m: 0.05,
            grid_step: 8,
            fg_min_fraction: 0.5,
        }
    }
}

impl PatchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "patch size m = {} must be > 0",
                self.m
            )));
        }
        if self.grid_step == 0 {
            return Err(Error::InvalidParameter("grid_step must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.fg_min_fraction) {
            return Err(Error::InvalidParameter(
                "fg_min_fraction must be in [0, 1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    /// `PATCH_LEN` values in `[-1, 1]`, channel-major.
    pub data: Vec<f32>,
    pub center_point: Vec3,
    pub source_pixel: (usize, usize),
    /// Horizontal side of the sampled window in source pixels.
    pub footprint_px: f64,
    pub valid: bool,
}

impl Patch {
    #[inline]
    pub fn value(&self, channel: usize, x: usize, y: usize) -> f32 {
        self.data[channel * PATCH_PIXELS + y * PATCH_SIZE + x]
    }
}

/// 32×32 foreground bitmask, row-major, least significant bit first.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PatchMask(pub [u8; PATCH_PIXELS / 8]);

impl Default for PatchMask {
    fn default() -> Self {
        PatchMask([0; PATCH_PIXELS / 8])
    }
}

impl std::fmt::Debug for PatchMask {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "PatchMask({} set)", self.count())
    }
}

impl PatchMask {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        let i = y * PATCH_SIZE + x;
        self.0[i / 8] >> (i % 8) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        let i = y * PATCH_SIZE + x;
        if on {
            self.0[i / 8] |= 1 << (i % 8);
        } else {
            self.0[i / 8] &= !(1 << (i % 8));
        }
    }

    pub fn count(&self) -> usize {
        self.0.iter().map(|b| b.count_ones() as usize).sum()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / PATCH_PIXELS as f64
    }
}

/// Pixel side length of a patch of metric size `m` at depth `z`.
pub fn patch_pixel_size(z: f64, k: &CameraIntrinsics, m: f64) -> Result<f64> {
    if !(z > 0.0) {
        return Err(Error::InvalidDepth(z));
    }
    Ok(m / z * k.fx)
}

/// Source-image coordinate sampled by output index `i`.
#[inline]
fn source_coord(center: usize, i: usize, side: f64) -> f64 {
    center as f64 + (i as f64 - PATCH_CENTER as f64) * side / PATCH_SIZE as f64
}

/// Clamped bilinear footprint: (lo, hi, fraction toward hi).
#[inline]
fn footprint(x: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let x = x.clamp(0.0, max);
    let x0 = x.floor();
    let lo = x0 as usize;
    (lo, (lo + 1).min(len - 1), x - x0)
}

/// Extracts the patch centered at `(u, v)`; `Ok(None)` when the center has
/// no depth.
pub fn extract_patch(
    frame: &RgbdFrame,
    u: usize,
    v: usize,
    cfg: &PatchConfig,
) -> Result<Option<Patch>> {
    if u >= frame.width() || v >= frame.height() {
        return Err(Error::InvalidParameter(format!(
            "pixel ({u}, {v}) outside {}x{} frame",
            frame.width(),
            frame.height()
        )));
    }
    let z = frame.depth_at(u, v);
    if !(z > 0.0) {
        return Ok(None);
    }
    Ok(Some(extract_at_depth(frame, u, v, z, cfg)))
}

fn extract_at_depth(frame: &RgbdFrame, u: usize, v: usize, z: f64, cfg: &PatchConfig) -> Patch {
    let k = &frame.intrinsics;
    let side_x = cfg.m / z * k.fx;
    let side_y = cfg.m / z * k.fy;
    let (w, h) = (frame.width(), frame.height());
    let xs: Vec<(usize, usize, f64)> = (0..PATCH_SIZE)
        .map(|i| footprint(source_coord(u, i, side_x), w))
        .collect();
    let mut data = vec![0f32; PATCH_LEN];
    for j in 0..PATCH_SIZE {
        let (y0, y1, ty) = footprint(source_coord(v, j, side_y), h);
        for (i, &(x0, x1, tx)) in xs.iter().enumerate() {
            let taps = [
                (y0 * w + x0, (1.0 - tx) * (1.0 - ty)),
                (y0 * w + x1, tx * (1.0 - ty)),
                (y1 * w + x0, (1.0 - tx) * ty),
                (y1 * w + x1, tx * ty),
            ];
            let mut rgb = [0f64; 3];
            let mut depth = 0f64;
            let mut depth_weight = 0f64;
            for &(idx, wt) in &taps {
                let c = frame.color[idx];
                for ch in 0..3 {
                    rgb[ch] += wt * c[ch] as f64;
                }
                let d = frame.depth[idx];
                if d > 0.0 && wt > 0.0 {
                    depth += wt * (d - z);
                    depth_weight += wt;
                }
            }
            let o = j * PATCH_SIZE + i;
            for ch in 0..3 {
                data[ch * PATCH_PIXELS + o] = (rgb[ch] / 127.5 - 1.0).clamp(-1.0, 1.0) as f32;
            }
            data[3 * PATCH_PIXELS + o] = if depth_weight > 0.0 {
                ((depth / depth_weight).clamp(-cfg.m, cfg.m) / cfg.m) as f32
            } else {
                0.0
            };
        }
    }
    Patch {
        data,
        center_point: backproject_unchecked(u as f64, v as f64, z, k),
        source_pixel: (u, v),
        footprint_px: side_x,
        valid: true,
    }
}

/// Nearest-neighbor resample of a full-resolution mask into patch space.
fn extract_mask(
    mask: &[bool],
    k: &CameraIntrinsics,
    u: usize,
    v: usize,
    z: f64,
    m: f64,
) -> PatchMask {
    let side_x = m / z * k.fx;
    let side_y = m / z * k.fy;
    let nearest = |c: f64, len: usize| c.round().clamp(0.0, (len - 1) as f64) as usize;
    let mut out = PatchMask::default();
    for j in 0..PATCH_SIZE {
        let y = nearest(source_coord(v, j, side_y), k.height);
        for i in 0..PATCH_SIZE {
            let x = nearest(source_coord(u, i, side_x), k.width);
            if mask[y * k.width + x] {
                out.set(i, j, true);
            }
        }
    }
    out
}

fn grid(frame: &RgbdFrame, step: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
    (0..frame.height())
        .step_by(step)
        .flat_map(move |v| (0..frame.width()).step_by(step).map(move |u| (u, v)))
}

/// Patches on a regular grid, row-major, skipping pixels without depth.
pub fn sample_scene(frame: &RgbdFrame, cfg: &PatchConfig) -> Vec<Patch> {
    grid(frame, cfg.grid_step.max(1))
        .filter_map(|(u, v)| {
            let z = frame.depth_at(u, v);
            (z > 0.0).then(|| extract_at_depth(frame, u, v, z, cfg))
        })
        .collect()
}

/// Grid patches of a synthetic view whose foreground fraction reaches
/// `fg_min_fraction`, with their patch-resolution foreground masks.
pub fn sample_view_patches(view: &RenderedView, cfg: &PatchConfig) -> Vec<(Patch, PatchMask)> {
    let frame = &view.frame;
    grid(frame, cfg.grid_step.max(1))
        .filter_map(|(u, v)| {
            let z = frame.depth_at(u, v);
            if !(z > 0.0) {
                return None;
            }
            let mask = extract_mask(&view.mask, &frame.intrinsics, u, v, z, cfg.m);
            (mask.fraction() >= cfg.fg_min_fraction)
                .then(|| (extract_at_depth(frame, u, v, z, cfg), mask))
        })
        .collect()
}

/// The six orderings of the color channels; output channel `c` reads input
/// channel `PERMUTATIONS[p][c]`.
pub const PERMUTATIONS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augmentation {
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    /// Index into [`PERMUTATIONS`].
    pub permutation: usize,
}

impl Augmentation {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            flip_horizontal: rng.random_bool(0.5),
            flip_vertical: rng.random_bool(0.5),
            permutation: rng.random_range(0..PERMUTATIONS.len()),
        }
    }

    pub fn apply(&self, patch: &Patch) -> Patch {
        let perm = PERMUTATIONS[self.permutation];
        let mut data = vec![0f32; PATCH_LEN];
        for c in 0..PATCH_CHANNELS {
            let src_c = if c < 3 { perm[c] } else { 3 };
            for y in 0..PATCH_SIZE {
                let sy = if self.flip_vertical {
                    PATCH_SIZE - 1 - y
                } else {
                    y
                };
                for x in 0..PATCH_SIZE {
                    let sx = if self.flip_horizontal {
                        PATCH_SIZE - 1 - x
                    } else {
                        x
                    };
                    data[c * PATCH_PIXELS + y * PATCH_SIZE + x] =
                        patch.data[src_c * PATCH_PIXELS + sy * PATCH_SIZE + sx];
                }
            }
        }
        Patch {
            data,
            ..patch.clone()
        }
    }
}

/// Random flip + color-channel permutation drawn from `seed`.
pub fn augment(patch: &Patch, seed: u64) -> Patch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Augmentation::random(&mut rng).apply(patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Pose;
    use crate::mesh::cube;
    use crate::render::render;

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::default()
    }

    fn flat_frame(z: f64, color: [u8; 3]) -> RgbdFrame {
        let mut f = RgbdFrame::new(k());
        f.depth.iter_mut().for_each(|d| *d = z);
        f.color.iter_mut().for_each(|c| *c = color);
        f
    }

    #[test]
    fn pixel_size_examples() {
        assert!((patch_pixel_size(0.5, &k(), 0.05).unwrap() - 57.5).abs() < 1e-12);
        let z = 0.05 * 575.0;
        assert!((patch_pixel_size(z, &k(), 0.05).unwrap() - 1.0).abs() < 1e-12);
        let a = patch_pixel_size(0.4, &k(), 0.05).unwrap();
        let b = patch_pixel_size(0.8, &k(), 0.05).unwrap();
        assert_eq!(a, 2.0 * b);
        assert!(matches!(
            patch_pixel_size(0.0, &k(), 0.05),
            Err(Error::InvalidDepth(_))
        ));
    }

    #[test]
    fn flat_plane_patch() {
        let f = flat_frame(0.7, [200, 100, 0]);
        let p = extract_patch(&f, 320, 240, &PatchConfig::default())
            .unwrap()
            .unwrap();
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                assert_eq!(p.value(3, x, y), 0.0);
                assert!((p.value(0, x, y) - (200.0f32 / 127.5 - 1.0)).abs() < 1e-6);
                assert!((p.value(2, x, y) + 1.0).abs() < 1e-6);
            }
        }
        assert!((p.center_point - Vec3::new(0.0, 0.0, 0.7)).norm() < 1e-12);
    }

    #[test]
    fn depth_step_clamps_to_one() {
        let mut f = flat_frame(0.5, [0, 0, 0]);
        for v in 0..480 {
            for u in 330..640 {
                let i = f.index(u, v);
                f.depth[i] = 0.7;
            }
        }
        let p = extract_patch(&f, 320, 240, &PatchConfig::default())
            .unwrap()
            .unwrap();
        // Columns sampling x >= 331 lie entirely in the stepped region.
        assert_eq!(p.value(3, 31, 10), 1.0);
        assert_eq!(p.value(3, 0, 10), 0.0);
    }

    #[test]
    fn missing_center_depth_skips() {
        let mut f = flat_frame(0.5, [0, 0, 0]);
        let i = f.index(10, 10);
        f.depth[i] = 0.0;
        assert!(extract_patch(&f, 10, 10, &PatchConfig::default())
            .unwrap()
            .is_none());
        assert!(extract_patch(&f, 640, 10, &PatchConfig::default()).is_err());
    }

    #[test]
    fn holes_map_to_zero_and_borders_replicate() {
        let mut f = flat_frame(0.5, [255, 255, 255]);
        for v in 0..480 {
            for u in 0..300 {
                let i = f.index(u, v);
                f.depth[i] = 0.0;
            }
        }
        // Near the image corner most of the window lies outside the frame.
        let p = extract_patch(&f, 639, 479, &PatchConfig::default())
            .unwrap()
            .unwrap();
        assert!(p
            .data
            .iter()
            .all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
        let q = extract_patch(&f, 310, 240, &PatchConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(q.value(3, 0, 16), 0.0);
        assert_eq!(q.value(0, 0, 16), 1.0);
    }

    #[test]
    fn cube_corner_profile() {
        // Cube corner pointing at the camera: each face is a plane whose depth
        // along a pixel ray is solved analytically.
        let side = 0.2;
        let rot = nalgebra::UnitQuaternion::rotation_between(
            &Vec3::new(1.0, 1.0, 1.0).normalize(),
            &Vec3::new(0.0, 0.0, -1.0),
        )
        .unwrap();
        let corner_dist = side / 2.0 * 3f64.sqrt();
        let center = Vec3::new(0.0, 0.0, 0.5 + corner_dist);
        let pose = Pose::new(rot, center);
        let view = render(&cube(side), &pose, &k());
        let cfg = PatchConfig::default();
        let (u, v) = (320usize, 240usize);
        let z = view.frame.depth_at(u, v);
        assert!((z - 0.5).abs() < 1e-6);
        let p = extract_patch(&view.frame, u, v, &cfg).unwrap().unwrap();

        let plane_depth = |px: f64, py: f64| -> f64 {
            let dir = Vec3::new((px - 320.0) / 575.0, (py - 240.0) / 575.0, 1.0);
            let mut best = f64::INFINITY;
            for axis in 0..3 {
                let mut n_obj = Vec3::zeros();
                n_obj[axis] = 1.0;
                let n = rot * n_obj;
                let point = center + n * (side / 2.0);
                let t = n.dot(&point) / n.dot(&dir);
                if t > 0.0 {
                    // Visible faces are the front-most hits that stay on the cube.
                    let local = pose.inverse().transform_point(&(dir * t));
                    if local.iter().all(|c| c.abs() <= side / 2.0 + 1e-9) {
                        best = best.min(t);
                    }
                }
            }
            best
        };
        let side_px = patch_pixel_size(z, &k(), cfg.m).unwrap();
        let mut max_err = 0.0f64;
        for j in 0..PATCH_SIZE {
            for i in 0..PATCH_SIZE {
                let px = u as f64 + (i as f64 - 16.0) * side_px / 32.0;
                let py = v as f64 + (j as f64 - 16.0) * side_px / 32.0;
                let d = plane_depth(px, py);
                let expected = ((d - z).clamp(-cfg.m, cfg.m) / cfg.m) as f32;
                max_err = max_err.max((p.value(3, i, j) - expected).abs() as f64);
            }
        }
        assert!(max_err < 2e-2, "max err {max_err}");
    }

    #[test]
    fn grid_counts() {
        let f = flat_frame(1.0, [1, 2, 3]);
        assert_eq!(sample_scene(&f, &PatchConfig::default()).len(), 4800);
        let empty = RgbdFrame::new(k());
        assert!(sample_scene(&empty, &PatchConfig::default()).is_empty());
    }

    #[test]
    fn half_plane_count_matches_valid_grid_points() {
        let mut f = flat_frame(1.0, [1, 2, 3]);
        for v in 0..480 {
            for u in 0..640 {
                if u + v < 500 {
                    let i = f.index(u, v);
                    f.depth[i] = 0.0;
                }
            }
        }
        let expected = (0..480)
            .step_by(8)
            .flat_map(|v| (0..640).step_by(8).map(move |u| (u, v)))
            .filter(|&(u, v)| u + v >= 500)
            .count();
        assert_eq!(sample_scene(&f, &PatchConfig::default()).len(), expected);
    }

    #[test]
    fn row_major_order() {
        let f = flat_frame(1.0, [1, 2, 3]);
        let cfg = PatchConfig {
            grid_step: 100,
            ..Default::default()
        };
        let px: Vec<_> = sample_scene(&f, &cfg)
            .iter()
            .map(|p| p.source_pixel)
            .collect();
        assert_eq!(px[0], (0, 0));
        assert_eq!(px[1], (100, 0));
        assert_eq!(px[7], (0, 100));
    }

    fn cube_view(dist: f64) -> RenderedView {
        let pose = Pose::new(
            nalgebra::UnitQuaternion::from_euler_angles(0.5, 0.6, 0.1),
            Vec3::new(0.0, 0.0, dist),
        );
        render(&cube(0.12), &pose, &k())
    }

    #[test]
    fn view_patch_thresholds() {
        let view = cube_view(0.6);
        let all = PatchConfig {
            fg_min_fraction: 0.0,
            ..Default::default()
        };
        assert_eq!(
            sample_view_patches(&view, &all).len(),
            sample_scene(&view.frame, &all).len()
        );

        // Independent recount of the mask fraction at full resolution.
        let cfg = PatchConfig::default();
        let mut expected = 0;
        for v in (0..480).step_by(8) {
            for u in (0..640).step_by(8) {
                let z = view.frame.depth_at(u, v);
                if z <= 0.0 {
                    continue;
                }
                let side = 0.05 / z * 575.0;
                let mut on = 0;
                for j in 0..32 {
                    for i in 0..32 {
                        let x = (u as f64 + (i as f64 - 16.0) * side / 32.0)
                            .round()
                            .clamp(0.0, 639.0);
                        let y = (v as f64 + (j as f64 - 16.0) * side / 32.0)
                            .round()
                            .clamp(0.0, 479.0);
                        if view.frame.depth_at(x as usize, y as usize) > 0.0 {
                            on += 1;
                        }
                    }
                }
                if on as f64 / 1024.0 >= 0.5 {
                    expected += 1;
                }
            }
        }
        let got = sample_view_patches(&view, &cfg);
        assert_eq!(got.len(), expected);
        assert!(expected > 20);
        let empty = render(
            &cube(0.1),
            &Pose::from_translation(Vec3::new(0.0, 0.0, -1.0)),
            &k(),
        );
        assert!(sample_view_patches(&empty, &cfg).is_empty());
    }

    #[test]
    fn scale_invariance() {
        let near = cube_view(0.5);
        let far = cube_view(1.0);
        let cfg = PatchConfig::default();
        let pose_n = near.pose;
        let pose_f = far.pose;
        let mut diffs = Vec::new();
        for v in (150..330).step_by(10) {
            for u in (230..410).step_by(10) {
                let Some(pn) = near.frame.point_at(u, v) else {
                    continue;
                };
                let obj = pose_n.inverse().transform_point(&pn);
                let pf = pose_f.transform_point(&obj);
                let Some((uf, vf)) = k().project_to_pixel(&pf) else {
                    continue;
                };
                let Some(a) = extract_patch(&near.frame, u, v, &cfg).unwrap() else {
                    continue;
                };
                let Some(b) = extract_patch(&far.frame, uf, vf, &cfg).unwrap() else {
                    continue;
                };
                let mad: f64 = a
                    .data
                    .iter()
                    .zip(&b.data)
                    .map(|(x, y)| (x - y).abs() as f64)
                    .sum::<f64>()
                    / PATCH_LEN as f64;
                diffs.push(mad);
            }
        }
        assert!(diffs.len() > 50);
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!(mean < 0.08, "mean abs diff {mean}");
    }

    #[test]
    fn augmentation_identities() {
        let f = cube_view(0.6);
        let p = extract_patch(&f.frame, 320, 240, &PatchConfig::default())
            .unwrap()
            .unwrap();
        assert_eq!(Augmentation::default().apply(&p), p);
        let h = Augmentation {
            flip_horizontal: true,
            ..Default::default()
        };
        assert_eq!(h.apply(&h.apply(&p)), p);
        let cycle = Augmentation {
            permutation: 4,
            ..Default::default()
        };
        assert_eq!(cycle.apply(&cycle.apply(&cycle.apply(&p))), p);
        assert_ne!(cycle.apply(&p), p);
        // Depth is flipped but never permuted.
        let all = Augmentation {
            flip_horizontal: true,
            flip_vertical: false,
            permutation: 5,
        };
        let q = all.apply(&p);
        for x in 0..32 {
            assert_eq!(q.value(3, x, 7), p.value(3, 31 - x, 7));
            assert_eq!(q.value(0, x, 7), p.value(2, 31 - x, 7));
        }
        assert_eq!(augment(&p, 11), augment(&p, 11));
    }

    #[test]
    fn extraction_is_deterministic_and_bounded() {
        let view = cube_view(0.45);
        let cfg = PatchConfig {
            grid_step: 3,
            ..Default::default()
        };
        let a = sample_scene(&view.frame, &cfg);
        let b = sample_scene(&view.frame, &cfg);
        assert_eq!(a, b);
        for p in &a {
            assert!(p.data.iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(p.value(3, PATCH_CENTER, PATCH_CENTER), 0.0);
            assert!(p.center_point.z > 0.0);
        }
    }
}
