//! Constrained 6D vote casting and vote filtering into pose hypotheses.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::codebook::{Codebook, SearchMode};
use crate::descriptor::Regressor;
use crate::error::{Error, Result};
use crate::geom::{canonical_quat, quat_geodesic_deg, CameraIntrinsics, Pose, Vec3};
use crate::patch::{Patch, PATCH_CENTER, PATCH_SIZE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VoteParams {
    /// Neighbors retrieved per scene patch.
    pub k: usize,
    /// Votes are cast only for descriptor distances strictly below this.
    pub tau: f64,
    pub cell_px: usize,
    /// Cells with fewer votes are suppressed before smoothing.
    pub min_cell_votes: usize,
    pub ms_trans_radius: f64,
    pub ms_rot_radius_deg: f64,
    pub ms_max_iters: usize,
    pub ms_eps_m: f64,
    pub ms_eps_deg: f64,
    pub search: SearchMode,
    /// Rotate each stored vote from the codebook's on-axis viewing
    /// direction into the direction of the ray through the voted centroid.
    pub ray_correction: bool,
}

impl Default for VoteParams {
    fn default() -> Self {
        Self {
            k: 3,
            tau: 10.0,
            cell_px: 5,
            min_cell_votes: 3,
            ms_trans_radius: 0.025,
            ms_rot_radius_deg: 7.0,
            ms_max_iters: 50,
            ms_eps_m: 1e-4,
            ms_eps_deg: 0.05,
            search: SearchMode::Approx,
            ray_correction: true,
        }
    }
}

impl VoteParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.ms_trans_radius,
            self.ms_rot_radius_deg,
            self.ms_eps_m,
            self.ms_eps_deg,
        ];
        if self.k == 0 || self.cell_px == 0 || self.min_cell_votes == 0 || self.ms_max_iters == 0 {
            return Err(Error::InvalidParameter(
                "vote counts must be positive".into(),
            ));
        }
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(
                "mean-shift radii and tolerances must be positive".into(),
            ));
        }
        if self.tau.is_nan() || self.tau < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "tau must be non-negative, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// One 6D vote in the scene camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Vote {
    pub centroid: Vec3,
    pub orientation: UnitQuaternion<f64>,
    /// `exp(-distance)`.
    pub weight: f64,
    pub distance: f32,
    pub object_id: u32,
    /// Codebook entry that produced the vote.
    pub entry: u32,
    /// Scene pixel of the voting patch.
    pub source_pixel: (usize, usize),
    /// Side length in pixels of the voting patch window.
    pub footprint_px: f64,
}

/// A pose hypothesis from vote filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub object_id: u32,
    pub centroid: Vec3,
    pub orientation: UnitQuaternion<f64>,
    pub score: f64,
    /// Indices into the vote list.
    pub support: Vec<u32>,
}

impl Hypothesis {
    /// Object-to-camera pose, given the object centroid in model coordinates.
    pub fn pose(&self, model_centroid: &Vec3) -> Pose {
        let t = self.centroid - self.orientation * model_centroid;
        Pose::new(self.orientation, t)
    }
}

/// Minimal rotation taking the optical axis onto the direction of `p`.
fn ray_rotation(p: &Vec3) -> UnitQuaternion<f64> {
    UnitQuaternion::rotation_between(&Vec3::z(), p).unwrap_or_else(UnitQuaternion::identity)
}

/// Global vote from a scene point and a codebook entry.
fn vote_from_entry(
    s: &Vec3,
    offset: &Vec3,
    q: &UnitQuaternion<f64>,
    correct: bool,
) -> (Vec3, UnitQuaternion<f64>) {
    if !correct {
        return (s + offset, *q);
    }
    let mut c = s + offset;
    let mut rot = ray_rotation(&c);
    for _ in 0..2 {
        c = s + rot * offset;
        rot = ray_rotation(&c);
    }
    (s + rot * offset, canonical_quat(rot * q))
}

/// Encodes every scene patch, retrieves `k` neighbors and casts one vote per
/// neighbor whose descriptor distance is below `tau`.
pub fn cast_votes(
    patches: &[Patch],
    codebook: &Codebook,
    reg: &Regressor,
    params: &VoteParams,
) -> Result<Vec<Vote>> {
    params.validate()?;
    if codebook.feature_dim() != reg.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.feature_dim(),
            actual: reg.feature_dim(),
        });
    }
    let descriptors = reg.encode_batch(patches)?;
    cast_votes_from_descriptors(patches, &descriptors, codebook, params)
}

/// Voting stage for already encoded patches.
pub fn cast_votes_from_descriptors(
    patches: &[Patch],
    descriptors: &[Vec<f32>],
    codebook: &Codebook,
    params: &VoteParams,
) -> Result<Vec<Vote>> {
    params.validate()?;
    let mut votes = Vec::new();
    if codebook.is_empty() {
        return Ok(votes);
    }
    for (patch, d) in patches.iter().zip(descriptors) {
        let s = patch.center_point;
        let footprint = patch.footprint_px;
        for (idx, dist) in codebook.knn(d, params.k, params.search)? {
            if !((dist as f64) < params.tau) {
                continue;
            }
            let e = codebook.entry(idx);
            let (centroid, orientation) = vote_from_entry(
                &s,
                &e.vote.offset,
                &e.vote.orientation,
                params.ray_correction,
            );
            votes.push(Vote {
                centroid,
                orientation,
                weight: (-(dist as f64)).exp(),
                distance: dist,
                object_id: e.object_id,
                entry: idx as u32,
                source_pixel: patch.source_pixel,
                footprint_px: footprint,
            });
        }
    }
    Ok(votes)
}

/// Per-object grid of projected vote centroids.
struct CellGrid {
    gw: usize,
    gh: usize,
    weight: Vec<f64>,
    members: Vec<Vec<u32>>,
}

impl CellGrid {
    fn new(votes: &[Vote], ids: &[u32], k: &CameraIntrinsics, cell: usize) -> Self {
        let gw = k.width.div_ceil(cell);
        let gh = k.height.div_ceil(cell);
        let mut g = Self {
            gw,
            gh,
            weight: vec![0.0; gw * gh],
            members: vec![Vec::new(); gw * gh],
        };
        for &i in ids {
            let v = &votes[i as usize];
            if let Some((u, w)) = k.project_to_pixel(&v.centroid) {
                let c = (w / cell) * gw + u / cell;
                g.weight[c] += v.weight;
                g.members[c].push(i);
            }
        }
        g
    }

    /// Suppression, 3×3 triangle smoothing and strict local maxima. Ties
    /// between equal neighbors go to the lower cell index.
    fn maxima(&self, min_votes: usize) -> Vec<usize> {
        let (gw, gh) = (self.gw, self.gh);
        let kept: Vec<f64> = self
            .weight
            .iter()
            .zip(&self.members)
            .map(|(&w, m)| if m.len() >= min_votes { w } else { 0.0 })
            .collect();
        let tap = [0.25, 0.5, 0.25];
        let mut tmp = vec![0.0; gw * gh];
        for y in 0..gh {
            for x in 0..gw {
                let mut s = 0.0;
                for (d, t) in tap.iter().enumerate() {
                    let xx = x as isize + d as isize - 1;
                    if xx >= 0 && (xx as usize) < gw {
                        s += t * kept[y * gw + xx as usize];
                    }
                }
                tmp[y * gw + x] = s;
            }
        }
        let mut smooth = vec![0.0; gw * gh];
        for y in 0..gh {
            for x in 0..gw {
                let mut s = 0.0;
                for (d, t) in tap.iter().enumerate() {
                    let yy = y as isize + d as isize - 1;
                    if yy >= 0 && (yy as usize) < gh {
                        s += t * tmp[yy as usize * gw + x];
                    }
                }
                smooth[y * gw + x] = s;
            }
        }
        let mut out = Vec::new();
        for y in 0..gh {
            for x in 0..gw {
                let c = y * gw + x;
                let v = smooth[c];
                if v <= 0.0 {
                    continue;
                }
                let mut is_max = true;
                'nb: for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx as usize >= gw || ny as usize >= gh {
                            continue;
                        }
                        let n = ny as usize * gw + nx as usize;
                        let other = smooth[n];
                        if other > v || (other == v && n < c) {
                            is_max = false;
                            break 'nb;
                        }
                    }
                }
                if is_max {
                    out.push(c);
                }
            }
        }
        out
    }

    fn neighborhood(&self, c: usize) -> Vec<u32> {
        let (x, y) = ((c % self.gw) as isize, (c / self.gw) as isize);
        let mut out = Vec::new();
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < self.gw && (ny as usize) < self.gh {
                    out.extend_from_slice(&self.members[ny as usize * self.gw + nx as usize]);
                }
            }
        }
        out.sort_unstable();
        out
    }
}

fn weighted_mean(votes: &[Vote], ids: &[u32]) -> Option<Vec3> {
    let mut s = Vec3::zeros();
    let mut w = 0.0;
    for &i in ids {
        let v = &votes[i as usize];
        s += v.centroid * v.weight;
        w += v.weight;
    }
    (w > 0.0).then(|| s / w)
}

fn within_trans<'a>(
    votes: &'a [Vote],
    ids: &'a [u32],
    c: Vec3,
    r: f64,
) -> impl Iterator<Item = u32> + 'a {
    ids.iter()
        .copied()
        .filter(move |&i| (votes[i as usize].centroid - c).norm() <= r)
}

fn translation_shift(votes: &[Vote], ids: &[u32], seed: Vec3, p: &VoteParams) -> Option<Vec3> {
    let mut c = seed;
    if within_trans(votes, ids, c, p.ms_trans_radius)
        .next()
        .is_none()
    {
        // Empty kernel at the seed: restart from the closest vote.
        let nearest = ids.iter().min_by(|&&a, &&b| {
            (votes[a as usize].centroid - seed)
                .norm()
                .total_cmp(&(votes[b as usize].centroid - seed).norm())
        })?;
        c = votes[*nearest as usize].centroid;
    }
    for _ in 0..p.ms_max_iters {
        let inside: Vec<u32> = within_trans(votes, ids, c, p.ms_trans_radius).collect();
        let next = weighted_mean(votes, &inside)?;
        let step = (next - c).norm();
        c = next;
        if step < p.ms_eps_m {
            break;
        }
    }
    Some(c)
}

fn rot_dist(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    quat_geodesic_deg(a.quaternion(), b.quaternion())
}

/// Sign-aligned, weight-averaged, renormalized quaternion of in-kernel votes.
fn quat_mean(
    votes: &[Vote],
    ids: &[u32],
    reference: &UnitQuaternion<f64>,
    r: f64,
) -> Option<UnitQuaternion<f64>> {
    let mut acc = Quaternion::new(0.0, 0.0, 0.0, 0.0);
    let mut any = false;
    for &i in ids {
        let v = &votes[i as usize];
        if rot_dist(&v.orientation, reference) > r {
            continue;
        }
        let mut q = *v.orientation.quaternion();
        if q.coords.dot(&reference.coords) < 0.0 {
            q = -q;
        }
        acc += q * v.weight;
        any = true;
    }
    (any && acc.norm() > 0.0).then(|| canonical_quat(UnitQuaternion::from_quaternion(acc)))
}

fn rotation_shift(votes: &[Vote], ids: &[u32], p: &VoteParams) -> Option<UnitQuaternion<f64>> {
    // Seed from the vote with the largest weighted rotational neighborhood.
    let seed = ids
        .iter()
        .map(|&i| {
            let q = votes[i as usize].orientation;
            let mass: f64 = ids
                .iter()
                .filter(|&&j| rot_dist(&votes[j as usize].orientation, &q) <= p.ms_rot_radius_deg)
                .map(|&j| votes[j as usize].weight)
                .sum();
            (mass, i)
        })
        .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))?
        .1;
    let mut q = votes[seed as usize].orientation;
    for _ in 0..p.ms_max_iters {
        let next = quat_mean(votes, ids, &q, p.ms_rot_radius_deg)?;
        let step = rot_dist(&next, &q);
        q = next;
        if step < p.ms_eps_deg {
            break;
        }
    }
    Some(canonical_quat(q))
}

/// Grid accumulation, suppression and smoothing, local maxima, then mean
/// shift in translation followed by quaternion space. Modes are returned by
/// descending score.
pub fn filter_votes(
    votes: &[Vote],
    k: &CameraIntrinsics,
    params: &VoteParams,
) -> Result<Vec<Hypothesis>> {
    params.validate()?;
    let mut by_object: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, v) in votes.iter().enumerate() {
        by_object.entry(v.object_id).or_default().push(i as u32);
    }
    let mut modes: Vec<Hypothesis> = Vec::new();
    for (&object_id, ids) in &by_object {
        let grid = CellGrid::new(votes, ids, k, params.cell_px);
        let mut object_modes: Vec<Hypothesis> = Vec::new();
        for cell in grid.maxima(params.min_cell_votes) {
            let collected = grid.neighborhood(cell);
            let Some(seed) = weighted_mean(votes, &collected) else {
                continue;
            };
            let Some(t) = translation_shift(votes, &collected, seed, params) else {
                continue;
            };
            let mut remaining: Vec<u32> =
                within_trans(votes, &collected, t, params.ms_trans_radius).collect();
            while remaining.len() >= params.min_cell_votes {
                let Some(q) = rotation_shift(votes, &remaining, params) else {
                    break;
                };
                let (support, rest): (Vec<u32>, Vec<u32>) = remaining.iter().partition(|&&i| {
                    rot_dist(&votes[i as usize].orientation, &q) <= params.ms_rot_radius_deg
                });
                if support.is_empty() {
                    break;
                }
                remaining = rest;
                if support.len() < params.min_cell_votes {
                    continue;
                }
                let centroid = weighted_mean(votes, &support).unwrap_or(t);
                let score = support.iter().map(|&i| votes[i as usize].weight).sum();
                let h = Hypothesis {
                    object_id,
                    centroid,
                    orientation: q,
                    score,
                    support,
                };
                merge_mode(&mut object_modes, h, params);
            }
        }
        modes.extend(object_modes);
    }
    modes.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.object_id.cmp(&b.object_id))
    });
    Ok(modes)
}

/// Adds `h` unless an equivalent mode exists; the higher score wins.
fn merge_mode(modes: &mut Vec<Hypothesis>, h: Hypothesis, p: &VoteParams) {
    for m in modes.iter_mut() {
        if (m.centroid - h.centroid).norm() <= p.ms_trans_radius
            && rot_dist(&m.orientation, &h.orientation) <= p.ms_rot_radius_deg
        {
            if h.score > m.score {
                *m = h;
            }
            return;
        }
    }
    modes.push(h);
}

/// The `n` highest-weight votes as single-vote hypotheses; equal weights
/// keep vote order.
pub fn top_n_votes(votes: &[Vote], n: usize) -> Result<Vec<Hypothesis>> {
    if n == 0 {
        return Err(Error::InvalidParameter("N must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..votes.len()).collect();
    order.sort_by(|&a, &b| votes[b].weight.total_cmp(&votes[a].weight));
    Ok(order
        .into_iter()
        .take(n)
        .map(|i| {
            let v = &votes[i];
            Hypothesis {
                object_id: v.object_id,
                centroid: v.centroid,
                orientation: v.orientation,
                score: v.weight,
                support: vec![i as u32],
            }
        })
        .collect())
}

/// Paints each supporting vote's foreground mask, scaled to its patch
/// footprint, into per-object accumulators. The label image holds
/// `object_id + 1` of the strongest accumulator, or 0 where nothing was
/// painted.
pub fn segmentation_map(
    hypotheses: &[Hypothesis],
    votes: &[Vote],
    codebook: &Codebook,
    width: usize,
    height: usize,
) -> Vec<u32> {
    let mut acc: BTreeMap<u32, Vec<f32>> = BTreeMap::new();
    for h in hypotheses {
        let buf = acc
            .entry(h.object_id)
            .or_insert_with(|| vec![0.0; width * height]);
        for &vi in &h.support {
            let v = &votes[vi as usize];
            let mask = &codebook.entry(v.entry as usize).mask;
            let side = v.footprint_px;
            if !(side > 0.0) {
                continue;
            }
            let (u0, v0) = (v.source_pixel.0 as f64, v.source_pixel.1 as f64);
            let half = side / 2.0;
            let x_lo = (u0 - half).floor().max(0.0) as usize;
            let y_lo = (v0 - half).floor().max(0.0) as usize;
            let x_hi = ((u0 + half).ceil() as usize).min(width.saturating_sub(1));
            let y_hi = ((v0 + half).ceil() as usize).min(height.saturating_sub(1));
            let scale = PATCH_SIZE as f64 / side;
            for y in y_lo..=y_hi {
                let my = ((y as f64 - v0) * scale + PATCH_CENTER as f64).round();
                if my < 0.0 || my >= PATCH_SIZE as f64 {
                    continue;
                }
                for x in x_lo..=x_hi {
                    let mx = ((x as f64 - u0) * scale + PATCH_CENTER as f64).round();
                    if mx < 0.0 || mx >= PATCH_SIZE as f64 {
                        continue;
                    }
                    if mask.get(mx as usize, my as usize) {
                        buf[y * width + x] += v.weight as f32;
                    }
                }
            }
        }
    }
    let mut labels = vec![0u32; width * height];
    for (i, l) in labels.iter_mut().enumerate() {
        let mut best = 0.0f32;
        for (&id, buf) in &acc {
            if buf[i] > best {
                best = buf[i];
                *l = id + 1;
            }
        }
    }
    labels
}

/// Cell weight table as CSV with header `object_id,cell_x,cell_y,votes,weight`.
pub fn cell_weights_csv(votes: &[Vote], k: &CameraIntrinsics, params: &VoteParams) -> String {
    let mut by_object: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    for (i, v) in votes.iter().enumerate() {
        by_object.entry(v.object_id).or_default().push(i as u32);
    }
    let mut s = String::from("object_id,cell_x,cell_y,votes,weight\n");
    for (id, ids) in by_object {
        let g = CellGrid::new(votes, &ids, k, params.cell_px);
        for (c, m) in g.members.iter().enumerate() {
            if !m.is_empty() {
                let _ = writeln!(
                    s,
                    "{id},{},{},{},{:.6}",
                    c % g.gw,
                    c / g.gw,
                    m.len(),
                    g.weight[c]
                );
            }
        }
    }
    s
}

/// Projected vote centroids over a dark background, brighter for larger
/// weights.
pub fn write_vote_map_png(votes: &[Vote], k: &CameraIntrinsics, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(k.width as u32, k.height as u32);
    for v in votes {
        if let Some((u, w)) = k.project_to_pixel(&v.centroid) {
            let px = img.get_pixel_mut(u as u32, w as u32);
            let add = (v.weight * 255.0).round() as u8;
            px.0 = [
                px.0[0].saturating_add(add),
                px.0[1].saturating_add(add / 2),
                px.0[2],
            ];
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
