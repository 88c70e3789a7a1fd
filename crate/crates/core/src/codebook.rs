//! Codebooks of synthetic patch descriptors with their local 6D votes.

use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion};
use serde::{Deserialize, Serialize};

use crate::ann::{brute_force_knn, AnnParams, KdForest};
use crate::binio::{put_f32s, put_u32, put_u64, Reader};
use crate::descriptor::Regressor;
use crate::error::{Error, Result};
use crate::geom::{canonical_quat, quat_to_wxyz, CameraIntrinsics, Vec3, ViewpointSet};
use crate::mesh::Mesh;
use crate::patch::{sample_view_patches, PatchConfig, PatchMask, PATCH_PIXELS};
use crate::render::render_window;

const MAGIC: &[u8; 4] = b"PVCB";
const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 20;
const MASK_BYTES: usize = PATCH_PIXELS / 8;

/// Bytes per stored entry for descriptor width `f`.
pub fn entry_bytes(f: usize) -> usize {
    4 * f + 12 + 16 + MASK_BYTES + 4
}

/// Offset from the patch center to the object centroid and the object
/// orientation, both in the frame of the camera that rendered the patch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalVote {
    pub offset: Vec3,
    pub orientation: UnitQuaternion<f64>,
}

impl LocalVote {
    /// Rounds to `f32` precision and canonicalizes the quaternion sign, so
    /// the stored value survives serialization unchanged.
    pub fn new(offset: Vec3, orientation: UnitQuaternion<f64>) -> Self {
        let offset = offset.map(|v| v as f32 as f64);
        let [w, x, y, z] = quat_to_wxyz(&canonical_quat(orientation));
        let q = Quaternion::new(
            w as f32 as f64,
            x as f32 as f64,
            y as f32 as f64,
            z as f32 as f64,
        );
        Self {
            offset,
            orientation: UnitQuaternion::new_unchecked(q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodebookEntry {
    pub vote: LocalVote,
    pub mask: PatchMask,
    pub object_id: u32,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    Exact,
    #[default]
    Approx,
}

/// Entries plus a nearest-neighbor index over their descriptors.
#[derive(Clone, Debug)]
pub struct Codebook {
    feature_dim: usize,
    descriptors: Vec<f32>,
    entries: Vec<CodebookEntry>,
    index: KdForest,
}

impl PartialEq for Codebook {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.descriptors == other.descriptors
            && self.entries == other.entries
    }
}

impl Codebook {
    pub fn from_parts(
        feature_dim: usize,
        descriptors: Vec<f32>,
        entries: Vec<CodebookEntry>,
        ann: &AnnParams,
    ) -> Result<Self> {
        if feature_dim == 0 || descriptors.len() != entries.len() * feature_dim {
            return Err(Error::DimensionMismatch {
                expected: entries.len() * feature_dim,
                actual: descriptors.len(),
            });
        }
        let index = KdForest::build(&descriptors, feature_dim, ann)?;
        Ok(Self {
            feature_dim,
            descriptors,
            entries,
            index,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CodebookEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &CodebookEntry {
        &self.entries[i]
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn descriptors(&self) -> &[f32] {
        &self.descriptors
    }

    pub fn ann_params(&self) -> &AnnParams {
        self.index.params()
    }

    /// Rebuilds the approximate index with other parameters.
    pub fn reindex(&mut self, ann: &AnnParams) -> Result<()> {
        self.index = KdForest::build(&self.descriptors, self.feature_dim, ann)?;
        Ok(())
    }

    /// `k` nearest entries as `(entry index, distance)`, ascending.
    pub fn knn(&self, query: &[f32], k: usize, mode: SearchMode) -> Result<Vec<(usize, f32)>> {
        if query.len() != self.feature_dim {
            return Err(Error::DimensionMismatch {
                expected: self.feature_dim,
                actual: query.len(),
            });
        }
        if k == 0 {
            return Err(Error::InvalidParameter("k must be at least 1".into()));
        }
        Ok(match mode {
            SearchMode::Exact => brute_force_knn(&self.descriptors, self.feature_dim, query, k),
            SearchMode::Approx => self.index.knn(&self.descriptors, query, k),
        })
    }

    pub fn object_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.object_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.len() * entry_bytes(self.feature_dim));
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u32(&mut out, self.feature_dim as u32);
        put_u64(&mut out, self.len() as u64);
        for (i, e) in self.entries.iter().enumerate() {
            put_f32s(&mut out, self.descriptor(i).iter().copied());
            put_f32s(&mut out, e.vote.offset.iter().map(|&v| v as f32));
            put_f32s(
                &mut out,
                quat_to_wxyz(&e.vote.orientation).iter().map(|&v| v as f32),
            );
            out.extend_from_slice(&e.mask.0);
            put_u32(&mut out, e.object_id);
        }
        out
    }

    pub fn from_bytes(buf: &[u8], ann: &AnnParams) -> Result<Self> {
        let mut r = Reader::new(buf);
        if r.bytes(4, "magic")? != MAGIC {
            return Err(Error::format(0, "bad magic, expected PVCB"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let f = r.u32("feature dimension")? as usize;
        if f == 0 {
            return Err(Error::format(8, "zero feature dimension"));
        }
        let n = r.u64("entry count")?;
        let need = (n as u128) * entry_bytes(f) as u128;
        if need != r.remaining() as u128 {
            return Err(Error::format(
                r.offset(),
                format!(
                    "{n} entries of {} bytes need {need} bytes, found {}",
                    entry_bytes(f),
                    r.remaining()
                ),
            ));
        }
        let n = n as usize;
        let mut descriptors = Vec::with_capacity(n * f);
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let start = r.offset();
            descriptors.extend(r.f32s(f, "descriptor")?);
            let o = r.f32s(3, "offset")?;
            let q = r.f32s(4, "orientation")?;
            let mut mask = PatchMask::default();
            mask.0.copy_from_slice(r.bytes(MASK_BYTES, "mask")?);
            let object_id = r.u32("object id")?;
            let q = Quaternion::new(q[0] as f64, q[1] as f64, q[2] as f64, q[3] as f64);
            if o.iter().any(|v| !v.is_finite()) || !q.coords.iter().all(|v| v.is_finite()) {
                return Err(Error::format(start, "non-finite vote"));
            }
            if (q.norm() - 1.0).abs() > 1e-4 || q.w < 0.0 {
                return Err(Error::format(
                    start,
                    "vote orientation is not a canonical unit quaternion",
                ));
            }
            entries.push(CodebookEntry {
                vote: LocalVote {
                    offset: Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64),
                    orientation: UnitQuaternion::new_unchecked(q),
                },
                mask,
                object_id,
            });
        }
        if descriptors.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                HEADER_BYTES as u64,
                "non-finite descriptor value",
            ));
        }
        r.finish()?;
        Self::from_parts(f, descriptors, entries, ann)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, ann: &AnnParams) -> Result<Self> {
        let path = path.as_ref();
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, ann)
    }
}

/// Renders `mesh` from every viewpoint, samples foreground patches, encodes
/// them and stores each with the vote implied by the known render pose.
#[allow(clippy::too_many_arguments)]
pub fn build_codebook(
    mesh: &Mesh,
    object_id: u32,
    views: &ViewpointSet,
    k: &CameraIntrinsics,
    reg: &Regressor,
    cfg: &PatchConfig,
    ann: &AnnParams,
) -> Result<Codebook> {
    cfg.validate()?;
    if views.is_empty() {
        return Err(Error::Build("empty view set".into()));
    }
    if !reg.is_trained() {
        return Err(Error::State("codebook needs a trained regressor".into()));
    }
    let centroid = mesh.centroid();
    let mut descriptors = Vec::new();
    let mut entries = Vec::new();
    for pose in &views.poses {
        let view = render_window(mesh, pose, k, 2).view;
        let samples = sample_view_patches(&view, cfg);
        if samples.is_empty() {
            continue;
        }
        let centroid_cam = view.pose.transform_point(&centroid);
        let (patches, masks): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
        for d in reg.encode_batch(&patches)? {
            descriptors.extend(d);
        }
        for (p, mask) in patches.iter().zip(masks) {
            entries.push(CodebookEntry {
                vote: LocalVote::new(centroid_cam - p.center_point, *view.pose.rotation()),
                mask,
                object_id,
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::Build("no patches extracted from any view".into()));
    }
    Codebook::from_parts(reg.feature_dim(), descriptors, entries, ann)
}

/// Union of several codebooks, in order, with a fresh index.
pub fn merge(books: &[Codebook], ann: &AnnParams) -> Result<Codebook> {
    let Some(first) = books.first() else {
        return Err(Error::Build("nothing to merge".into()));
    };
    let f = first.feature_dim;
    let mut descriptors = Vec::new();
    let mut entries = Vec::new();
    for b in books {
        if b.feature_dim != f {
            return Err(Error::DimensionMismatch {
                expected: f,
                actual: b.feature_dim,
            });
        }
        descriptors.extend_from_slice(&b.descriptors);
        entries.extend_from_slice(&b.entries);
    }
    Codebook::from_parts(f, descriptors, entries, ann)
}
