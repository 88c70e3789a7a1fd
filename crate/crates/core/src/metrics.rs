//! Pose error measures and detection scoring.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Pose;
use crate::mesh::Mesh;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    /// A detection matches when its pose error is below `k_m` times the
    /// object diameter.
    pub k_m: f64,
    /// Objects scored with the closest-point (ADI) error.
    pub symmetric: Vec<u32>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            k_m: 0.15,
            symmetric: Vec::new(),
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_m > 0.0 && self.k_m.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "k_m must be > 0, got {}",
                self.k_m
            )));
        }
        Ok(())
    }

    pub fn is_symmetric(&self, object_id: u32) -> bool {
        self.symmetric.contains(&object_id)
    }
}

/// Mean distance between corresponding model vertices under the two poses.
pub fn pose_error_add(mesh: &Mesh, gt: &Pose, est: &Pose) -> f64 {
    let v = mesh.vertices();
    v.iter()
        .map(|p| (gt.transform_point(p) - est.transform_point(p)).norm())
        .sum::<f64>()
        / v.len() as f64
}

/// Mean distance from each vertex under `gt` to the closest vertex under
/// `est`.
pub fn pose_error_adi(mesh: &Mesh, gt: &Pose, est: &Pose) -> f64 {
    let a: Vec<_> = mesh
        .vertices()
        .iter()
        .map(|p| gt.transform_point(p))
        .collect();
    let b: Vec<_> = mesh
        .vertices()
        .iter()
        .map(|p| est.transform_point(p))
        .collect();
    a.iter()
        .map(|p| {
            b.iter()
                .map(|q| (p - q).norm_squared())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .sum::<f64>()
        / a.len() as f64
}

pub fn pose_error(mesh: &Mesh, gt: &Pose, est: &Pose, symmetric: bool) -> f64 {
    if symmetric {
        pose_error_adi(mesh, gt, est)
    } else {
        pose_error_add(mesh, gt, est)
    }
}

/// Precision, recall and F1 with the underlying counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn new(tp: usize, fp: usize, fn_: usize) -> Self {
        Self { tp, fp, fn_ }
    }

    /// 0 without detections.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 without ground truth.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        }
    }

    pub fn merge(&mut self, other: &Prf) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// An object instance with its pose, used for both detections and ground
/// truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Instance {
    pub object_id: u32,
    pub pose: Pose,
}

/// A true positive: detection index, ground-truth index and pose error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub detection: usize,
    pub gt: usize,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchResult {
    pub prf: Prf,
    pub matches: Vec<Match>,
}

/// Greedy matching by ascending pose error: a detection is a true positive
/// if some unmatched ground truth of the same object lies within
/// `k_m × diameter`.
pub fn match_detections(
    detections: &[Instance],
    gt: &[Instance],
    meshes: &BTreeMap<u32, Mesh>,
    cfg: &MetricConfig,
) -> Result<MatchResult> {
    cfg.validate()?;
    let mut pairs = Vec::new();
    for (di, d) in detections.iter().enumerate() {
        for (gi, g) in gt
            .iter()
            .enumerate()
            .filter(|(_, g)| g.object_id == d.object_id)
        {
            let mesh = meshes.get(&g.object_id).ok_or_else(|| {
                Error::InvalidParameter(format!("no mesh for object {}", g.object_id))
            })?;
            let err = pose_error(mesh, &g.pose, &d.pose, cfg.is_symmetric(g.object_id));
            if err < cfg.k_m * mesh.diameter() {
                pairs.push(Match {
                    detection: di,
                    gt: gi,
                    error: err,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.error
            .total_cmp(&b.error)
            .then(a.detection.cmp(&b.detection))
            .then(a.gt.cmp(&b.gt))
    });
    let mut det_used = vec![false; detections.len()];
    let mut gt_used = vec![false; gt.len()];
    let mut matches = Vec::new();
    for m in pairs {
        if !det_used[m.detection] && !gt_used[m.gt] {
            det_used[m.detection] = true;
            gt_used[m.gt] = true;
            matches.push(m);
        }
    }
    let tp = matches.len();
    Ok(MatchResult {
        prf: Prf::new(tp, detections.len() - tp, gt.len() - tp),
        matches,
    })
}
