//! End-to-end detection on one frame with per-stage wall-clock timings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::codebook::Codebook;
use crate::descriptor::Regressor;
use crate::error::{Error, Result};
use crate::frame::RgbdFrame;
use crate::geom::quat_to_wxyz;
use crate::mesh::Mesh;
use crate::patch::{sample_scene, PatchConfig};
use crate::verify::{
    best_per_object, icp_refine, select_detections, verify, Detection, VerifyParams,
};
use crate::vote::{cast_votes_from_descriptors, filter_votes, top_n_votes, Hypothesis, VoteParams};

/// How hypotheses are formed and how many reach verification.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// The most confident single votes become hypotheses; the best verified
    /// one per object is kept.
    Original,
    /// The strongest filtered modes per object become hypotheses; all
    /// verified ones survive non-maximum suppression.
    #[default]
    Modes,
}

impl Protocol {
    /// Matching threshold factor conventionally paired with the protocol.
    pub fn default_k_m(self) -> f64 {
        match self {
            Protocol::Original => 0.1,
            Protocol::Modes => 0.15,
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Protocol::Original),
            "modes" => Ok(Protocol::Modes),
            _ => Err(Error::Config(format!(
                "unknown protocol {s:?} (expected original or modes)"
            ))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Original => "original",
            Protocol::Modes => "modes",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub protocol: Protocol,
    /// Votes promoted to hypotheses under [`Protocol::Original`].
    pub top_votes: usize,
    /// Modes per object verified under [`Protocol::Modes`].
    pub modes_per_object: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            protocol: Protocol::Modes,
            top_votes: 100,
            modes_per_object: 5,
        }
    }
}

/// Every parameter of a detection run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub patch: PatchConfig,
    pub vote: VoteParams,
    pub verify: VerifyParams,
    pub detect: DetectConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.vote.validate()?;
        self.verify.validate()?;
        if self.detect.top_votes == 0 || self.detect.modes_per_object == 0 {
            return Err(Error::InvalidParameter(
                "hypothesis counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub const STAGE_LABELS: [&str; 5] = [
    "scene sampling",
    "descriptor regression",
    "k-NN & voting",
    "vote filtering",
    "verification",
];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimings {
    pub stages: [Duration; 5],
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.stages.iter().sum()
    }

    pub fn add(&mut self, other: &StageTimings) {
        for (a, b) in self.stages.iter_mut().zip(&other.stages) {
            *a += *b;
        }
    }

    /// Mean per-frame timings in milliseconds, one row per stage plus the
    /// total, under the header `stage,ms`.
    pub fn to_csv(&self, frames: usize) -> String {
        let n = frames.max(1) as f64;
        let ms = |d: Duration| d.as_secs_f64() * 1e3 / n;
        let mut out = String::from("stage,ms\n");
        for (label, d) in STAGE_LABELS.iter().zip(&self.stages) {
            writeln!(out, "{label},{:.3}", ms(*d)).unwrap();
        }
        writeln!(out, "total,{:.3}", ms(self.total())).unwrap();
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct FrameResult {
    pub detections: Vec<Detection>,
    pub vote_count: usize,
    pub hypothesis_count: usize,
    pub timings: StageTimings,
}

/// Samples, encodes and votes on `frame`, forms hypotheses per the protocol,
/// refines and verifies each against its model and keeps the survivors.
pub fn run_detect(
    frame: &RgbdFrame,
    codebook: &Codebook,
    reg: &Regressor,
    models: &BTreeMap<u32, Mesh>,
    cfg: &PipelineConfig,
) -> Result<FrameResult> {
    cfg.validate()?;
    frame.intrinsics.validate()?;
    if codebook.feature_dim() != reg.feature_dim() {
        return Err(Error::Config(format!(
            "codebook descriptors have {} dimensions but the regressor produces {}",
            codebook.feature_dim(),
            reg.feature_dim()
        )));
    }
    if let Some(id) = codebook
        .object_ids()
        .into_iter()
        .find(|id| !models.contains_key(id))
    {
        return Err(Error::Config(format!(
            "codebook references object {id} without a model mesh"
        )));
    }
    let mut timings = StageTimings::default();
    let mut clock = Instant::now();
    let mut lap = |slot: usize, timings: &mut StageTimings| {
        let now = Instant::now();
        timings.stages[slot] = now - clock;
        clock = now;
    };

    let patches = sample_scene(frame, &cfg.patch);
    lap(0, &mut timings);
    let descriptors = reg.encode_batch(&patches)?;
    lap(1, &mut timings);
    let votes = cast_votes_from_descriptors(&patches, &descriptors, codebook, &cfg.vote)?;
    lap(2, &mut timings);
    let hypotheses = match cfg.detect.protocol {
        Protocol::Original => top_n_votes(&votes, cfg.detect.top_votes)?,
        Protocol::Modes => strongest_per_object(
            filter_votes(&votes, &frame.intrinsics, &cfg.vote)?,
            cfg.detect.modes_per_object,
        ),
    };
    lap(3, &mut timings);
    let mut verified = Vec::with_capacity(hypotheses.len());
    for h in &hypotheses {
        let mesh = &models[&h.object_id];
        let icp = icp_refine(mesh, &h.pose(&mesh.centroid()), frame, &cfg.verify)?;
        let verification = verify(mesh, &icp.pose, frame, &cfg.verify)?;
        verified.push(Detection {
            object_id: h.object_id,
            pose: icp.pose,
            centroid: icp.pose.transform_point(&mesh.centroid()),
            score: h.score,
            refined: icp.refined,
            verification,
        });
    }
    let detections = match cfg.detect.protocol {
        Protocol::Original => best_per_object(&verified),
        Protocol::Modes => select_detections(&verified, cfg.verify.nms_radius),
    };
    lap(4, &mut timings);
    Ok(FrameResult {
        detections,
        vote_count: votes.len(),
        hypothesis_count: hypotheses.len(),
        timings,
    })
}

/// The first `n` hypotheses of each object, keeping the input order.
fn strongest_per_object(hyps: Vec<Hypothesis>, n: usize) -> Vec<Hypothesis> {
    let mut taken: BTreeMap<u32, usize> = BTreeMap::new();
    hyps.into_iter()
        .filter(|h| {
            let c = taken.entry(h.object_id).or_default();
            *c += 1;
            *c <= n
        })
        .collect()
}

pub const DETECTION_CSV_HEADER: &str =
    "frame,object_id,score,depth_inlier_frac,normal_angle_deg,color_diff,qw,qx,qy,qz,tx,ty,tz";

/// Detection rows for one frame, without header.
pub fn detections_csv_rows(frame: &str, detections: &[Detection]) -> String {
    let mut out = String::new();
    for d in detections {
        let [w, x, y, z] = quat_to_wxyz(d.pose.rotation());
        let t = d.pose.translation;
        writeln!(
            out,
            "{frame},{},{:.9e},{:.6},{:.6},{:.6},{w:.9},{x:.9},{y:.9},{z:.9},{:.9},{:.9},{:.9}",
            d.object_id,
            d.score,
            d.verification.depth_inlier_frac,
            d.verification.mean_normal_angle_deg,
            d.verification.mean_color_diff,
            t.x,
            t.y,
            t.z
        )
        .unwrap();
    }
    out
}
