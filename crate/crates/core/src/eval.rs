//! Detection over annotated frames, scored against ground truth.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use crate::codebook::Codebook;
use crate::descriptor::Regressor;
use crate::error::Result;
use crate::frame::RgbdFrame;
use crate::mesh::Mesh;
use crate::metrics::{match_detections, pose_error, Instance, MetricConfig, Prf};
use crate::pipeline::{
    detections_csv_rows, run_detect, PipelineConfig, StageTimings, DETECTION_CSV_HEADER,
};

/// Everything detection needs besides the frame and parameters.
#[derive(Clone, Copy)]
pub struct Models<'a> {
    pub codebook: &'a Codebook,
    pub regressor: &'a Regressor,
    pub meshes: &'a BTreeMap<u32, Mesh>,
}

/// A named frame with its ground truth.
#[derive(Clone, Debug)]
pub struct LabeledFrame {
    pub name: String,
    pub frame: RgbdFrame,
    pub gt: Vec<Instance>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalReport {
    pub prf: Prf,
    /// Pose error over diameter of every true positive.
    pub tp_errors: Vec<f64>,
    /// Summed over frames.
    pub timings: StageTimings,
    pub frames: usize,
    /// Header plus one row per detection.
    pub detections_csv: String,
    pub detect_time: Duration,
}

impl EvalReport {
    pub fn max_tp_error(&self) -> f64 {
        self.tp_errors.iter().copied().fold(0.0, f64::max)
    }

    /// Mean wall-clock time per frame.
    pub fn ms_per_frame(&self) -> f64 {
        self.timings.total().as_secs_f64() * 1e3 / self.frames.max(1) as f64
    }

    pub fn summary_csv(&self) -> String {
        let p = &self.prf;
        format!(
            "tp,fp,fn,precision,recall,f1\n{},{},{},{:.6},{:.6},{:.6}\n",
            p.tp,
            p.fp,
            p.fn_,
            p.precision(),
            p.recall(),
            p.f1()
        )
    }
}

/// Runs detection on every frame in order and scores it.
pub fn evaluate_frames<'a, I>(
    frames: I,
    models: &Models,
    pipeline: &PipelineConfig,
    metric: &MetricConfig,
) -> Result<EvalReport>
where
    I: IntoIterator<Item = (&'a str, &'a RgbdFrame, &'a [Instance])>,
{
    metric.validate()?;
    let start = Instant::now();
    let mut report = EvalReport {
        detections_csv: format!("{DETECTION_CSV_HEADER}\n"),
        ..Default::default()
    };
    for (name, frame, gt) in frames {
        let r = run_detect(
            frame,
            models.codebook,
            models.regressor,
            models.meshes,
            pipeline,
        )?;
        report.timings.add(&r.timings);
        report.frames += 1;
        report
            .detections_csv
            .push_str(&detections_csv_rows(name, &r.detections));
        let dets: Vec<Instance> = r
            .detections
            .iter()
            .map(|d| Instance {
                object_id: d.object_id,
                pose: d.pose,
            })
            .collect();
        let m = match_detections(&dets, gt, models.meshes, metric)?;
        for mt in &m.matches {
            let g = &gt[mt.gt];
            let mesh = &models.meshes[&g.object_id];
            let err = pose_error(
                mesh,
                &g.pose,
                &dets[mt.detection].pose,
                metric.is_symmetric(g.object_id),
            );
            report.tp_errors.push(err / mesh.diameter());
        }
        report.prf.merge(&m.prf);
    }
    report.detect_time = start.elapsed();
    Ok(report)
}

/// [`evaluate_frames`] over owned labeled frames.
pub fn evaluate_labeled(
    frames: &[LabeledFrame],
    models: &Models,
    pipeline: &PipelineConfig,
    metric: &MetricConfig,
) -> Result<EvalReport> {
    evaluate_frames(
        frames
            .iter()
            .map(|f| (f.name.as_str(), &f.frame, f.gt.as_slice())),
        models,
        pipeline,
        metric,
    )
}
