//! One-parameter sweeps of the detection pipeline.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, EvalReport, Models};
use crate::frame::RgbdFrame;
use crate::metrics::{Instance, MetricConfig};
use crate::pipeline::PipelineConfig;
use crate::plot::{save_line_chart, Series, PALETTE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepParam {
    /// Feature-distance threshold.
    Tau,
    /// Neighbors retrieved per patch.
    K,
    /// Scene sampling step in pixels.
    Step,
}

impl std::str::FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau" => Ok(SweepParam::Tau),
            "k" => Ok(SweepParam::K),
            "step" => Ok(SweepParam::Step),
            _ => Err(Error::InvalidParameter(format!(
                "unknown sweep parameter {s:?} (expected tau, k or step)"
            ))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Tau => "tau",
            SweepParam::K => "k",
            SweepParam::Step => "step",
        })
    }
}

impl SweepParam {
    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &PipelineConfig, value: f64) -> Result<PipelineConfig> {
        let mut cfg = base.clone();
        let count = || {
            if value >= 1.0 && value.fract() == 0.0 && value <= u32::MAX as f64 {
                Ok(value as usize)
            } else {
                Err(Error::InvalidParameter(format!(
                    "{self} must be a positive integer, got {value}"
                )))
            }
        };
        match self {
            SweepParam::Tau => {
                if value.is_nan() || value < 0.0 {
                    return Err(Error::InvalidParameter(format!(
                        "tau must be non-negative, got {value}"
                    )));
                }
                cfg.vote.tau = value;
            }
            SweepParam::K => cfg.vote.k = count()?,
            SweepParam::Step => cfg.patch.grid_step = count()?,
        }
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub report: EvalReport,
}

/// Evaluates `frames` once per value. All values are validated before any
/// detection runs.
pub fn sweep<'a, I>(
    param: SweepParam,
    values: &[f64],
    base: &PipelineConfig,
    frames: I,
    models: &Models,
    metric: &MetricConfig,
) -> Result<Vec<SweepRow>>
where
    I: IntoIterator<Item = (&'a str, &'a RgbdFrame, &'a [Instance])> + Clone,
{
    if values.is_empty() {
        return Err(Error::InvalidParameter(
            "sweep needs at least one value".into(),
        ));
    }
    let configs = values
        .iter()
        .map(|&v| param.apply(base, v))
        .collect::<Result<Vec<_>>>()?;
    values
        .iter()
        .zip(&configs)
        .map(|(&value, cfg)| {
            Ok(SweepRow {
                value,
                report: evaluate_frames(frames.clone(), models, cfg, metric)?,
            })
        })
        .collect()
}

/// Header `param,value,tp,fp,fn,precision,recall,f1,ms_per_frame`.
pub fn sweep_csv(param: SweepParam, rows: &[SweepRow]) -> String {
    let mut out = String::from("param,value,tp,fp,fn,precision,recall,f1,ms_per_frame\n");
    for r in rows {
        let p = &r.report.prf;
        writeln!(
            out,
            "{param},{},{},{},{},{:.6},{:.6},{:.6},{:.3}",
            r.value,
            p.tp,
            p.fp,
            p.fn_,
            p.precision(),
            p.recall(),
            p.f1(),
            r.report.ms_per_frame()
        )
        .unwrap();
    }
    out
}

/// F1 (first color), precision and recall against the swept value.
pub fn save_sweep_plot(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let curve = |f: fn(&EvalReport) -> f64, color| Series {
        points: rows.iter().map(|r| (r.value, f(&r.report))).collect(),
        color,
    };
    let series = [
        curve(|r| r.prf.f1(), PALETTE[0]),
        curve(|r| r.prf.precision(), PALETTE[1]),
        curve(|r| r.prf.recall(), PALETTE[2]),
    ];
    save_line_chart(&series, 480, 320, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_apply() {
        let base = PipelineConfig::default();
        assert_eq!("tau".parse::<SweepParam>().unwrap(), SweepParam::Tau);
        assert!("knn".parse::<SweepParam>().is_err());
        assert_eq!(SweepParam::Tau.apply(&base, 0.0).unwrap().vote.tau, 0.0);
        assert_eq!(SweepParam::K.apply(&base, 5.0).unwrap().vote.k, 5);
        assert_eq!(
            SweepParam::Step.apply(&base, 4.0).unwrap().patch.grid_step,
            4
        );
        assert!(SweepParam::Tau.apply(&base, -1.0).is_err());
        assert!(SweepParam::K.apply(&base, 0.0).is_err());
        assert!(SweepParam::Step.apply(&base, 2.5).is_err());
    }
}
