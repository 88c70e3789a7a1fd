//! Closed-loop benchmark: train on synthetic views of procedural meshes,
//! build a joint codebook, detect in seeded synthetic scenes and score the
//! result against the known poses.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::AnnParams;
use crate::codebook::{build_codebook, merge, Codebook, SearchMode};
use crate::descriptor::{Regressor, RegressorKind, RegressorSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, EvalReport, Models};
use crate::frame::RgbdFrame;
use crate::geom::{backproject, sample_icosahedron_views, CameraIntrinsics, Pose, ViewpointSet};
use crate::mesh::{colored_icosphere, cube, l_prism, Mesh};
use crate::metrics::{Instance, MetricConfig};
use crate::nn::TrainConfig;
use crate::patch::{sample_view_patches, Patch, PatchConfig};
use crate::pipeline::PipelineConfig;
use crate::render::{render, render_window};
use crate::scene::{random_rotation, synthesize_scene, SceneConfig, SyntheticScene};

/// The three procedural test objects with ids 0, 1 and 2.
pub fn benchmark_meshes() -> BTreeMap<u32, Mesh> {
    BTreeMap::from([
        (0, cube(0.1)),
        (1, colored_icosphere(0.06, 1, 7)),
        (2, l_prism(0.14, 0.05, 0.06)),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClosedLoopConfig {
    pub seed: u64,
    pub scenes: usize,
    pub view_subdivisions: u32,
    pub inplane_steps: usize,
    pub view_radius: f64,
    pub regressor: RegressorSpec,
    /// Training patches drawn from the codebook views.
    pub train_samples: usize,
    pub train: TrainConfig,
    /// Grid step used when sampling codebook views.
    pub codebook_step: usize,
    /// When set, `tau` is replaced by this quantile of nearest-neighbor
    /// distances measured on held-out renders.
    pub tau_quantile: Option<f64>,
    pub calibration_views: usize,
    pub ann: AnnParams,
    pub pipeline: PipelineConfig,
    pub scene: SceneConfig,
    pub metric: MetricConfig,
}

impl Default for ClosedLoopConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenes: 20,
            view_subdivisions: 2,
            inplane_steps: 12,
            view_radius: 0.7,
            regressor: RegressorSpec::new(RegressorKind::Pca, 64),
            train_samples: 2000,
            train: TrainConfig::default(),
            codebook_step: 8,
            tau_quantile: Some(0.9),
            calibration_views: 30,
            ann: AnnParams {
                trees: 8,
                checks: 512,
                leaf_size: 16,
                seed: 0,
            },
            pipeline: PipelineConfig::default(),
            scene: SceneConfig::default(),
            metric: MetricConfig {
                k_m: 0.1,
                symmetric: Vec::new(),
            },
        }
    }
}

/// Trained regressor, codebook and test scenes.
pub struct Prepared {
    pub meshes: BTreeMap<u32, Mesh>,
    pub regressor: Regressor,
    pub codebook: Codebook,
    pub scenes: Vec<SyntheticScene>,
    /// `scene000`, `scene001`, ...
    pub scene_names: Vec<String>,
    /// Calibrated or configured feature-distance threshold.
    pub tau: f64,
    /// Wall-clock time of each preparation phase.
    pub phases: Vec<(&'static str, Duration)>,
}

/// Training patches: `n` foreground patches drawn uniformly from a seeded
/// subset of views of every mesh.
pub fn training_patches(
    meshes: &BTreeMap<u32, Mesh>,
    views: &ViewpointSet,
    k: &CameraIntrinsics,
    cfg: &PatchConfig,
    n: usize,
    seed: u64,
) -> Vec<Patch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_mesh = views.len().min(64);
    let mut pool = Vec::new();
    for mesh in meshes.values() {
        let picked = sample(&mut rng, views.len(), per_mesh).into_vec();
        for &i in &picked {
            let view = render_window(mesh, &views.poses[i], k, 2).view;
            pool.extend(sample_view_patches(&view, cfg).into_iter().map(|(p, _)| p));
        }
    }
    if pool.len() <= n {
        return pool;
    }
    let mut keep = sample(&mut rng, pool.len(), n).into_vec();
    keep.sort_unstable();
    keep.into_iter().map(|i| pool[i].clone()).collect()
}

/// Nearest-neighbor descriptor distances of foreground patches from
/// renders at random poses, which the codebook views do not contain.
#[allow(clippy::too_many_arguments)]
pub fn heldout_distances(
    meshes: &BTreeMap<u32, Mesh>,
    codebook: &Codebook,
    reg: &Regressor,
    k: &CameraIntrinsics,
    patch: &PatchConfig,
    scene: &SceneConfig,
    views: usize,
    seed: u64,
) -> Result<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (_, mesh) in meshes.iter().cycle().take(views) {
        let z = rng.random_range(scene.min_depth..=scene.max_depth);
        let c = backproject(k.cx, k.cy, z, k)?;
        let q = random_rotation(&mut rng);
        let view = render(mesh, &Pose::new(q, c - q * mesh.centroid()), k);
        let patches: Vec<Patch> = sample_view_patches(&view, patch)
            .into_iter()
            .map(|(p, _)| p)
            .collect();
        for d in reg.encode_batch(&patches)? {
            out.push(codebook.knn(&d, 1, SearchMode::Approx)?[0].1);
        }
    }
    Ok(out)
}

/// `q`-quantile by nearest rank.
pub fn quantile(values: &[f32], q: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&q) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f32::total_cmp);
    let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
    Some(v[idx] as f64)
}

pub fn prepare(cfg: &ClosedLoopConfig, k: &CameraIntrinsics) -> Result<Prepared> {
    let mut phases = Vec::new();
    let mut clock = Instant::now();
    let mut lap = |name: &'static str| {
        let now = Instant::now();
        phases.push((name, now - clock));
        clock = now;
    };
    cfg.pipeline.validate()?;
    let meshes = benchmark_meshes();
    let views =
        sample_icosahedron_views(cfg.view_subdivisions, cfg.view_radius, cfg.inplane_steps)?;
    let book_patch = PatchConfig {
        grid_step: cfg.codebook_step,
        ..cfg.pipeline.patch
    };
    let train = training_patches(&meshes, &views, k, &book_patch, cfg.train_samples, cfg.seed);
    lap("training patches");
    let regressor = match cfg.regressor.kind {
        RegressorKind::Pca => Regressor::fit_pca(&train, cfg.regressor.feature_dim)?,
        _ => {
            let mut r = cfg.regressor.build(cfg.seed)?;
            r.train(
                &train,
                &TrainConfig {
                    seed: cfg.seed,
                    ..cfg.train.clone()
                },
            )?;
            r
        }
    };
    drop(train);
    lap("regressor");
    let books = meshes
        .iter()
        .map(|(id, mesh)| build_codebook(mesh, *id, &views, k, &regressor, &book_patch, &cfg.ann))
        .collect::<Result<Vec<_>>>()?;
    let codebook = merge(&books, &cfg.ann)?;
    drop(books);
    lap("codebook");
    let tau = match cfg.tau_quantile {
        Some(q) => {
            let d = heldout_distances(
                &meshes,
                &codebook,
                &regressor,
                k,
                &cfg.pipeline.patch,
                &cfg.scene,
                cfg.calibration_views,
                cfg.seed ^ 0x5eed,
            )?;
            quantile(&d, q)
                .ok_or_else(|| Error::InvalidParameter("no calibration patches".into()))?
        }
        None => cfg.pipeline.vote.tau,
    };
    lap("calibration");
    let objects: Vec<(u32, &Mesh)> = meshes.iter().map(|(id, m)| (*id, m)).collect();
    let scenes = (0..cfg.scenes as u64)
        .map(|i| {
            synthesize_scene(
                &objects,
                k,
                &cfg.scene,
                cfg.seed.wrapping_mul(1000).wrapping_add(i),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    lap("scenes");
    Ok(Prepared {
        meshes,
        regressor,
        codebook,
        scene_names: (0..scenes.len()).map(|i| format!("scene{i:03}")).collect(),
        scenes,
        tau,
        phases,
    })
}

impl Prepared {
    pub fn models(&self) -> Models<'_> {
        Models {
            codebook: &self.codebook,
            regressor: &self.regressor,
            meshes: &self.meshes,
        }
    }

    /// Scenes as `(name, frame, ground truth)` in order.
    pub fn frames(&self) -> impl Iterator<Item = (&str, &RgbdFrame, &[Instance])> + Clone {
        self.scenes
            .iter()
            .zip(&self.scene_names)
            .map(|(s, n)| (n.as_str(), &s.frame, s.gt.as_slice()))
    }
}

/// Runs detection on every prepared scene with `pipeline` and scores it.
pub fn evaluate(
    prep: &Prepared,
    pipeline: &PipelineConfig,
    metric: &MetricConfig,
) -> Result<EvalReport> {
    evaluate_frames(prep.frames(), &prep.models(), pipeline, metric)
}

/// Prepares with `cfg`, substitutes the calibrated `tau` and evaluates.
pub fn run_closed_loop(
    cfg: &ClosedLoopConfig,
    k: &CameraIntrinsics,
) -> Result<(Prepared, EvalReport)> {
    let prep = prepare(cfg, k)?;
    let mut pipeline = cfg.pipeline.clone();
    pipeline.vote.tau = prep.tau;
    let report = evaluate(&prep, &pipeline, &cfg.metric)?;
    Ok((prep, report))
}
