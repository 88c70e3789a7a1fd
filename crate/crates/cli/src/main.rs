use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use patchvote::codebook::{build_codebook, merge, Codebook, SearchMode};
use patchvote::config::Config;
use patchvote::dataset::{parse_intrinsics, Dataset};
use patchvote::descriptor::{Regressor, RegressorKind, RegressorSpec};
use patchvote::eval::{evaluate_labeled, EvalReport, LabeledFrame, Models};
use patchvote::geom::{sample_icosahedron_views, CameraIntrinsics};
use patchvote::mesh::{colored_icosphere, cube, l_prism, Mesh};
use patchvote::metrics::Instance;
use patchvote::patch::sample_scene;
use patchvote::pipeline::{
    detections_csv_rows, run_detect, Protocol, StageTimings, DETECTION_CSV_HEADER,
};
use patchvote::render::render;
use patchvote::selftest::{run_closed_loop, ClosedLoopConfig};
use patchvote::sweep::{save_sweep_plot, sweep, sweep_csv, SweepParam};
use patchvote::{Error, Result};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(
    name = "patchvote",
    version,
    about = "Local RGB-D patch voting for object detection and 6D pose estimation"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every subcommand; flags win over the config file.
#[derive(Args)]
struct Overrides {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Feature-distance threshold for casting a vote.
    #[arg(long, global = true)]
    tau: Option<f64>,
    /// Neighbors retrieved per scene patch.
    #[arg(long, global = true)]
    knn: Option<usize>,
    /// Patch sampling step in pixels.
    #[arg(long, global = true)]
    step: Option<usize>,
    /// Hypothesis protocol: original or modes.
    #[arg(long, global = true)]
    protocol: Option<String>,
    /// Use exact nearest-neighbor search instead of the kd-forest.
    #[arg(long, global = true)]
    exact_nn: bool,
    /// Camera intrinsics file; defaults to 640x480 with f = 575.
    #[arg(long, global = true)]
    intrinsics: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a mesh from an icosahedral view set into a dataset directory.
    Render {
        /// cube, icosphere, l-prism or a PLY file.
        #[arg(long)]
        mesh: String,
        #[arg(long, default_value_t = 0)]
        object_id: u32,
        #[arg(long, default_value_t = 2)]
        subdivisions: u32,
        #[arg(long, default_value_t = 12)]
        inplane: usize,
        /// Camera distance from the object in meters.
        #[arg(long, default_value_t = 0.7)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a descriptor regressor on patches sampled from dataset frames.
    Train {
        /// Dataset directories.
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        /// pca, ae or cae.
        #[arg(long, default_value = "pca")]
        kind: String,
        /// Descriptor length.
        #[arg(long, default_value_t = 64)]
        dim: usize,
        /// Training patches drawn from all frames.
        #[arg(long, default_value_t = 2000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a joint codebook from synthetic views of each object.
    BuildCodebook {
        #[arg(long)]
        model: PathBuf,
        /// `ID=MESH`, where MESH is cube, icosphere, l-prism or a PLY file.
        #[arg(long = "object", required = true)]
        objects: Vec<String>,
        #[arg(long, default_value_t = 2)]
        subdivisions: u32,
        #[arg(long, default_value_t = 12)]
        inplane: usize,
        #[arg(long, default_value_t = 0.7)]
        radius: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect objects in every frame of a dataset.
    Detect {
        #[command(flatten)]
        inputs: DetectInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Detect and score against the dataset's ground truth.
    Evaluate {
        #[command(flatten)]
        inputs: DetectInputs,
        /// Output directory for detections, timings and the score summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run evaluation for each value of one parameter.
    Sweep {
        #[command(flatten)]
        inputs: DetectInputs,
        /// tau, k or step.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, required = true, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop benchmark on procedural objects and synthetic scenes.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        /// View-sphere subdivisions of the codebook.
        #[arg(long, default_value_t = 2)]
        subdivisions: u32,
        #[arg(long, default_value_t = 12)]
        inplane: usize,
        /// Patch sampling step for codebook views.
        #[arg(long, default_value_t = 8)]
        codebook_step: usize,
        /// Output directory for detections, timings and the score summary.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DetectInputs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    codebook: PathBuf,
    /// `ID=MESH` for every object in the codebook.
    #[arg(long = "object", required = true)]
    objects: Vec<String>,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

impl Overrides {
    fn settings(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(t) = self.tau {
            cfg.vote.tau = t;
        }
        if let Some(k) = self.knn {
            cfg.vote.k = k;
        }
        if let Some(s) = self.step {
            cfg.patch.grid_step = s;
        }
        if let Some(p) = &self.protocol {
            cfg.detect.protocol = p.parse::<Protocol>()?;
        }
        if self.exact_nn {
            cfg.vote.search = SearchMode::Exact;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn camera(&self) -> Result<CameraIntrinsics> {
        match &self.intrinsics {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                parse_intrinsics(&text)
            }
            None => Ok(CameraIntrinsics::default()),
        }
    }
}

fn builtin_mesh(name: &str) -> Option<Mesh> {
    match name {
        "cube" => Some(cube(0.1)),
        "icosphere" => Some(colored_icosphere(0.06, 1, 7)),
        "l-prism" => Some(l_prism(0.14, 0.05, 0.06)),
        _ => None,
    }
}

fn load_mesh(spec: &str) -> Result<Mesh> {
    match builtin_mesh(spec) {
        Some(m) => Ok(m),
        None => Mesh::load_ply(spec),
    }
}

fn parse_objects(specs: &[String]) -> Result<BTreeMap<u32, Mesh>> {
    let mut out = BTreeMap::new();
    for s in specs {
        let (id, mesh) = s
            .split_once('=')
            .ok_or_else(|| config_err(format!("object {s:?} is not ID=MESH")))?;
        let id: u32 = id
            .trim()
            .parse()
            .map_err(|_| config_err(format!("bad object id in {s:?}")))?;
        if out.insert(id, load_mesh(mesh.trim())?).is_some() {
            return Err(config_err(format!("object id {id} given twice")));
        }
    }
    Ok(out)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn load_labeled(data: &Path, require_gt: bool) -> Result<Vec<LabeledFrame>> {
    let ds = Dataset::open(data)?;
    if ds.frames.is_empty() {
        return Err(config_err(format!("{} contains no frames", data.display())));
    }
    ds.frames
        .iter()
        .map(|name| {
            let gt = match ds.ground_truth(name)? {
                Some(gt) => gt,
                None if require_gt => {
                    return Err(config_err(format!("frame {name} has no ground truth")))
                }
                None => Vec::new(),
            };
            Ok(LabeledFrame {
                name: name.clone(),
                frame: ds.load(name)?,
                gt,
            })
        })
        .collect()
}

struct Loaded {
    regressor: Regressor,
    codebook: Codebook,
    meshes: BTreeMap<u32, Mesh>,
}

impl Loaded {
    fn open(inputs: &DetectInputs, cfg: &Config) -> Result<Self> {
        Ok(Self {
            regressor: Regressor::load(&inputs.model)?,
            codebook: Codebook::load(&inputs.codebook, &cfg.ann)?,
            meshes: parse_objects(&inputs.objects)?,
        })
    }

    fn models(&self) -> Models<'_> {
        Models {
            codebook: &self.codebook,
            regressor: &self.regressor,
            meshes: &self.meshes,
        }
    }
}

fn write_report(out: &Path, report: &EvalReport, with_summary: bool) -> Result<()> {
    create_dir(out)?;
    write_file(&out.join("detections.csv"), &report.detections_csv)?;
    write_file(
        &out.join("timings.csv"),
        &report.timings.to_csv(report.frames),
    )?;
    if with_summary {
        write_file(&out.join("summary.csv"), &report.summary_csv())?;
    }
    Ok(())
}

fn print_score(report: &EvalReport) {
    let p = &report.prf;
    println!(
        "frames {}  tp {}  fp {}  fn {}  precision {:.3}  recall {:.3}  f1 {:.3}  {:.1} ms/frame",
        report.frames,
        p.tp,
        p.fp,
        p.fn_,
        p.precision(),
        p.recall(),
        p.f1(),
        report.ms_per_frame()
    );
}

fn render_cmd(
    ov: &Overrides,
    mesh: &str,
    id: u32,
    subdivisions: u32,
    inplane: usize,
    radius: f64,
    out: &Path,
) -> Result<()> {
    let k = ov.camera()?;
    let mesh = load_mesh(mesh)?;
    let views = sample_icosahedron_views(subdivisions, radius, inplane)?;
    let mut ds = Dataset::create(out, &k)?;
    for (i, pose) in views.poses.iter().enumerate() {
        let view = render(&mesh, pose, &k);
        let gt = [Instance {
            object_id: id,
            pose: *pose,
        }];
        ds.write(&format!("view{i:04}"), &view.frame, Some(&gt))?;
    }
    println!("rendered {} views into {}", views.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train_cmd(
    cfg: &Config,
    data: &[PathBuf],
    kind: &str,
    dim: usize,
    samples: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let kind: RegressorKind = kind.parse().map_err(|e: Error| config_err(e.to_string()))?;
    let mut pool = Vec::new();
    for dir in data {
        let ds = Dataset::open(dir)?;
        for name in &ds.frames {
            pool.extend(sample_scene(&ds.load(name)?, &cfg.patch));
        }
    }
    if pool.is_empty() {
        return Err(config_err(
            "no training patches found in the given datasets",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, pool.len(), samples.min(pool.len())).into_vec();
    keep.sort_unstable();
    let patches: Vec<_> = keep.into_iter().map(|i| pool[i].clone()).collect();
    let reg = match kind {
        RegressorKind::Pca => Regressor::fit_pca(&patches, dim)?,
        _ => {
            let mut reg = RegressorSpec::new(kind, dim).build(seed)?;
            let report = reg.train(
                &patches,
                &patchvote::nn::TrainConfig {
                    seed,
                    ..cfg.train.clone()
                },
            )?;
            println!(
                "loss {:.6} -> {:.6}",
                report.initial_loss(),
                report.final_loss()
            );
            reg
        }
    };
    reg.save(out)?;
    println!(
        "trained {kind} regressor with {dim} dimensions on {} patches",
        patches.len()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_codebook_cmd(
    ov: &Overrides,
    cfg: &Config,
    model: &Path,
    objects: &[String],
    subdivisions: u32,
    inplane: usize,
    radius: f64,
    out: &Path,
) -> Result<()> {
    let k = ov.camera()?;
    let reg = Regressor::load(model)?;
    let meshes = parse_objects(objects)?;
    let views = sample_icosahedron_views(subdivisions, radius, inplane)?;
    let books = meshes
        .iter()
        .map(|(id, m)| build_codebook(m, *id, &views, &k, &reg, &cfg.patch, &cfg.ann))
        .collect::<Result<Vec<_>>>()?;
    let book = merge(&books, &cfg.ann)?;
    book.save(out)?;
    println!(
        "codebook with {} entries for {} objects",
        book.len(),
        meshes.len()
    );
    Ok(())
}

fn detect_cmd(cfg: &Config, inputs: &DetectInputs, out: &Path) -> Result<()> {
    let loaded = Loaded::open(inputs, cfg)?;
    let ds = Dataset::open(&inputs.data)?;
    let pipeline = cfg.pipeline();
    let mut csv = format!("{DETECTION_CSV_HEADER}\n");
    let mut timings = StageTimings::default();
    for name in &ds.frames {
        let r = run_detect(
            &ds.load(name)?,
            &loaded.codebook,
            &loaded.regressor,
            &loaded.meshes,
            &pipeline,
        )?;
        timings.add(&r.timings);
        csv.push_str(&detections_csv_rows(name, &r.detections));
        println!("{name}: {} detections", r.detections.len());
    }
    create_dir(out)?;
    write_file(&out.join("detections.csv"), &csv)?;
    write_file(&out.join("timings.csv"), &timings.to_csv(ds.frames.len()))
}

fn evaluate_cmd(cfg: &Config, inputs: &DetectInputs, out: Option<&Path>) -> Result<()> {
    let loaded = Loaded::open(inputs, cfg)?;
    let frames = load_labeled(&inputs.data, true)?;
    let report = evaluate_labeled(&frames, &loaded.models(), &cfg.pipeline(), &cfg.metric)?;
    print_score(&report);
    if let Some(out) = out {
        write_report(out, &report, true)?;
    }
    Ok(())
}

fn sweep_cmd(
    cfg: &Config,
    inputs: &DetectInputs,
    param: &str,
    values: &[f64],
    out: &Path,
) -> Result<()> {
    let param: SweepParam = param
        .parse()
        .map_err(|e: Error| config_err(e.to_string()))?;
    let loaded = Loaded::open(inputs, cfg)?;
    let frames = load_labeled(&inputs.data, true)?;
    let iter = frames
        .iter()
        .map(|f| (f.name.as_str(), &f.frame, f.gt.as_slice()));
    let rows = sweep(
        param,
        values,
        &cfg.pipeline(),
        iter,
        &loaded.models(),
        &cfg.metric,
    )
    .map_err(|e| match e {
        Error::InvalidParameter(m) => config_err(m),
        other => other,
    })?;
    create_dir(out)?;
    let csv = sweep_csv(param, &rows);
    print!("{csv}");
    write_file(&out.join("sweep.csv"), &csv)?;
    save_sweep_plot(&rows, out.join("sweep.png"))
}

#[allow(clippy::too_many_arguments)]
fn selftest_cmd(
    ov: &Overrides,
    cfg: &Config,
    seed: u64,
    scenes: usize,
    subdivisions: u32,
    inplane: usize,
    codebook_step: usize,
    out: Option<&Path>,
) -> Result<()> {
    let mut lc = ClosedLoopConfig {
        seed,
        scenes,
        view_subdivisions: subdivisions,
        inplane_steps: inplane,
        codebook_step,
        ..ClosedLoopConfig::default()
    };
    if ov.config.is_some()
        || ov.tau.is_some()
        || ov.knn.is_some()
        || ov.step.is_some()
        || ov.protocol.is_some()
        || ov.exact_nn
    {
        lc.pipeline = cfg.pipeline();
        lc.scene = cfg.scene.clone();
        lc.metric = cfg.metric.clone();
    }
    if ov.tau.is_some() {
        lc.tau_quantile = None;
    }
    let (prep, report) = run_closed_loop(&lc, &ov.camera()?)?;
    for (name, d) in &prep.phases {
        println!("{name}: {:.2} s", d.as_secs_f64());
    }
    println!(
        "codebook entries {}  tau {:.4}",
        prep.codebook.len(),
        prep.tau
    );
    print_score(&report);
    println!(
        "max true-positive error {:.4} x diameter",
        report.max_tp_error()
    );
    print!("{}", report.timings.to_csv(report.frames));
    if let Some(out) = out {
        write_report(out, &report, true)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let ov = &cli.overrides;
    let cfg = ov.settings()?;
    match &cli.command {
        Command::Render {
            mesh,
            object_id,
            subdivisions,
            inplane,
            radius,
            out,
        } => render_cmd(ov, mesh, *object_id, *subdivisions, *inplane, *radius, out),
        Command::Train {
            data,
            kind,
            dim,
            samples,
            seed,
            out,
        } => train_cmd(&cfg, data, kind, *dim, *samples, *seed, out),
        Command::BuildCodebook {
            model,
            objects,
            subdivisions,
            inplane,
            radius,
            out,
        } => build_codebook_cmd(
            ov,
            &cfg,
            model,
            objects,
            *subdivisions,
            *inplane,
            *radius,
            out,
        ),
        Command::Detect { inputs, out } => detect_cmd(&cfg, inputs, out),
        Command::Evaluate { inputs, out } => evaluate_cmd(&cfg, inputs, out.as_deref()),
        Command::Sweep {
            inputs,
            param,
            values,
            out,
        } => sweep_cmd(&cfg, inputs, param, values, out),
        Command::Selftest {
            seed,
            scenes,
            subdivisions,
            inplane,
            codebook_step,
            out,
        } => selftest_cmd(
            ov,
            &cfg,
            *seed,
            *scenes,
            *subdivisions,
            *inplane,
            *codebook_step,
            out.as_deref(),
        ),
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_io() {
        EXIT_IO
    } else if matches!(e, Error::Config(_)) {
        EXIT_CONFIG
    } else {
        EXIT_FAILURE
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
